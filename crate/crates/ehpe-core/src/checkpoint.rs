//! Checkpoint file format shared by both stages.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      7 bytes   "EHPECP1"
//! version    u32       currently 1
//! stage      u8        0 = first stage only, 1 = full two-stage model
//! ref_len    u8        length of the reference hash (0 if absent)
//! ref_hash   ref_len   SHA-256 of the frozen first-stage checkpoint file
//!                      this model was trained from (stage-1 files only)
//! count      u64       number of parameter records
//! record*    count     sorted by name:
//!   name_len u32, name bytes (UTF-8),
//!   rank     u32, dims u64 * rank,
//!   data     f64 * product(dims),
//!   frozen   u8 (0/1)
//! ```
//!
//! Records are written in name-sorted order and every field is fixed-width,
//! so identical parameters produce identical files byte for byte.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamSet};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 7] = b"EHPECP1";
pub const VERSION: u32 = 1;

/// Which stages a checkpoint carries parameters for.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Stage {
    /// First stage (heatmap model) only.
    Tw,
    /// Full model: first stage (frozen) plus the prior-guided stage.
    Full,
}

impl Stage {
    fn tag(self) -> u8 {
        match self {
            Stage::Tw => 0,
            Stage::Full => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Stage> {
        match tag {
            0 => Some(Stage::Tw),
            1 => Some(Stage::Full),
            _ => None,
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Stage::Tw => "TW",
            Stage::Full => "FULL",
        }
    }
}

/// A parsed checkpoint: stage, optional frozen-stage reference hash, and records.
pub struct Checkpoint {
    pub stage: Stage,
    pub ref_hash: Option<Vec<u8>>,
    pub entries: Vec<(String, Tensor, bool)>,
}

/// Serialize `prefixed` parameters of `params` to bytes. Pass an empty prefix
/// to include everything.
pub fn to_bytes(params: &ParamSet, prefix: &str, stage: Stage, ref_hash: Option<&[u8]>) -> Vec<u8> {
    let mut ids: Vec<_> = params.ids().filter(|&id| params.name(id).starts_with(prefix)).collect();
    ids.sort_by(|&a, &b| params.name(a).cmp(params.name(b)));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(stage.tag());
    let rh = ref_hash.unwrap_or(&[]);
    debug_assert!(rh.len() <= u8::MAX as usize);
    out.push(rh.len() as u8);
    out.extend_from_slice(rh);
    out.extend_from_slice(&(ids.len() as u64).to_le_bytes());
    for id in ids {
        let name = params.name(id).as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        let t = params.tensor(id);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(params.is_frozen(id) as u8);
    }
    out
}

pub fn save(path: &Path, params: &ParamSet, prefix: &str, stage: Stage, ref_hash: Option<&[u8]>) -> Result<()> {
    let bytes = to_bytes(params, prefix, stage, ref_hash);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(path: &Path, buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0, path };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::format(path, "bad magic (not a checkpoint file)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let stage = Stage::from_tag(r.u8()?).ok_or_else(|| Error::format(path, "unknown stage tag"))?;
    let ref_len = r.u8()? as usize;
    let ref_hash = if ref_len > 0 { Some(r.take(ref_len)?.to_vec()) } else { None };
    let count = r.u64()? as usize;
    let mut entries = Vec::with_capacity(count);
    let mut prev_name: Option<String> = None;
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?
            .to_string();
        if let Some(p) = &prev_name {
            if *p >= name {
                return Err(Error::format(path, format!("records not sorted by name at '{name}'")));
            }
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n = numel(&shape);
        let raw = r.take(n * 8)?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let frozen = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(Error::format(path, format!("bad frozen flag {other} for '{name}'"))),
        };
        let tensor = Tensor::new(shape, data).map_err(|e| Error::format(path, format!("record '{name}': {e}")))?;
        prev_name = Some(name.clone());
        entries.push((name, tensor, frozen));
    }
    if r.pos != buf.len() {
        return Err(Error::format(path, format!("{} trailing bytes after last record", buf.len() - r.pos)));
    }
    Ok(Checkpoint { stage, ref_hash, entries })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    fs::File::open(path).map_err(|e| Error::io(path, e))?.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    from_bytes(path, &buf)
}

/// Copy checkpoint values into an already-registered [`ParamSet`]. Every
/// checkpoint record must exist with a matching shape; parameters of `params`
/// outside the checkpoint are left untouched. Frozen flags are applied.
/// Returns how many entries were loaded.
pub fn apply(params: &mut ParamSet, ckpt: &Checkpoint, path: &Path) -> Result<usize> {
    for (name, tensor, _) in &ckpt.entries {
        let id = params
            .id_of(name)
            .ok_or_else(|| Error::format(path, format!("checkpoint parameter '{name}' does not exist in this model configuration")))?;
        if params.tensor(id).shape() != tensor.shape() {
            return Err(Error::format(
                path,
                format!("parameter '{name}' shape {:?} does not match model shape {:?}", tensor.shape(), params.tensor(id).shape()),
            ));
        }
    }
    for (name, tensor, frozen) in &ckpt.entries {
        let id = params.id_of(name).expect("validated above");
        params.set_tensor(id, tensor.clone())?;
        params.set_frozen(id, *frozen);
    }
    Ok(ckpt.entries.len())
}

/// SHA-256 of a file's contents.
pub fn file_sha256(path: &Path) -> Result<[u8; 32]> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().into())
}

/// Register every checkpoint entry into an empty [`ParamSet`] (evaluation
/// path, where the model architecture is reconstructed from config and the
/// names must line up; kinds are not stored in the file).
pub fn into_params(ckpt: &Checkpoint) -> Result<ParamSet> {
    let mut params = ParamSet::new();
    for (name, tensor, frozen) in &ckpt.entries {
        let id = params.register(name, tensor.clone(), ParamKind::Other)?;
        params.set_frozen(id, *frozen);
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    fn sample_params() -> ParamSet {
        let mut p = ParamSet::new();
        p.register("tw.conv.weight", Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap(), ParamKind::Weight)
            .unwrap();
        p.register("tw.conv.bias", Tensor::new(vec![2], vec![0.5, -0.5]).unwrap(), ParamKind::Bias).unwrap();
        p.register("pg.fuse.omega", Tensor::new(vec![1], vec![7.0]).unwrap(), ParamKind::Other).unwrap();
        p
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut p = sample_params();
        p.set_frozen_by_prefix("tw.", true);
        save(&path, &p, "", Stage::Full, Some(&[0xAB; 32])).unwrap();

        let ckpt = load(&path).unwrap();
        assert_eq!(ckpt.stage, Stage::Full);
        assert_eq!(ckpt.ref_hash.as_deref(), Some(&[0xAB; 32][..]));
        assert_eq!(ckpt.entries.len(), 3);
        // sorted by name
        let names: Vec<&str> = ckpt.entries.iter().map(|(n, _, _)| n.as_str()).collect();
        assert_eq!(names, vec!["pg.fuse.omega", "tw.conv.bias", "tw.conv.weight"]);
        let (_, w, frozen) = &ckpt.entries[2];
        assert_eq!(w.data(), &[1.0, -2.0, 3.5, 0.25]);
        assert!(*frozen);
    }

    #[test]
    fn serialization_is_byte_deterministic() {
        let p = sample_params();
        let b1 = to_bytes(&p, "", Stage::Tw, None);
        let b2 = to_bytes(&p, "", Stage::Tw, None);
        assert_eq!(b1, b2);
    }

    #[test]
    fn prefix_filters_records() {
        let p = sample_params();
        let bytes = to_bytes(&p, "tw.", Stage::Tw, None);
        let ckpt = from_bytes(Path::new("mem"), &bytes).unwrap();
        assert_eq!(ckpt.entries.len(), 2);
        assert!(ckpt.entries.iter().all(|(n, _, _)| n.starts_with("tw.")));
    }

    #[test]
    fn apply_validates_shapes_and_names() {
        let p = sample_params();
        let bytes = to_bytes(&p, "", Stage::Tw, None);
        let ckpt = from_bytes(Path::new("mem"), &bytes).unwrap();

        let mut fresh = sample_params();
        fresh.tensor_mut(fresh.id_of("pg.fuse.omega").unwrap()).data_mut()[0] = 0.0;
        apply(&mut fresh, &ckpt, Path::new("mem")).unwrap();
        assert_eq!(fresh.tensor(fresh.id_of("pg.fuse.omega").unwrap()).data(), &[7.0]);

        let mut wrong = ParamSet::new();
        wrong.register("tw.conv.weight", Tensor::zeros(&[3]), ParamKind::Weight).unwrap();
        assert!(apply(&mut wrong, &ckpt, Path::new("mem")).is_err());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let p = sample_params();
        let good = to_bytes(&p, "", Stage::Tw, None);

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(from_bytes(Path::new("mem"), &bad_magic).is_err());

        let truncated = &good[..good.len() - 3];
        assert!(from_bytes(Path::new("mem"), truncated).is_err());

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(from_bytes(Path::new("mem"), &trailing).is_err());
    }

    #[test]
    fn file_hash_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &sample_params(), "", Stage::Tw, None).unwrap();
        let h1 = file_sha256(&path).unwrap();
        save(&path, &sample_params(), "", Stage::Tw, None).unwrap();
        assert_eq!(h1, file_sha256(&path).unwrap());
    }
}
