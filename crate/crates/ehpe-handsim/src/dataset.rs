//! The dataset file format and whole-dataset generation.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic   7 bytes  "EHPEDS1"
//! version u32      currently 1
//! n       u64      number of records
//! c       u32      image channels
//! h       u32      image height
//! w       u32      image width
//! d       u32      depth resolution of the z coordinate
//! then n fixed-size records, ordered by sample_id:
//!   image      c*h*w f64    row-major [c, h, w], values in [0, 1]
//!   joints25d  21*3  f64    rows of (x px, y px, z in [0, d))
//!   category   21    bytes  ASCII letter per joint (W/M/P/D/T)
//!   sample_id  u64
//! ```
//!
//! The train/val/test split is not stored: it is a pure function of the
//! sample id ([`split_of`]), so any reader derives the same 80/10/10 split.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ehpe_core::error::{Error, Result};
use ehpe_core::skeleton::{Category, NUM_JOINTS};
use ehpe_core::tensor::Tensor;
use rayon::prelude::*;

use crate::sample::{make_sample, GenParams, HandSample};

pub const MAGIC: &[u8; 7] = b"EHPEDS1";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// splitmix64: the standard 64-bit finalizer-style mixer.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// 80/10/10 split by a hash of the sample id, independent of dataset size
/// and stable across runs.
pub fn split_of(sample_id: u64) -> Split {
    match splitmix64(sample_id) % 10 {
        0..=7 => Split::Train,
        8 => Split::Val,
        _ => Split::Test,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub n: u64,
    pub channels: u32,
    pub height: u32,
    pub width: u32,
    pub depth: u32,
}

pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<HandSample>,
}

impl Dataset {
    /// Indices of the samples in one split.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| split_of(s.sample_id) == split)
            .map(|(i, _)| i)
            .collect()
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Writes samples (already ordered by sample id) to `path`.
pub fn write_dataset(path: &Path, header: DatasetHeader, samples: &[HandSample]) -> Result<()> {
    if samples.len() as u64 != header.n {
        return Err(Error::config(format!(
            "header says {} samples, got {}",
            header.n,
            samples.len()
        )));
    }
    let image_len = (header.channels * header.height * header.width) as usize;
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let w = &mut out;
    let werr = |e| Error::io(path, e);

    w.write_all(MAGIC).map_err(werr)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(werr)?;
    w.write_all(&header.n.to_le_bytes()).map_err(werr)?;
    for v in [header.channels, header.height, header.width, header.depth] {
        w.write_all(&v.to_le_bytes()).map_err(werr)?;
    }
    for s in samples {
        if s.image.len() != image_len {
            return Err(Error::shape(format!(
                "sample {}: image has {} values, header implies {image_len}",
                s.sample_id,
                s.image.len()
            )));
        }
        for v in s.image.iter() {
            w.write_all(&v.to_le_bytes()).map_err(werr)?;
        }
        for v in s.joints25d.iter() {
            w.write_all(&v.to_le_bytes()).map_err(werr)?;
        }
        w.write_all(&s.category).map_err(werr)?;
        w.write_all(&s.sample_id.to_le_bytes()).map_err(werr)?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    inner: BufReader<File>,
    path: &'a Path,
}

impl Reader<'_> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::format(self.path, "truncated file"))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut raw = vec![0u8; n * 8];
        self.inner
            .read_exact(&mut raw)
            .map_err(|_| Error::format(self.path, "truncated record"))?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Reads a dataset back, validating structure and per-sample invariants.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = Reader { inner: BufReader::new(file), path };

    let magic: [u8; 7] = r.bytes()?;
    if &magic != MAGIC {
        return Err(Error::format(path, "bad magic; not a dataset file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let header = DatasetHeader {
        n: r.u64()?,
        channels: r.u32()?,
        height: r.u32()?,
        width: r.u32()?,
        depth: r.u32()?,
    };
    let image_len = (header.channels as usize) * (header.height as usize) * (header.width as usize);
    if image_len == 0 {
        return Err(Error::format(path, "zero-sized image dimensions"));
    }

    let mut samples = Vec::with_capacity(header.n as usize);
    for i in 0..header.n {
        let image = Tensor::new(
            vec![header.channels as usize, header.height as usize, header.width as usize],
            r.f64_vec(image_len)?,
        )?;
        let joints = Tensor::new(vec![NUM_JOINTS, 3], r.f64_vec(NUM_JOINTS * 3)?)?;
        let category: [u8; NUM_JOINTS] = r.bytes()?;
        for &c in &category {
            Category::from_letter(c as char)
                .map_err(|_| Error::format(path, format!("record {i}: invalid category byte {c}")))?;
        }
        let sample_id = r.u64()?;
        for j in 0..NUM_JOINTS {
            let (x, y, z) = (joints.at(&[j, 0]), joints.at(&[j, 1]), joints.at(&[j, 2]));
            let ok = x >= 0.0
                && x < header.width as f64
                && y >= 0.0
                && y < header.height as f64
                && z >= 0.0
                && z < header.depth as f64;
            if !ok {
                return Err(Error::format(
                    path,
                    format!("record {i}: joint {j} out of bounds ({x}, {y}, {z})"),
                ));
            }
        }
        samples.push(HandSample { image, joints25d: joints, category, sample_id });
    }
    let mut trailing = [0u8; 1];
    match r.inner.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => return Err(Error::format(path, "trailing bytes after final record")),
        Err(e) => return Err(Error::io(path, e)),
    }
    Ok(Dataset { header, samples })
}

/// Generates `n` samples for `seed` and writes them to `path`.  Sample
/// generation is parallel by sample id; the file is assembled in id order, so
/// the output bytes depend only on `(n, seed, params)`.
pub fn generate_dataset(path: &Path, n: u64, seed: u64, params: &GenParams) -> Result<DatasetHeader> {
    if n == 0 {
        return Err(Error::config("dataset size must be >= 1".to_string()));
    }
    let samples: Vec<HandSample> = (0..n)
        .into_par_iter()
        .map(|id| make_sample(seed, id, params))
        .collect::<Result<_>>()?;
    let (w, h) = params.camera.image;
    let header = DatasetHeader {
        n,
        channels: 3,
        height: h as u32,
        width: w as u32,
        depth: params.camera.depth_res as u32,
    };
    write_dataset(path, header, &samples)?;
    Ok(header)
}
