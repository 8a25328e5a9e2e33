//! Named, ordered parameter registry shared by both model stages.
//!
//! Every learnable tensor lives in a [`ParamSet`] under a unique dotted name
//! (e.g. `tw.backbone.conv0.weight`). Registration order is deterministic
//! (models register in a fixed order), so seeded initialization, optimizer
//! state, and checkpoint bytes are all reproducible. Freezing is a per-entry
//! flag: frozen parameters are bound to tapes as constants, which both blocks
//! gradient flow into them and documents the two-phase contract in types.

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// What a parameter is, for regularization scoping: the stage-1 L1 penalty
/// covers weight matrices only.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ParamKind {
    /// Convolution kernels and projection/FC weight matrices.
    Weight,
    /// Bias vectors.
    Bias,
    /// Everything else: embeddings, fusion matrices, query tokens.
    Other,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
struct Entry {
    name: String,
    tensor: Tensor,
    kind: ParamKind,
    frozen: bool,
}

#[derive(Clone, Default)]
pub struct ParamSet {
    entries: Vec<Entry>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn register(&mut self, name: &str, tensor: Tensor, kind: ParamKind) -> Result<ParamId> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::config(format!("duplicate parameter name '{name}'")));
        }
        self.entries.push(Entry { name: name.to_string(), tensor, kind, frozen: false });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn set_tensor(&mut self, id: ParamId, tensor: Tensor) -> Result<()> {
        let cur = &self.entries[id.0];
        if cur.tensor.shape() != tensor.shape() {
            return Err(Error::shape(format!(
                "parameter '{}' has shape {:?}, replacement has {:?}",
                cur.name,
                cur.tensor.shape(),
                tensor.shape()
            )));
        }
        self.entries[id.0].tensor = tensor;
        Ok(())
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    /// Freeze/unfreeze every parameter whose name starts with `prefix`.
    /// Returns how many entries matched.
    pub fn set_frozen_by_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.frozen = frozen;
                n += 1;
            }
        }
        n
    }

    /// All ids in registration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Ids of parameters the optimizer may update, in registration order.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| !self.is_frozen(id)).collect()
    }

    /// Ids covered by the L1 weight penalty, optionally limited to a name
    /// prefix (the stage-1 loss regularizes only that stage's weights).
    pub fn weight_ids(&self, prefix: &str) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.kind(id) == ParamKind::Weight && self.name(id).starts_with(prefix))
            .collect()
    }

    /// Bind every parameter onto a tape: trainable entries as differentiable
    /// leaves, frozen entries as constants. Index the result by
    /// [`ParamId::index`].
    pub fn bind_all(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| if e.frozen { tape.constant(&e.tensor) } else { tape.leaf(&e.tensor) })
            .collect()
    }

    /// SHA-256 over the name-sorted (name, shape, data) records of parameters
    /// matching `prefix`; the freeze-verification fingerprint.
    pub fn content_hash(&self, prefix: &str) -> [u8; 32] {
        let mut names: Vec<usize> = (0..self.entries.len()).filter(|&i| self.entries[i].name.starts_with(prefix)).collect();
        names.sort_by(|&a, &b| self.entries[a].name.cmp(&self.entries[b].name));
        let mut h = Sha256::new();
        for i in names {
            let e = &self.entries[i];
            h.update((e.name.len() as u64).to_le_bytes());
            h.update(e.name.as_bytes());
            h.update((e.tensor.rank() as u64).to_le_bytes());
            for &d in e.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in e.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Uniform init in [-limit, limit] with limit = sqrt(6 / fan_in): keeps layer
/// output variance of order one under ReLU-family activations.
pub fn he_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    assert!(fan_in > 0, "fan_in must be positive");
    let limit = (6.0 / fan_in as f64).sqrt();
    let data: Vec<f64> = (0..numel(shape)).map(|_| rng.gen::<f64>() * 2.0 * limit - limit).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data consistent")
}

/// Convolution kernel init: fan_in = C_in * kh * kw.
pub fn conv_init(rng: &mut impl Rng, cout: usize, cin: usize, kh: usize, kw: usize) -> Tensor {
    he_uniform(rng, &[cout, cin, kh, kw], cin * kh * kw)
}

/// Linear weight init for x·W with W of shape [in, out]: fan_in = in.
pub fn linear_init(rng: &mut impl Rng, dim_in: usize, dim_out: usize) -> Tensor {
    he_uniform(rng, &[dim_in, dim_out], dim_in)
}

/// Identity matrix.
pub fn eye(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        data[i * n + i] = 1.0;
    }
    Tensor::new(vec![n, n], data).expect("square")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn register_rejects_duplicates() {
        let mut p = ParamSet::new();
        p.register("a.w", Tensor::zeros(&[2]), ParamKind::Weight).unwrap();
        assert!(p.register("a.w", Tensor::zeros(&[2]), ParamKind::Weight).is_err());
    }

    #[test]
    fn freeze_by_prefix_and_trainable_ids() {
        let mut p = ParamSet::new();
        let a = p.register("tw.conv.weight", Tensor::zeros(&[2]), ParamKind::Weight).unwrap();
        let b = p.register("pg.fc.weight", Tensor::zeros(&[2]), ParamKind::Weight).unwrap();
        assert_eq!(p.set_frozen_by_prefix("tw.", true), 1);
        assert!(p.is_frozen(a));
        assert!(!p.is_frozen(b));
        assert_eq!(p.trainable_ids(), vec![b]);
    }

    #[test]
    fn frozen_params_bind_as_constants() {
        let mut p = ParamSet::new();
        let a = p.register("tw.w", Tensor::new(vec![1], vec![2.0]).unwrap(), ParamKind::Weight).unwrap();
        let b = p.register("pg.w", Tensor::new(vec![1], vec![3.0]).unwrap(), ParamKind::Weight).unwrap();
        p.set_frozen(a, true);
        let mut tape = Tape::new();
        let vars = p.bind_all(&mut tape);
        let prod = tape.mul(vars[a.index()], vars[b.index()]).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss).unwrap();
        assert!(tape.grad(vars[a.index()]).is_none(), "frozen param must receive no gradient");
        assert_eq!(tape.grad(vars[b.index()]).unwrap(), &[2.0]);
    }

    #[test]
    fn content_hash_tracks_values_and_scope() {
        let mut p = ParamSet::new();
        let a = p.register("tw.w", Tensor::new(vec![1], vec![2.0]).unwrap(), ParamKind::Weight).unwrap();
        p.register("pg.w", Tensor::new(vec![1], vec![3.0]).unwrap(), ParamKind::Weight).unwrap();
        let h1 = p.content_hash("tw.");
        assert_eq!(h1, p.content_hash("tw."), "hash is deterministic");
        assert_ne!(h1, p.content_hash("pg."), "scope changes the hash");
        p.tensor_mut(a).data_mut()[0] = 5.0;
        assert_ne!(h1, p.content_hash("tw."), "value changes the hash");
    }

    #[test]
    fn he_uniform_is_seeded_and_bounded() {
        let mut r1 = ChaCha20Rng::seed_from_u64(9);
        let mut r2 = ChaCha20Rng::seed_from_u64(9);
        let t1 = he_uniform(&mut r1, &[4, 4], 4);
        let t2 = he_uniform(&mut r2, &[4, 4], 4);
        assert_eq!(t1.data(), t2.data());
        let limit = (6.0f64 / 4.0).sqrt();
        assert!(t1.data().iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn weight_ids_scoped_by_prefix_and_kind() {
        let mut p = ParamSet::new();
        let w = p.register("tw.c.weight", Tensor::zeros(&[1]), ParamKind::Weight).unwrap();
        p.register("tw.c.bias", Tensor::zeros(&[1]), ParamKind::Bias).unwrap();
        p.register("pg.f.weight", Tensor::zeros(&[1]), ParamKind::Weight).unwrap();
        assert_eq!(p.weight_ids("tw."), vec![w]);
    }
}
