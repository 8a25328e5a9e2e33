//! Segmented 3-D hand pose estimation on synthetic depth-style images.
//!
//! The pipeline runs in two stages: a heatmap stage localizes the five
//! fingertips and the wrist via 2.5-D heatmaps and soft-argmax, and a
//! prior-guided stage completes all 21 joints with a dual branch — graph
//! attention over the kinematic skeleton plus an attention-based feature
//! enhancer — fused by learned weights. Everything runs on a from-scratch
//! reverse-mode autodiff core in f64, with deterministic, seeded behavior
//! end to end.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod fdcheck;
pub mod metrics;
pub mod params;
pub mod pg;
pub mod skeleton;
pub mod tensor;
pub mod tw;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Tiny deterministic RNG for tests (splitmix64); keeps test fixtures
/// independent of the production RNG choices.
#[cfg(test)]
pub(crate) struct TestRng(u64);

#[cfg(test)]
pub(crate) fn test_rng(seed: u64) -> TestRng {
    TestRng(seed)
}

#[cfg(test)]
impl TestRng {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}
