//! Deterministic synthetic hand-pose data.
//!
//! The pipeline is pose sampling ([`pose`]) -> forward kinematics
//! ([`kinematics`]) -> orthographic 2.5-D projection ([`camera`]) ->
//! rasterization ([`render`]), assembled per sample by [`sample::make_sample`]
//! and into files by [`dataset::generate_dataset`].  Every stage is a pure
//! function of the dataset seed and sample id, so datasets are reproducible
//! byte for byte, in any generation order, at any parallelism.

pub mod camera;
pub mod dataset;
pub mod geom;
pub mod kinematics;
pub mod pose;
pub mod render;
pub mod sample;

pub use camera::Camera;
pub use dataset::{generate_dataset, read_dataset, split_of, Dataset, DatasetHeader, Split};
pub use kinematics::{forward_kinematics, Skeleton};
pub use pose::{sample_pose, sample_rng, JointAngles, PoseLimits};
pub use render::{render, RenderConfig};
pub use sample::{make_sample, GenParams, HandSample};
