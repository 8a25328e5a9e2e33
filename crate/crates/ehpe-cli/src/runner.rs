//! Model construction and inference helpers shared by the trainer, the
//! evaluator, and the ablation harness.
//!
//! Coordinates move between three frames here:
//! - dataset joints: (x, y) in image pixels, z in depth units;
//! - model coordinates: (x, y) in refined-heatmap cells, z in depth units;
//! - world units: the synthetic generator's metric frame, recovered through
//!   the fixed default camera (orthographic, so distances convert linearly).
//!
//! Evaluation reports world units; training losses stay in model units.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use ehpe_core::autodiff::Tape;
use ehpe_core::config::{EmbedInit, ModelConfig};
use ehpe_core::params::ParamSet;
use ehpe_core::pg::PgModel;
use ehpe_core::tw::TwModel;
use ehpe_core::{Result, Tensor};
use ehpe_handsim::Camera;

/// Registers the first stage alone.
pub fn build_tw(cfg: &ModelConfig, seed: u64) -> Result<(ParamSet, TwModel)> {
    let mut params = ParamSet::new();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let tw = TwModel::register(&mut params, cfg, &mut rng)?;
    Ok((params, tw))
}

/// Registers both stages in one parameter set (first stage first, so the
/// initial first-stage draw matches a TW-only build with the same seed).
pub fn build_full(
    cfg: &ModelConfig,
    seed: u64,
    mean_pose: Option<&Tensor>,
) -> Result<(ParamSet, TwModel, PgModel)> {
    let mut params = ParamSet::new();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let tw = TwModel::register(&mut params, cfg, &mut rng)?;
    let pg = PgModel::register(&mut params, cfg, mean_pose, &mut rng)?;
    Ok((params, tw, pg))
}

/// Builds the full model for checkpoint loading: parameter values come from
/// the checkpoint afterwards, so embeddings are registered zero-initialized
/// regardless of the configured initialization.
pub fn build_full_for_load(cfg: &ModelConfig, seed: u64) -> Result<(ParamSet, TwModel, PgModel)> {
    let mut eval_cfg = cfg.clone();
    eval_cfg.embed_init = EmbedInit::Zeros;
    build_full(&eval_cfg, seed, None)
}

/// First-stage inference values: predicted joints `[J, 3]` (model
/// coordinates) and the backbone feature map `[C, fm, fm]`.
pub fn predict_tw(params: &ParamSet, tw: &TwModel, image: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let vars = params.bind_all(&mut tape);
    let img = tape.constant(image);
    let out = tw.forward(&mut tape, &vars, img)?;
    let joints = Tensor::new(tape.shape(out.joints).to_vec(), tape.value(out.joints).to_vec())?;
    let featmap = Tensor::new(tape.shape(out.featmap).to_vec(), tape.value(out.featmap).to_vec())?;
    Ok((joints, featmap))
}

/// Full-model inference: final 21-joint coordinates in model units.
pub fn predict_full(params: &ParamSet, tw: &TwModel, pg: &PgModel, image: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.bind_all(&mut tape);
    let img = tape.constant(image);
    let tw_out = tw.forward(&mut tape, &vars, img)?;
    let pg_out = pg.forward(&mut tape, &vars, tw_out.joints, tw_out.featmap)?;
    Tensor::new(tape.shape(pg_out.coords).to_vec(), tape.value(pg_out.coords).to_vec())
}

/// Converts `[J, 3]` model coordinates (refined-heatmap cells, depth units)
/// to world units via the fixed generator camera.
pub fn model_coords_to_world(coords: &Tensor, coord_scale: f64) -> Result<Tensor> {
    let cam = Camera::default();
    let xy = coord_scale / cam.scale;
    let z = (cam.depth_range.1 - cam.depth_range.0) / cam.depth_res as f64;
    scale_axes(coords, [xy, xy, z])
}

/// Converts `[J, 3]` dataset coordinates (pixels, depth units) to world units.
pub fn dataset_coords_to_world(coords: &Tensor) -> Result<Tensor> {
    let cam = Camera::default();
    let xy = 1.0 / cam.scale;
    let z = (cam.depth_range.1 - cam.depth_range.0) / cam.depth_res as f64;
    scale_axes(coords, [xy, xy, z])
}

fn scale_axes(coords: &Tensor, s: [f64; 3]) -> Result<Tensor> {
    let data: Vec<f64> = coords.data().iter().enumerate().map(|(i, v)| v * s[i % 3]).collect();
    Tensor::new(coords.shape().to_vec(), data)
}
