//! Two-phase training protocol.
//!
//! Phase one trains the first stage alone on its supervised joint set.
//! Phase two loads that checkpoint, freezes every `tw.` parameter (verified
//! by content hash before and after), caches the frozen stage's outputs per
//! sample, and trains the prior-guided stage on all 21 joints.  A third mode
//! (`pg_from_scratch`) trains the whole network end-to-end under the
//! second-stage loss only, for the stage-ablation comparison.
//!
//! Every run is deterministic: parameter initialization, per-epoch shuffles
//! (seed = config seed + epoch), batch order, and the fixed-index-order
//! gradient reduction are all functions of the config and dataset bytes, so
//! identical inputs produce byte-identical checkpoints.  Batch members run on
//! separate tapes, safely in parallel; their gradients are summed in sample
//! order regardless of thread count.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use ehpe_core::autodiff::Tape;
use ehpe_core::checkpoint::{self, Stage};
use ehpe_core::config::ModelConfig;
use ehpe_core::metrics;
use ehpe_core::params::{ParamId, ParamSet};
use ehpe_core::pg::{self, PgModel};
use ehpe_core::skeleton::NUM_JOINTS;
use ehpe_core::tw::{self, TwModel};
use ehpe_core::{Error, Result, Tensor};
use ehpe_handsim::{read_dataset, Dataset, Split};

use crate::runner;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Which stage a run trains.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Tw,
    Pg,
}

/// One training run, fully specified.  Unknown JSON keys are rejected.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub seed: u64,
    pub dataset: PathBuf,
    pub checkpoint_out: PathBuf,
    /// Required for phase `pg` unless `pg_from_scratch`.
    pub tw_checkpoint: Option<PathBuf>,
    /// Newline-delimited JSON epoch records, if set.
    pub metrics_out: Option<PathBuf>,
    /// Train both stages end-to-end under the second-stage loss only.
    pub pg_from_scratch: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase: Phase::Tw,
            epochs: 30,
            batch_size: 32,
            lr_initial: 1e-3,
            lr_milestones: vec![20, 26],
            lr_decay: 0.1,
            seed: 0,
            dataset: PathBuf::new(),
            checkpoint_out: PathBuf::new(),
            tw_checkpoint: None,
            metrics_out: None,
            pg_from_scratch: false,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults for the second phase: longer schedule, later milestones.
    pub fn default_pg() -> Self {
        TrainConfig {
            phase: Phase::Pg,
            epochs: 40,
            lr_milestones: vec![25, 35],
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1".to_string()));
        }
        if !(self.lr_initial.is_finite() && self.lr_initial > 0.0) {
            return Err(Error::config(format!("lr_initial must be finite and positive, got {}", self.lr_initial)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config(format!("lr_decay must be in (0, 1], got {}", self.lr_decay)));
        }
        for w in self.lr_milestones.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::config("lr_milestones must be strictly increasing".to_string()));
            }
        }
        if self.dataset.as_os_str().is_empty() {
            return Err(Error::config("dataset path is required".to_string()));
        }
        if self.checkpoint_out.as_os_str().is_empty() {
            return Err(Error::config("checkpoint_out path is required".to_string()));
        }
        if self.phase == Phase::Pg && !self.pg_from_scratch && self.tw_checkpoint.is_none() {
            return Err(Error::config(
                "phase pg requires tw_checkpoint (or pg_from_scratch) — pass --tw-checkpoint".to_string(),
            ));
        }
        self.model.validate()
    }
}

/// Piecewise-constant schedule: the initial rate times `lr_decay` for every
/// milestone at or before `epoch`.
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> f64 {
    let hits = cfg.lr_milestones.iter().filter(|&&m| epoch >= m).count();
    cfg.lr_initial * cfg.lr_decay.powi(hits as i32)
}

/// Bias-corrected Adam over a fixed list of trainable parameters.
pub struct Adam {
    ids: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u32,
}

impl Adam {
    pub fn new(params: &ParamSet, ids: Vec<ParamId>) -> Adam {
        let m = ids.iter().map(|&id| vec![0.0; params.tensor(id).len()]).collect();
        let v = ids.iter().map(|&id| vec![0.0; params.tensor(id).len()]).collect();
        Adam { ids, m, v, t: 0 }
    }

    pub fn step_count(&self) -> u32 {
        self.t
    }

    /// One update.  `grads[i]` matches `ids[i]`; any non-finite component
    /// aborts with the parameter's name before anything is modified.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        for (i, &id) in self.ids.iter().enumerate() {
            if grads[i].len() != self.m[i].len() {
                return Err(Error::shape(format!(
                    "gradient length {} does not match parameter {}",
                    grads[i].len(),
                    params.name(id)
                )));
            }
            if grads[i].iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter '{}'", params.name(id))));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (i, &id) in self.ids.iter().enumerate() {
            let theta = params.tensor_mut(id).data_mut();
            for (k, &g) in grads[i].iter().enumerate() {
                self.m[i][k] = ADAM_BETA1 * self.m[i][k] + (1.0 - ADAM_BETA1) * g;
                self.v[i][k] = ADAM_BETA2 * self.v[i][k] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = self.m[i][k] / bc1;
                let v_hat = self.v[i][k] / bc2;
                theta[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// What a finished run reports back (everything also lands in the log).
pub struct TrainOutcome {
    pub term_names: Vec<&'static str>,
    /// Loss terms over the train split before the first update.
    pub initial_terms: Vec<f64>,
    /// Mean loss terms over the final epoch.
    pub final_terms: Vec<f64>,
    /// Validation MPJPE (world units) after the final epoch.
    pub val_mpjpe: f64,
    /// Validation PA-MPJPE (world units), when alignment is defined (>= 3 joints).
    pub val_pa_mpjpe: Option<f64>,
    /// Hex content hash of the frozen first stage (phase pg only).
    pub tw_hash_hex: Option<String>,
    pub checkpoint: PathBuf,
    pub wall_ms: u128,
}

impl TrainOutcome {
    pub fn term(&self, name: &str) -> Option<(f64, f64)> {
        let i = self.term_names.iter().position(|&n| n == name)?;
        Some((self.initial_terms[i], self.final_terms[i]))
    }
}

/// First-stage targets for one sample: heatmaps `[J, hm, hm]` and soft-argmax
/// coordinates `[J, 3]`, both in model units.
fn tw_targets(cfg: &ModelConfig, joint_indices: &[usize], joints_px: &Tensor) -> Result<(Tensor, Tensor)> {
    let s = cfg.coord_scale();
    let hm = cfg.heatmap_size();
    let mut centers = Vec::with_capacity(joint_indices.len());
    let mut coords = Vec::with_capacity(joint_indices.len() * 3);
    for &j in joint_indices {
        let x = joints_px.at(&[j, 0]) / s;
        let y = joints_px.at(&[j, 1]) / s;
        centers.push((x, y));
        coords.extend_from_slice(&[x, y, joints_px.at(&[j, 2])]);
    }
    let maps = tw::gaussian_targets(&centers, cfg.sigma_x, cfg.sigma_y, hm, hm)?;
    Ok((maps, Tensor::new(vec![joint_indices.len(), 3], coords)?))
}

/// All 21 joints in model units (the second-stage target).
fn pg_target(cfg: &ModelConfig, joints_px: &Tensor) -> Result<Tensor> {
    let s = cfg.coord_scale();
    let mut coords = Vec::with_capacity(NUM_JOINTS * 3);
    for j in 0..NUM_JOINTS {
        coords.extend_from_slice(&[joints_px.at(&[j, 0]) / s, joints_px.at(&[j, 1]) / s, joints_px.at(&[j, 2])]);
    }
    Tensor::new(vec![NUM_JOINTS, 3], coords)
}

/// Mean of the non-supervised joints' target coordinates over the train
/// split, `[21 - J, 3]` — the mean-pose embedding initialization.
fn mean_pose(cfg: &ModelConfig, data: &Dataset, train: &[usize], supervised: &[usize]) -> Result<Tensor> {
    let embedded: Vec<usize> = (0..NUM_JOINTS).filter(|j| !supervised.contains(j)).collect();
    let mut acc = vec![0.0; embedded.len() * 3];
    for &i in train {
        let t = pg_target(cfg, &data.samples[i].joints25d)?;
        for (slot, &j) in embedded.iter().enumerate() {
            for c in 0..3 {
                acc[slot * 3 + c] += t.at(&[j, c]);
            }
        }
    }
    let n = train.len().max(1) as f64;
    for v in &mut acc {
        *v /= n;
    }
    Tensor::new(vec![embedded.len(), 3], acc)
}

type SamplePass = (Vec<f64>, Vec<Vec<f64>>);

/// Runs `pass` over `indices` (in parallel), then reduces losses and
/// gradients in index order and divides by the batch size.
fn batch_pass<F>(indices: &[usize], with_grads: bool, pass: F) -> Result<SamplePass>
where
    F: Fn(usize, bool) -> Result<SamplePass> + Sync,
{
    let results: Result<Vec<SamplePass>> = indices.par_iter().map(|&i| pass(i, with_grads)).collect();
    let results = results?;
    let k = indices.len() as f64;
    let mut terms = vec![0.0; results[0].0.len()];
    let mut grads: Vec<Vec<f64>> = results[0].1.iter().map(|g| vec![0.0; g.len()]).collect();
    for (t, g) in &results {
        for (acc, v) in terms.iter_mut().zip(t) {
            *acc += v;
        }
        for (accg, vg) in grads.iter_mut().zip(g) {
            for (a, v) in accg.iter_mut().zip(vg) {
                *a += v;
            }
        }
    }
    for v in &mut terms {
        *v /= k;
    }
    for g in &mut grads {
        for v in g.iter_mut() {
            *v /= k;
        }
    }
    Ok((terms, grads))
}

fn collect_grads(tape: &Tape, vars: &[ehpe_core::autodiff::Var], params: &ParamSet, trainable: &[ParamId]) -> Vec<Vec<f64>> {
    trainable
        .iter()
        .map(|&id| match tape.grad(vars[id.index()]) {
            Some(g) => g.to_vec(),
            None => vec![0.0; params.tensor(id).len()],
        })
        .collect()
}

struct EpochLog {
    terms: Vec<f64>,
    lr: f64,
    val_mpjpe: f64,
    val_pa: Option<f64>,
    wall_ms: u128,
}

fn write_metrics_line(
    out: &mut Option<fs::File>,
    phase: Phase,
    epoch: Option<usize>,
    names: &[&str],
    log: &EpochLog,
) -> Result<()> {
    if let Some(f) = out {
        let mut rec = serde_json::Map::new();
        rec.insert("phase".into(), serde_json::to_value(phase).expect("phase serializes"));
        rec.insert("epoch".into(), match epoch {
            Some(e) => serde_json::Value::from(e),
            None => serde_json::Value::Null,
        });
        rec.insert("lr".into(), log.lr.into());
        for (n, v) in names.iter().zip(&log.terms) {
            rec.insert(format!("loss_{n}"), (*v).into());
        }
        rec.insert("val_mpjpe".into(), log.val_mpjpe.into());
        rec.insert("val_pa_mpjpe".into(), match log.val_pa {
            Some(v) => v.into(),
            None => serde_json::Value::Null,
        });
        rec.insert("wall_ms".into(), serde_json::Value::from(log.wall_ms as u64));
        let line = serde_json::Value::Object(rec).to_string();
        writeln!(f, "{line}").map_err(|e| Error::io(Path::new("metrics log"), e))?;
    }
    Ok(())
}

/// Mean-over-joints position error of `pred` against `target`, both in model
/// units, converted to world units.
fn val_errors(cfg: &ModelConfig, preds: &[Tensor], targets: &[Tensor]) -> Result<(f64, Option<f64>)> {
    let world_p: Result<Vec<Tensor>> =
        preds.iter().map(|p| runner::model_coords_to_world(p, cfg.coord_scale())).collect();
    let world_t: Result<Vec<Tensor>> =
        targets.iter().map(|t| runner::model_coords_to_world(t, cfg.coord_scale())).collect();
    let p = metrics::stack_poses(&world_p?)?;
    let t = metrics::stack_poses(&world_t?)?;
    let m = metrics::mpjpe(&p, &t)?;
    let pa = if p.shape()[1] >= 3 {
        match metrics::pa_mpjpe(&p, &t) {
            Ok((v, _)) => Some(v),
            Err(Error::Degenerate(_)) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    Ok((m, pa))
}

fn open_metrics(cfg: &TrainConfig) -> Result<Option<fs::File>> {
    match &cfg.metrics_out {
        Some(p) => {
            if let Some(dir) = p.parent() {
                if !dir.as_os_str().is_empty() {
                    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
            }
            Ok(Some(fs::File::create(p).map_err(|e| Error::io(p, e))?))
        }
        None => Ok(None),
    }
}

fn shuffled(train: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut order = train.to_vec();
    let mut rng = ChaCha20Rng::seed_from_u64(seed + epoch as u64);
    order.shuffle(&mut rng);
    order
}

fn save_checkpoint(cfg: &TrainConfig, params: &ParamSet, stage: Stage, ref_hash: Option<&[u8]>) -> Result<()> {
    if let Some(dir) = cfg.checkpoint_out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    checkpoint::save(&cfg.checkpoint_out, params, "", stage, ref_hash)
}

/// Runs one training phase end to end.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = read_dataset(&cfg.dataset)?;
    validate_dataset_for(cfg, &data)?;
    let train_idx = data.split_indices(Split::Train);
    let val_idx = data.split_indices(Split::Val);
    if train_idx.is_empty() {
        return Err(Error::Degenerate("dataset has no training samples".to_string()));
    }
    if val_idx.is_empty() {
        return Err(Error::Degenerate("dataset has no validation samples".to_string()));
    }
    match cfg.phase {
        Phase::Tw => train_tw(cfg, &data, &train_idx, &val_idx),
        Phase::Pg if cfg.pg_from_scratch => train_pg_scratch(cfg, &data, &train_idx, &val_idx),
        Phase::Pg => train_pg(cfg, &data, &train_idx, &val_idx),
    }
}

fn validate_dataset_for(cfg: &TrainConfig, data: &Dataset) -> Result<()> {
    let h = &data.header;
    let m = &cfg.model;
    if h.height as usize != m.image_size || h.width as usize != m.image_size || h.channels as usize != m.image_channels
    {
        return Err(Error::config(format!(
            "dataset images are {}x{}x{} but the model expects {}x{}x{}",
            h.channels, h.height, h.width, m.image_channels, m.image_size, m.image_size
        )));
    }
    if h.depth as usize != m.depth {
        return Err(Error::config(format!(
            "dataset depth resolution {} does not match model depth {}",
            h.depth, m.depth
        )));
    }
    Ok(())
}

const TW_TERMS: [&str; 4] = ["total", "heatmap", "coord", "reg"];
const PG_TERMS: [&str; 3] = ["total", "pose", "edge"];

fn train_tw(cfg: &TrainConfig, data: &Dataset, train_idx: &[usize], val_idx: &[usize]) -> Result<TrainOutcome> {
    let started = Instant::now();
    let (mut params, model) = runner::build_tw(&cfg.model, cfg.seed)?;
    let joint_indices = cfg.model.supervised_joints()?;
    let trainable = params.trainable_ids();
    let weight_ids = params.weight_ids("tw.");

    // Targets are reused every epoch; build them once.
    let targets: Result<Vec<(Tensor, Tensor)>> =
        data.samples.iter().map(|s| tw_targets(&cfg.model, &joint_indices, &s.joints25d)).collect();
    let targets = targets?;

    let mut metrics_file = open_metrics(cfg)?;
    let mut adam = Adam::new(&params, trainable.clone());

    let pass = |params: &ParamSet, i: usize, with_grads: bool| -> Result<SamplePass> {
        let mut tape = Tape::new();
        let vars = params.bind_all(&mut tape);
        let img = tape.constant(&data.samples[i].image);
        let out = model.forward(&mut tape, &vars, img)?;
        let t2d = tape.constant(&targets[i].0);
        let tj = tape.constant(&targets[i].1);
        let weights: Vec<_> = weight_ids.iter().map(|id| vars[id.index()]).collect();
        let loss = tw::loss_tw(&mut tape, out.pred2d, out.joints, t2d, tj, &weights)?;
        let values = vec![
            tape.value(loss.total)[0],
            tape.value(loss.heatmap)[0],
            tape.value(loss.coord)[0],
            tape.value(loss.reg)[0],
        ];
        if !values[0].is_finite() {
            return Err(Error::NonFinite(format!("training loss on sample {i}")));
        }
        let grads = if with_grads {
            tape.backward(loss.total)?;
            collect_grads(&tape, &vars, params, &trainable)
        } else {
            Vec::new()
        };
        Ok((values, grads))
    };

    let validate = |params: &ParamSet| -> Result<(f64, Option<f64>)> {
        let preds: Result<Vec<Tensor>> =
            val_idx.par_iter().map(|&i| runner::predict_tw(params, &model, &data.samples[i].image).map(|(j, _)| j)).collect();
        let tgts: Vec<Tensor> = val_idx.iter().map(|&i| targets[i].1.clone()).collect();
        val_errors(&cfg.model, &preds?, &tgts)
    };

    // Pre-training loss over the train split, for the learning endpoint.
    let (initial_terms, _) = batch_pass(train_idx, false, |i, g| pass(&params, i, g))?;
    {
        let (vm, vp) = validate(&params)?;
        let log = EpochLog { terms: initial_terms.clone(), lr: 0.0, val_mpjpe: vm, val_pa: vp, wall_ms: started.elapsed().as_millis() };
        write_metrics_line(&mut metrics_file, Phase::Tw, None, &TW_TERMS, &log)?;
    }

    let mut final_terms = initial_terms.clone();
    let mut last_val = (f64::NAN, None);
    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let lr = lr_schedule(cfg, epoch);
        let order = shuffled(train_idx, cfg.seed, epoch);
        let mut sums = vec![0.0; TW_TERMS.len()];
        for chunk in order.chunks(cfg.batch_size) {
            let (terms, grads) = batch_pass(chunk, true, |i, g| pass(&params, i, g))?;
            adam.step(&mut params, &grads, lr)?;
            for (s, t) in sums.iter_mut().zip(&terms) {
                *s += t * chunk.len() as f64;
            }
        }
        for s in &mut sums {
            *s /= order.len() as f64;
        }
        last_val = validate(&params)?;
        final_terms = sums.clone();
        let log = EpochLog {
            terms: sums,
            lr,
            val_mpjpe: last_val.0,
            val_pa: last_val.1,
            wall_ms: epoch_start.elapsed().as_millis(),
        };
        write_metrics_line(&mut metrics_file, Phase::Tw, Some(epoch), &TW_TERMS, &log)?;
    }

    save_checkpoint(cfg, &params, Stage::Tw, None)?;
    Ok(TrainOutcome {
        term_names: TW_TERMS.to_vec(),
        initial_terms,
        final_terms,
        val_mpjpe: last_val.0,
        val_pa_mpjpe: last_val.1,
        tw_hash_hex: None,
        checkpoint: cfg.checkpoint_out.clone(),
        wall_ms: started.elapsed().as_millis(),
    })
}

fn train_pg(cfg: &TrainConfig, data: &Dataset, train_idx: &[usize], val_idx: &[usize]) -> Result<TrainOutcome> {
    let started = Instant::now();
    let tw_path = cfg.tw_checkpoint.as_ref().expect("validated");
    let ckpt = checkpoint::load(tw_path)?;
    if ckpt.stage != Stage::Tw {
        return Err(Error::format(
            tw_path,
            format!("expected a first-stage checkpoint, found stage {}", ckpt.stage.describe()),
        ));
    }

    let mut params = ParamSet::new();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let tw_model = TwModel::register(&mut params, &cfg.model, &mut rng)?;
    checkpoint::apply(&mut params, &ckpt, tw_path)?;
    let frozen = params.set_frozen_by_prefix("tw.", true);
    if frozen == 0 {
        return Err(Error::format(tw_path, "checkpoint froze no first-stage parameters".to_string()));
    }
    let tw_hash = params.content_hash("tw.");

    let supervised = cfg.model.supervised_joints()?;
    let mean = mean_pose(&cfg.model, data, train_idx, &supervised)?;
    let pg_model = PgModel::register(&mut params, &cfg.model, Some(&mean), &mut rng)?;
    let trainable = params.trainable_ids();

    // The frozen stage never changes, so its outputs are computed once.
    let cached: Result<Vec<(Tensor, Tensor)>> =
        data.samples.par_iter().map(|s| runner::predict_tw(&params, &tw_model, &s.image)).collect();
    let cached = cached?;
    let targets: Result<Vec<Tensor>> = data.samples.iter().map(|s| pg_target(&cfg.model, &s.joints25d)).collect();
    let targets = targets?;

    let mut metrics_file = open_metrics(cfg)?;
    let mut adam = Adam::new(&params, trainable.clone());

    let pass = |params: &ParamSet, i: usize, with_grads: bool| -> Result<SamplePass> {
        let mut tape = Tape::new();
        let vars = params.bind_all(&mut tape);
        let joints = tape.constant(&cached[i].0);
        let featmap = tape.constant(&cached[i].1);
        let out = pg_model.forward(&mut tape, &vars, joints, featmap)?;
        let target = tape.constant(&targets[i]);
        let loss = pg::loss_pg(&mut tape, out.coords, target, &out.alphas)?;
        let values = vec![tape.value(loss.total)[0], tape.value(loss.pose)[0], tape.value(loss.edge)[0]];
        if !values[0].is_finite() {
            return Err(Error::NonFinite(format!("training loss on sample {i}")));
        }
        let grads = if with_grads {
            tape.backward(loss.total)?;
            collect_grads(&tape, &vars, params, &trainable)
        } else {
            Vec::new()
        };
        Ok((values, grads))
    };

    let predict = |params: &ParamSet, i: usize| -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = params.bind_all(&mut tape);
        let joints = tape.constant(&cached[i].0);
        let featmap = tape.constant(&cached[i].1);
        let out = pg_model.forward(&mut tape, &vars, joints, featmap)?;
        Tensor::new(tape.shape(out.coords).to_vec(), tape.value(out.coords).to_vec())
    };
    let validate = |params: &ParamSet| -> Result<(f64, Option<f64>)> {
        let preds: Result<Vec<Tensor>> = val_idx.par_iter().map(|&i| predict(params, i)).collect();
        let tgts: Vec<Tensor> = val_idx.iter().map(|&i| targets[i].clone()).collect();
        val_errors(&cfg.model, &preds?, &tgts)
    };

    let (initial_terms, _) = batch_pass(train_idx, false, |i, g| pass(&params, i, g))?;
    {
        let (vm, vp) = validate(&params)?;
        let log = EpochLog { terms: initial_terms.clone(), lr: 0.0, val_mpjpe: vm, val_pa: vp, wall_ms: started.elapsed().as_millis() };
        write_metrics_line(&mut metrics_file, Phase::Pg, None, &PG_TERMS, &log)?;
    }

    let mut final_terms = initial_terms.clone();
    let mut last_val = (f64::NAN, None);
    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let lr = lr_schedule(cfg, epoch);
        let order = shuffled(train_idx, cfg.seed, epoch);
        let mut sums = vec![0.0; PG_TERMS.len()];
        for chunk in order.chunks(cfg.batch_size) {
            let (terms, grads) = batch_pass(chunk, true, |i, g| pass(&params, i, g))?;
            adam.step(&mut params, &grads, lr)?;
            for (s, t) in sums.iter_mut().zip(&terms) {
                *s += t * chunk.len() as f64;
            }
        }
        for s in &mut sums {
            *s /= order.len() as f64;
        }
        last_val = validate(&params)?;
        final_terms = sums.clone();
        let log = EpochLog {
            terms: sums,
            lr,
            val_mpjpe: last_val.0,
            val_pa: last_val.1,
            wall_ms: epoch_start.elapsed().as_millis(),
        };
        write_metrics_line(&mut metrics_file, Phase::Pg, Some(epoch), &PG_TERMS, &log)?;
    }

    let tw_hash_after = params.content_hash("tw.");
    if tw_hash_after != tw_hash {
        return Err(Error::NonFinite(
            "frozen first-stage parameters changed during phase 2 (freeze contract violated)".to_string(),
        ));
    }
    save_checkpoint(cfg, &params, Stage::Full, Some(&tw_hash))?;
    Ok(TrainOutcome {
        term_names: PG_TERMS.to_vec(),
        initial_terms,
        final_terms,
        val_mpjpe: last_val.0,
        val_pa_mpjpe: last_val.1,
        tw_hash_hex: Some(hex::encode(tw_hash)),
        checkpoint: cfg.checkpoint_out.clone(),
        wall_ms: started.elapsed().as_millis(),
    })
}

/// Stage-ablation mode: the whole network, first stage included, trains
/// end-to-end under the second-stage loss alone (no heatmap supervision, no
/// freezing).
fn train_pg_scratch(cfg: &TrainConfig, data: &Dataset, train_idx: &[usize], val_idx: &[usize]) -> Result<TrainOutcome> {
    let started = Instant::now();
    let supervised = cfg.model.supervised_joints()?;
    let mean = mean_pose(&cfg.model, data, train_idx, &supervised)?;
    let (mut params, tw_model, pg_model) = runner::build_full(&cfg.model, cfg.seed, Some(&mean))?;
    let trainable = params.trainable_ids();
    let targets: Result<Vec<Tensor>> = data.samples.iter().map(|s| pg_target(&cfg.model, &s.joints25d)).collect();
    let targets = targets?;

    let mut metrics_file = open_metrics(cfg)?;
    let mut adam = Adam::new(&params, trainable.clone());

    let pass = |params: &ParamSet, i: usize, with_grads: bool| -> Result<SamplePass> {
        let mut tape = Tape::new();
        let vars = params.bind_all(&mut tape);
        let img = tape.constant(&data.samples[i].image);
        let tw_out = tw_model.forward(&mut tape, &vars, img)?;
        let out = pg_model.forward(&mut tape, &vars, tw_out.joints, tw_out.featmap)?;
        let target = tape.constant(&targets[i]);
        let loss = pg::loss_pg(&mut tape, out.coords, target, &out.alphas)?;
        let values = vec![tape.value(loss.total)[0], tape.value(loss.pose)[0], tape.value(loss.edge)[0]];
        if !values[0].is_finite() {
            return Err(Error::NonFinite(format!("training loss on sample {i}")));
        }
        let grads = if with_grads {
            tape.backward(loss.total)?;
            collect_grads(&tape, &vars, params, &trainable)
        } else {
            Vec::new()
        };
        Ok((values, grads))
    };

    let validate = |params: &ParamSet| -> Result<(f64, Option<f64>)> {
        let preds: Result<Vec<Tensor>> = val_idx
            .par_iter()
            .map(|&i| runner::predict_full(params, &tw_model, &pg_model, &data.samples[i].image))
            .collect();
        let tgts: Vec<Tensor> = val_idx.iter().map(|&i| targets[i].clone()).collect();
        val_errors(&cfg.model, &preds?, &tgts)
    };

    let (initial_terms, _) = batch_pass(train_idx, false, |i, g| pass(&params, i, g))?;
    {
        let (vm, vp) = validate(&params)?;
        let log = EpochLog { terms: initial_terms.clone(), lr: 0.0, val_mpjpe: vm, val_pa: vp, wall_ms: started.elapsed().as_millis() };
        write_metrics_line(&mut metrics_file, Phase::Pg, None, &PG_TERMS, &log)?;
    }

    let mut final_terms = initial_terms.clone();
    let mut last_val = (f64::NAN, None);
    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let lr = lr_schedule(cfg, epoch);
        let order = shuffled(train_idx, cfg.seed, epoch);
        let mut sums = vec![0.0; PG_TERMS.len()];
        for chunk in order.chunks(cfg.batch_size) {
            let (terms, grads) = batch_pass(chunk, true, |i, g| pass(&params, i, g))?;
            adam.step(&mut params, &grads, lr)?;
            for (s, t) in sums.iter_mut().zip(&terms) {
                *s += t * chunk.len() as f64;
            }
        }
        for s in &mut sums {
            *s /= order.len() as f64;
        }
        last_val = validate(&params)?;
        final_terms = sums.clone();
        let log = EpochLog {
            terms: sums,
            lr,
            val_mpjpe: last_val.0,
            val_pa: last_val.1,
            wall_ms: epoch_start.elapsed().as_millis(),
        };
        write_metrics_line(&mut metrics_file, Phase::Pg, Some(epoch), &PG_TERMS, &log)?;
    }

    save_checkpoint(cfg, &params, Stage::Full, None)?;
    Ok(TrainOutcome {
        term_names: PG_TERMS.to_vec(),
        initial_terms,
        final_terms,
        val_mpjpe: last_val.0,
        val_pa_mpjpe: last_val.1,
        tw_hash_hex: None,
        checkpoint: cfg.checkpoint_out.clone(),
        wall_ms: started.elapsed().as_millis(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ehpe_core::params::ParamKind;
    use ehpe_handsim::{generate_dataset, GenParams};
    use tempfile::TempDir;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            image_size: 32,
            heatmap_div: 4,
            feature_div: 16,
            depth: 4,
            backbone_channels: vec![4, 8],
            decoder_width: 8,
            refine_width: 8,
            refine_blocks: 2,
            refine_pools: 1,
            spi_width: 8,
            gat_heads: 2,
            fem_width: 8,
            ..ModelConfig::default()
        }
    }

    fn tiny_dataset(dir: &TempDir, n: u64, seed: u64) -> PathBuf {
        let path = dir.path().join("data.bin");
        let mut params = GenParams::default();
        params.camera.image = (32, 32);
        params.camera.center = (16.0, 16.0);
        params.camera.scale = 5.5;
        params.camera.depth_res = 4;
        generate_dataset(&path, n, seed, &params).unwrap();
        path
    }

    fn tiny_config(dir: &TempDir, phase: Phase) -> TrainConfig {
        let mut cfg = if phase == Phase::Pg { TrainConfig::default_pg() } else { TrainConfig::default() };
        cfg.epochs = 2;
        cfg.batch_size = 8;
        cfg.seed = 11;
        cfg.dataset = tiny_dataset(dir, 40, 5);
        cfg.checkpoint_out = dir.path().join(format!("{phase:?}.ckpt"));
        cfg.metrics_out = Some(dir.path().join(format!("{phase:?}.jsonl")));
        cfg.model = tiny_model();
        cfg
    }

    #[test]
    fn adam_first_step_moves_against_gradient_sign() {
        let mut params = ParamSet::new();
        let id = params.register("p", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap(), ParamKind::Weight).unwrap();
        let mut adam = Adam::new(&params, vec![id]);
        adam.step(&mut params, &[vec![4.0, -0.5]], 0.1).unwrap();
        let got = params.tensor(id).data();
        // Bias-corrected first step is -lr * g / (|g| + eps) = -lr * sign(g).
        assert!((got[0] - 0.9).abs() < 1e-6);
        assert!((got[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters_but_advances_steps() {
        let mut params = ParamSet::new();
        let id = params.register("p", Tensor::new(vec![1], vec![0.75]).unwrap(), ParamKind::Weight).unwrap();
        let mut adam = Adam::new(&params, vec![id]);
        adam.step(&mut params, &[vec![0.0]], 0.1).unwrap();
        assert_eq!(params.tensor(id).data()[0], 0.75);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn adam_matches_scalar_oracle_on_quadratic() {
        // Minimize f(x) = x^2 from x = 1 with lr 0.1; gradient is 2x.
        let mut params = ParamSet::new();
        let id = params.register("x", Tensor::new(vec![1], vec![1.0]).unwrap(), ParamKind::Weight).unwrap();
        let mut adam = Adam::new(&params, vec![id]);

        let (mut xo, mut mo, mut vo) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=5 {
            let x = params.tensor(id).data()[0];
            adam.step(&mut params, &[vec![2.0 * x]], 0.1).unwrap();

            let g = 2.0 * xo;
            mo = ADAM_BETA1 * mo + (1.0 - ADAM_BETA1) * g;
            vo = ADAM_BETA2 * vo + (1.0 - ADAM_BETA2) * g * g;
            let mh = mo / (1.0 - ADAM_BETA1.powi(t));
            let vh = vo / (1.0 - ADAM_BETA2.powi(t));
            xo -= 0.1 * mh / (vh.sqrt() + ADAM_EPS);
            assert!((params.tensor(id).data()[0] - xo).abs() < 1e-12, "step {t}");
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradients_by_name() {
        let mut params = ParamSet::new();
        let id = params.register("layer.weight", Tensor::zeros(&[2]), ParamKind::Weight).unwrap();
        let mut adam = Adam::new(&params, vec![id]);
        let err = adam.step(&mut params, &[vec![1.0, f64::NAN]], 0.1).unwrap_err();
        match err {
            Error::NonFinite(msg) => assert!(msg.contains("layer.weight"), "{msg}"),
            other => panic!("expected NonFinite, got {other}"),
        }
    }

    #[test]
    fn lr_schedule_applies_milestone_decay() {
        let cfg = TrainConfig {
            lr_initial: 1e-3,
            lr_milestones: vec![15, 20],
            lr_decay: 0.1,
            ..TrainConfig::default()
        };
        assert_eq!(lr_schedule(&cfg, 0), 1e-3);
        assert_eq!(lr_schedule(&cfg, 14), 1e-3);
        assert!((lr_schedule(&cfg, 15) - 1e-4).abs() < 1e-18);
        assert!((lr_schedule(&cfg, 17) - 1e-4).abs() < 1e-18);
        assert!((lr_schedule(&cfg, 21) - 1e-5).abs() < 1e-19);
    }

    #[test]
    fn config_validation_rejects_bad_runs() {
        let dir = TempDir::new().unwrap();
        let mut cfg = tiny_config(&dir, Phase::Tw);
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = tiny_config(&dir, Phase::Pg);
        cfg.tw_checkpoint = None;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("tw-checkpoint") || err.to_string().contains("tw_checkpoint"));

        let mut cfg = tiny_config(&dir, Phase::Tw);
        cfg.lr_milestones = vec![5, 5];
        assert!(cfg.validate().is_err());

        // Unknown keys in a config document are errors.
        let parsed: std::result::Result<TrainConfig, _> =
            serde_json::from_str("{\"phase\":\"tw\",\"warmup\":3}");
        assert!(parsed.is_err());
    }

    #[test]
    fn tw_targets_scale_pixels_to_heatmap_cells() {
        let cfg = tiny_model();
        let mut joints = vec![0.0; 63];
        joints[4 * 3] = 16.0; // thumb tip x in pixels
        joints[4 * 3 + 1] = 8.0;
        joints[4 * 3 + 2] = 2.5;
        let t = Tensor::new(vec![21, 3], joints).unwrap();
        let (maps, coords) = tw_targets(&cfg, &[0, 4], &t).unwrap();
        assert_eq!(maps.shape(), &[2, 8, 8]);
        // coord_scale = 32 / 8 = 4: pixel 16 -> cell 4.
        assert_eq!(coords.at(&[1, 0]), 4.0);
        assert_eq!(coords.at(&[1, 1]), 2.0);
        assert_eq!(coords.at(&[1, 2]), 2.5);
        // Heatmap peak sits at the scaled center.
        let peak = maps.at(&[1, 2, 4]);
        assert!(peak > maps.at(&[1, 2, 3]) && peak > maps.at(&[1, 3, 4]));
    }

    #[test]
    fn tw_training_is_deterministic_and_writes_stage_tagged_checkpoint() {
        let dir = TempDir::new().unwrap();
        let cfg = tiny_config(&dir, Phase::Tw);
        let out1 = train(&cfg).unwrap();
        let bytes1 = fs::read(&cfg.checkpoint_out).unwrap();
        let log1 = fs::read_to_string(cfg.metrics_out.as_ref().unwrap()).unwrap();

        let out2 = train(&cfg).unwrap();
        let bytes2 = fs::read(&cfg.checkpoint_out).unwrap();
        let log2 = fs::read_to_string(cfg.metrics_out.as_ref().unwrap()).unwrap();

        assert_eq!(bytes1, bytes2, "reruns must produce byte-identical checkpoints");
        assert_eq!(out1.final_terms, out2.final_terms);
        assert_eq!(strip_wall(&log1), strip_wall(&log2), "metrics logs identical up to wall time");

        let ckpt = checkpoint::load(&cfg.checkpoint_out).unwrap();
        assert_eq!(ckpt.stage, Stage::Tw);
        assert!(out1.final_terms[0].is_finite());
        // 3 epochs of records (init + 2) in the log.
        assert_eq!(log1.lines().count(), 3);
    }

    fn strip_wall(log: &str) -> Vec<serde_json::Value> {
        log.lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wall_ms");
                v
            })
            .collect()
    }

    #[test]
    fn pg_training_freezes_first_stage_and_is_reproducible() {
        let dir = TempDir::new().unwrap();
        let tw_cfg = tiny_config(&dir, Phase::Tw);
        train(&tw_cfg).unwrap();

        let mut pg_cfg = tiny_config(&dir, Phase::Pg);
        pg_cfg.dataset = tw_cfg.dataset.clone();
        pg_cfg.tw_checkpoint = Some(tw_cfg.checkpoint_out.clone());
        let out1 = train(&pg_cfg).unwrap();
        let bytes1 = fs::read(&pg_cfg.checkpoint_out).unwrap();
        let out2 = train(&pg_cfg).unwrap();
        let bytes2 = fs::read(&pg_cfg.checkpoint_out).unwrap();
        assert_eq!(bytes1, bytes2);
        assert!(out1.tw_hash_hex.is_some());
        assert_eq!(out1.tw_hash_hex, out2.tw_hash_hex);

        // The full checkpoint carries the frozen first stage verbatim.
        let full = checkpoint::load(&pg_cfg.checkpoint_out).unwrap();
        assert_eq!(full.stage, Stage::Full);
        let tw_ckpt = checkpoint::load(&tw_cfg.checkpoint_out).unwrap();
        for (name, tensor, _) in &tw_ckpt.entries {
            let (_, full_tensor, frozen) =
                full.entries.iter().find(|(n, _, _)| n == name).expect("tw entry present");
            assert_eq!(full_tensor.data(), tensor.data(), "{name} changed during phase 2");
            assert!(*frozen, "{name} not marked frozen");
        }
        assert_eq!(full.ref_hash.as_deref().map(hex::encode), out1.tw_hash_hex);

        // Second-stage parameters did train.
        let changed = full
            .entries
            .iter()
            .filter(|(n, _, _)| n.starts_with("pg."))
            .count();
        assert!(changed > 0);
    }

    #[test]
    fn pg_requires_a_first_stage_checkpoint_file() {
        let dir = TempDir::new().unwrap();
        let mut pg_cfg = tiny_config(&dir, Phase::Pg);
        pg_cfg.tw_checkpoint = Some(dir.path().join("missing.ckpt"));
        assert!(train(&pg_cfg).is_err());
    }

    #[test]
    fn from_scratch_mode_trains_both_stages_under_pose_loss() {
        let dir = TempDir::new().unwrap();
        let mut cfg = tiny_config(&dir, Phase::Pg);
        cfg.pg_from_scratch = true;
        cfg.tw_checkpoint = None;
        cfg.epochs = 1;
        let out = train(&cfg).unwrap();
        assert_eq!(out.term_names, PG_TERMS.to_vec());
        let ckpt = checkpoint::load(&cfg.checkpoint_out).unwrap();
        assert_eq!(ckpt.stage, Stage::Full);
        assert!(ckpt.entries.iter().all(|(_, _, frozen)| !frozen));
    }

    #[test]
    fn exploding_learning_rate_aborts_with_numeric_error() {
        let dir = TempDir::new().unwrap();
        let mut cfg = tiny_config(&dir, Phase::Tw);
        cfg.lr_initial = 1e30;
        cfg.epochs = 3;
        match train(&cfg) {
            Err(Error::NonFinite(msg)) => {
                assert!(!msg.is_empty());
            }
            Err(other) => panic!("expected a numeric failure, got {other}"),
            Ok(_) => panic!("training should not survive lr = 1e30"),
        }
    }

    #[test]
    fn mean_pose_matches_direct_average() {
        let dir = TempDir::new().unwrap();
        let cfg = tiny_config(&dir, Phase::Tw);
        let data = read_dataset(&cfg.dataset).unwrap();
        let train_idx = data.split_indices(Split::Train);
        let supervised = cfg.model.supervised_joints().unwrap();
        let mean = mean_pose(&cfg.model, &data, &train_idx, &supervised).unwrap();
        assert_eq!(mean.shape(), &[15, 3]);

        // Joint 1 (index MCP) is the first embedded joint; average its
        // target x by hand.
        let want: f64 = train_idx
            .iter()
            .map(|&i| data.samples[i].joints25d.at(&[1, 0]) / cfg.model.coord_scale())
            .sum::<f64>()
            / train_idx.len() as f64;
        assert!((mean.at(&[0, 0]) - want).abs() < 1e-12);
    }
}
