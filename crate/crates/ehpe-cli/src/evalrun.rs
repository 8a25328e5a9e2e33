//! Checkpoint evaluation: predictions and targets are converted to synthetic
//! world units through the fixed generator camera, then scored with the full
//! metric battery.
//!
//! A first-stage checkpoint predicts only its supervised joints, so it can
//! only be scored under [`JointScope::Supervised`] (unless every joint is
//! supervised); asking for the full report names the fix in the error.

use std::path::PathBuf;

use rayon::prelude::*;

use ehpe_core::checkpoint::{self, Stage};
use ehpe_core::config::ModelConfig;
use ehpe_core::metrics::{self, EvalReport};
use ehpe_core::params::ParamSet;
use ehpe_core::pg::PgModel;
use ehpe_core::skeleton::{category_of, NUM_JOINTS};
use ehpe_core::tw::TwModel;
use ehpe_core::{Error, Result, Tensor};
use ehpe_handsim::{read_dataset, Dataset, Split};

use crate::runner;

/// Which joints the report covers.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum JointScope {
    /// All 21 joints; needs a model that predicts all of them.
    Full,
    /// Only the first stage's supervised joints.
    Supervised,
}

/// One evaluation run, as driven from the command line.
pub struct EvalRequest {
    /// Optional only in oracle mode.
    pub checkpoint: Option<PathBuf>,
    pub dataset: PathBuf,
    pub model: ModelConfig,
    pub split: Split,
    pub scope: JointScope,
    /// Score ground truth against itself (errors must be exactly zero) —
    /// a pipeline self-check that needs no checkpoint.
    pub oracle: bool,
    pub thresholds: Vec<f64>,
}

fn gather_joint_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let mut out = Vec::with_capacity(rows.len() * 3);
    for &r in rows {
        for c in 0..3 {
            out.push(t.at(&[r, c]));
        }
    }
    Tensor::new(vec![rows.len(), 3], out)
}

/// Scores `pred`/`gt` pairs (world units, `[J, 3]` each) where `joint_ids`
/// names the original skeleton index of each row.
fn score(preds: &[Tensor], gts: &[Tensor], joint_ids: &[usize], thresholds: &[f64]) -> Result<EvalReport> {
    let pred = metrics::stack_poses(preds)?;
    let gt = metrics::stack_poses(gts)?;
    if joint_ids.len() == NUM_JOINTS {
        return metrics::evaluate(&pred, &gt, thresholds);
    }
    let m = metrics::mpjpe(&pred, &gt)?;
    let (pa, excluded) = metrics::pa_mpjpe(&pred, &gt)?;
    let cats: Vec<_> = joint_ids.iter().map(|&j| category_of(j)).collect();
    let (per, rel) = metrics::category_breakdown(&pred, &gt, &cats)?;
    let (fractions, auc) = metrics::pck_curve(&pred, &gt, thresholds)?;
    Ok(EvalReport {
        n_samples: preds.len(),
        mpjpe: m,
        pa_mpjpe: pa,
        excluded_degenerate: excluded,
        per_category: per,
        relative_per_category: rel,
        pck_thresholds: thresholds.to_vec(),
        pck_fractions: fractions,
        pck_auc: auc,
    })
}

fn scope_rows(cfg: &ModelConfig, scope: JointScope) -> Result<Vec<usize>> {
    let rows = match scope {
        JointScope::Full => (0..NUM_JOINTS).collect::<Vec<_>>(),
        JointScope::Supervised => cfg.supervised_joints()?,
    };
    if rows.len() < 3 {
        return Err(Error::config(format!(
            "evaluation needs at least 3 joints for alignment, the supervised set has {}",
            rows.len()
        )));
    }
    Ok(rows)
}

/// Evaluates an in-memory model (no checkpoint round trip) over the given
/// sample indices.  With `pg` absent the first stage's soft-argmax output is
/// scored directly, which restricts the scope to the supervised joints.
pub fn evaluate_model(
    params: &ParamSet,
    tw: &TwModel,
    pg: Option<&PgModel>,
    cfg: &ModelConfig,
    data: &Dataset,
    indices: &[usize],
    scope: JointScope,
    thresholds: &[f64],
) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(Error::Degenerate("no samples in the requested split".to_string()));
    }
    let rows = scope_rows(cfg, scope)?;
    let supervised = cfg.supervised_joints()?;
    if pg.is_none() && rows != supervised {
        return Err(Error::config(format!(
            "this model predicts only its {} supervised joints; evaluate with --joints supervised or provide a full checkpoint",
            supervised.len()
        )));
    }

    let preds: Result<Vec<Tensor>> = indices
        .par_iter()
        .map(|&i| {
            let model_coords = match pg {
                Some(pg) => runner::predict_full(params, tw, pg, &data.samples[i].image)?,
                // Rows of a first-stage prediction already follow the sorted
                // supervised-joint order, which equals `rows` here.
                None => runner::predict_tw(params, tw, &data.samples[i].image)?.0,
            };
            let world = runner::model_coords_to_world(&model_coords, cfg.coord_scale())?;
            if pg.is_some() && rows.len() != NUM_JOINTS {
                gather_joint_rows(&world, &rows)
            } else {
                Ok(world)
            }
        })
        .collect();
    let gts = ground_truth(data, indices, &rows)?;
    score(&preds?, &gts, &rows, thresholds)
}

fn ground_truth(data: &Dataset, indices: &[usize], rows: &[usize]) -> Result<Vec<Tensor>> {
    indices
        .iter()
        .map(|&i| {
            let world = runner::dataset_coords_to_world(&data.samples[i].joints25d)?;
            if rows.len() == NUM_JOINTS {
                Ok(world)
            } else {
                gather_joint_rows(&world, rows)
            }
        })
        .collect()
}

/// Loads the checkpoint (when not in oracle mode), rebuilds the matching
/// model, and scores the requested split.
pub fn run_eval(req: &EvalRequest) -> Result<EvalReport> {
    req.model.validate()?;
    let data = read_dataset(&req.dataset)?;
    let indices = data.split_indices(req.split);
    if indices.is_empty() {
        return Err(Error::Degenerate(format!("dataset has no samples in the {:?} split", req.split)));
    }

    if req.oracle {
        let rows = scope_rows(&req.model, req.scope)?;
        let gts = ground_truth(&data, &indices, &rows)?;
        return score(&gts.clone(), &gts, &rows, &req.thresholds);
    }

    let path = req
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::config("eval requires --checkpoint unless --oracle is set".to_string()))?;
    let ckpt = checkpoint::load(path)?;
    match ckpt.stage {
        Stage::Tw => {
            let supervised = req.model.supervised_joints()?;
            if req.scope == JointScope::Full && supervised.len() != NUM_JOINTS {
                return Err(Error::config(format!(
                    "checkpoint '{}' holds only the first stage, which predicts {} supervised joints, not all {}; \
                     evaluate with --joints supervised or provide a full checkpoint",
                    path.display(),
                    supervised.len(),
                    NUM_JOINTS
                )));
            }
            let (mut params, tw) = runner::build_tw(&req.model, 0)?;
            checkpoint::apply(&mut params, &ckpt, path)?;
            evaluate_model(&params, &tw, None, &req.model, &data, &indices, JointScope::Supervised, &req.thresholds)
        }
        Stage::Full => {
            let (mut params, tw, pg) = runner::build_full_for_load(&req.model, 0)?;
            checkpoint::apply(&mut params, &ckpt, path)?;
            evaluate_model(&params, &tw, Some(&pg), &req.model, &data, &indices, req.scope, &req.thresholds)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ehpe_core::metrics::default_thresholds;
    use ehpe_handsim::{generate_dataset, GenParams};
    use tempfile::TempDir;

    fn small_dataset(dir: &TempDir) -> PathBuf {
        let path = dir.path().join("data.bin");
        generate_dataset(&path, 40, 3, &GenParams::default()).unwrap();
        path
    }

    #[test]
    fn oracle_mode_scores_ground_truth_at_zero_error() {
        let dir = TempDir::new().unwrap();
        let req = EvalRequest {
            checkpoint: None,
            dataset: small_dataset(&dir),
            model: ModelConfig::default(),
            split: Split::Test,
            scope: JointScope::Full,
            oracle: true,
            thresholds: default_thresholds(),
        };
        let report = run_eval(&req).unwrap();
        assert_eq!(report.mpjpe, 0.0);
        // Alignment of a pose with itself recovers the identity only up to
        // SVD round-off.
        assert!(report.pa_mpjpe < 1e-9, "{}", report.pa_mpjpe);
        assert_eq!(report.pck_auc, 1.0);
        assert!(report.n_samples > 0);
    }

    #[test]
    fn eval_without_checkpoint_or_oracle_is_a_usage_error() {
        let dir = TempDir::new().unwrap();
        let req = EvalRequest {
            checkpoint: None,
            dataset: small_dataset(&dir),
            model: ModelConfig::default(),
            split: Split::Test,
            scope: JointScope::Full,
            oracle: false,
            thresholds: default_thresholds(),
        };
        let err = run_eval(&req).unwrap_err();
        assert!(err.to_string().contains("--checkpoint"));
    }

    #[test]
    fn first_stage_checkpoint_rejects_full_scope_with_guidance() {
        let dir = TempDir::new().unwrap();
        let dataset = small_dataset(&dir);
        let cfg = ModelConfig::default();
        let (params, _) = runner::build_tw(&cfg, 4).unwrap();
        let ckpt_path = dir.path().join("tw.ckpt");
        ehpe_core::checkpoint::save(&ckpt_path, &params, "", Stage::Tw, None).unwrap();

        let mut req = EvalRequest {
            checkpoint: Some(ckpt_path),
            dataset,
            model: cfg,
            split: Split::Test,
            scope: JointScope::Full,
            oracle: false,
            thresholds: default_thresholds(),
        };
        let err = run_eval(&req).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("first stage") && msg.contains("supervised"), "{msg}");

        // The supervised scope works on the same checkpoint.
        req.scope = JointScope::Supervised;
        let report = run_eval(&req).unwrap();
        let expected = read_dataset(&req.dataset).unwrap().split_indices(Split::Test).len();
        assert_eq!(report.n_samples, expected);
        assert!(report.mpjpe.is_finite());
    }

    #[test]
    fn full_checkpoint_supports_both_scopes() {
        let dir = TempDir::new().unwrap();
        let dataset = small_dataset(&dir);
        let cfg = ModelConfig::default();
        let n_embedded = NUM_JOINTS - cfg.supervised_joints().unwrap().len();
        let mean = Tensor::zeros(&[n_embedded, 3]);
        let (params, _, _) = runner::build_full(&cfg, 9, Some(&mean)).unwrap();
        let ckpt_path = dir.path().join("full.ckpt");
        ehpe_core::checkpoint::save(&ckpt_path, &params, "", Stage::Full, None).unwrap();

        for scope in [JointScope::Full, JointScope::Supervised] {
            let req = EvalRequest {
                checkpoint: Some(ckpt_path.clone()),
                dataset: dataset.clone(),
                model: cfg.clone(),
                split: Split::Val,
                scope,
                oracle: false,
                thresholds: default_thresholds(),
            };
            let report = run_eval(&req).unwrap();
            assert!(report.mpjpe.is_finite() && report.mpjpe > 0.0);
        }
    }

    #[test]
    fn subset_reports_zero_out_missing_categories() {
        // Identical pred/gt over a wrist+tips subset: tip error 0 means the
        // ratio columns are all zero, and absent categories stay zero.
        let joint_ids = [0usize, 4, 8, 12, 16, 20];
        let base = [
            [0.0, 0.0, 0.0],
            [1.0, 0.2, 0.0],
            [0.3, 1.0, 0.1],
            [0.0, 0.4, 1.0],
            [1.0, 1.0, 0.3],
            [0.7, 0.1, 1.0],
        ];
        let pose: Vec<Tensor> = (0..3)
            .map(|s| {
                let vals: Vec<f64> =
                    base.iter().flat_map(|row| row.iter().map(move |&v| v + s as f64 * 0.5)).collect();
                Tensor::new(vec![6, 3], vals).unwrap()
            })
            .collect();
        let report = score(&pose.clone(), &pose, &joint_ids, &[1.0, 2.0]).unwrap();
        assert_eq!(report.mpjpe, 0.0);
        assert_eq!(report.per_category.dip, 0.0);
        assert_eq!(report.per_category.pip, 0.0);
        assert_eq!(report.per_category.mcp, 0.0);
        assert_eq!(report.pck_fractions, vec![1.0, 1.0]);
    }
}
