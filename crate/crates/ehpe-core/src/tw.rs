//! First stage: 2.5-D heatmap estimation for the wrist and fingertips.
//!
//! The stage runs a small stride-2 convolutional backbone down to a coarse
//! feature map, decodes 2-D heatmaps for the supervised joints through an
//! hourglass-style upsampling path with lateral skips, then refines the
//! concatenation of those heatmaps and the (reduced, upsampled) feature map
//! into a 2.5-D volume of `depth` discretized z-slices per joint.  Joint
//! coordinates are read out differentiably with a spatial softmax followed by
//! expectation against the cell-coordinate grid (soft-argmax), so the whole
//! stage trains end to end with a coordinate loss on top of the heatmap loss.
//!
//! Conventions used throughout:
//! - coordinates are `(x, y, z)` with `x` = column, `y` = row, `z` = depth
//!   slice, all zero-based at cell centers;
//! - `x`/`y` are in refined-heatmap cells (multiply by
//!   [`ModelConfig::coord_scale`] for pixels), `z` is the raw depth value;
//! - the refinement head emits `depth * J` channels with channel `j * depth + k`
//!   holding slice `k` of joint `j`.

use rand_chacha::ChaCha20Rng;

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{self, ParamId, ParamKind, ParamSet};
use crate::tensor::Tensor;

/// Weight of the 2-D heatmap term in the stage loss.
pub const LAMBDA_HEATMAP: f64 = 3.0;
/// Weight of the soft-argmax coordinate term.
pub const LAMBDA_COORD: f64 = 1e-2;
/// Weight of the L1 penalty on convolution/projection weights.
pub const LAMBDA_REG: f64 = 1e-2;

struct ConvIds {
    w: ParamId,
    b: ParamId,
}

fn conv_pair(
    params: &mut ParamSet,
    rng: &mut ChaCha20Rng,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
) -> Result<ConvIds> {
    let w = params.register(
        &format!("{name}.weight"),
        params::conv_init(rng, cout, cin, k, k),
        ParamKind::Weight,
    )?;
    let b = params.register(&format!("{name}.bias"), Tensor::zeros(&[cout]), ParamKind::Bias)?;
    Ok(ConvIds { w, b })
}

/// Everything the first stage produces for one image.
pub struct TwOutputs {
    /// 2-D heatmaps, `[J, hm, hm]`.
    pub pred2d: Var,
    /// Refined 2.5-D volume in readout layout `[J, h', w', depth]`.
    pub volume: Var,
    /// The same volume in public layout `[h', w', depth, J]`.
    pub heatmap25d: Var,
    /// Soft-argmax coordinates `[J, 3]` as (x, y, z).
    pub joints: Var,
    /// Backbone feature map `[C, fm, fm]` (channel-first, ready for sampling).
    pub featmap: Var,
    /// Backbone feature map in public layout `[fm, fm, C]`.
    pub featmap_hwc: Var,
}

/// Parameter handles and the size plan of the first stage.
pub struct TwModel {
    joint_indices: Vec<usize>,
    depth: usize,
    heatmap_size: usize,
    refined_size: usize,
    feature_size: usize,
    extra_pools: usize,
    refine_pools: usize,
    backbone: Vec<ConvIds>,
    reduce: ConvIds,
    levels: Vec<(usize, Option<ConvIds>, ConvIds)>, // (target size, skip projection, conv)
    head2d: ConvIds,
    feat_reduce: ConvIds,
    conv_in: ConvIds,
    blocks: Vec<[ConvIds; 2]>,
    head25d: ConvIds,
}

impl TwModel {
    /// Registers all stage parameters under the `tw.` prefix and returns the
    /// handle set.  Registration order (hence initialization) is fixed by the
    /// configuration alone.
    pub fn register(params: &mut ParamSet, cfg: &ModelConfig, rng: &mut ChaCha20Rng) -> Result<TwModel> {
        cfg.validate()?;
        let joint_indices = cfg.supervised_joints()?;
        let j = joint_indices.len();
        let hm = cfg.heatmap_size();
        let fm = cfg.feature_size();
        let extra_pools = cfg.backbone_extra_pools();

        // Backbone: stride-2 3x3 convolutions, then the extra max-pools that
        // bring the grid down to feature resolution.  Record (size, channels)
        // of every intermediate for skip lookups.
        let mut backbone = Vec::new();
        let mut acts_plan: Vec<(usize, usize)> = Vec::new();
        let mut size = cfg.image_size;
        let mut cin = cfg.image_channels;
        for (i, &cout) in cfg.backbone_channels.iter().enumerate() {
            backbone.push(conv_pair(params, rng, &format!("tw.backbone.conv{i}"), cout, cin, 3)?);
            size /= 2;
            acts_plan.push((size, cout));
            cin = cout;
        }
        for _ in 0..extra_pools {
            size /= 2;
            acts_plan.push((size, cin));
        }
        debug_assert_eq!(size, fm);
        let c = cin;

        // Decoder: reduce to decoder_width at feature resolution, then one
        // upsample level per factor-of-two back to heatmap resolution, adding
        // a projected backbone activation where one exists at that size.
        let dw = cfg.decoder_width;
        let reduce = conv_pair(params, rng, "tw.decoder.reduce", dw, c, 1)?;
        let mut levels = Vec::new();
        let mut s = fm;
        let mut li = 0;
        while s < hm {
            s *= 2;
            let skip = match acts_plan.iter().find(|&&(asz, _)| asz == s) {
                Some(&(_, ach)) => Some(conv_pair(params, rng, &format!("tw.decoder.level{li}.skip"), dw, ach, 1)?),
                None => None,
            };
            let conv = conv_pair(params, rng, &format!("tw.decoder.level{li}.conv"), dw, dw, 3)?;
            levels.push((s, skip, conv));
            li += 1;
        }
        let head2d = conv_pair(params, rng, "tw.decoder.head", j, dw, 1)?;

        // Refinement: reduced+upsampled features concatenated with the 2-D
        // heatmaps, an hourglass of residual blocks, and a 1x1 head emitting
        // depth * J channels.
        let rw = cfg.refine_width;
        let fr = (rw / 2).max(1);
        let feat_reduce = conv_pair(params, rng, "tw.refine.feat", fr, c, 1)?;
        let conv_in = conv_pair(params, rng, "tw.refine.conv_in", rw, j + fr, 3)?;
        let mut blocks = Vec::new();
        for bi in 0..cfg.refine_blocks {
            let c0 = conv_pair(params, rng, &format!("tw.refine.block{bi}.conv0"), rw, rw, 3)?;
            let c1 = conv_pair(params, rng, &format!("tw.refine.block{bi}.conv1"), rw, rw, 3)?;
            blocks.push([c0, c1]);
        }
        let head25d = conv_pair(params, rng, "tw.refine.head", cfg.depth * j, rw, 1)?;

        Ok(TwModel {
            joint_indices,
            depth: cfg.depth,
            heatmap_size: hm,
            refined_size: cfg.refined_size(),
            feature_size: fm,
            extra_pools,
            refine_pools: cfg.refine_pools,
            backbone,
            reduce,
            levels,
            head2d,
            feat_reduce,
            conv_in,
            blocks,
            head25d,
        })
    }

    /// Joint indices (into the 21-joint skeleton) this stage supervises.
    pub fn joint_indices(&self) -> &[usize] {
        &self.joint_indices
    }

    /// Number of supervised joints J.
    pub fn num_joints(&self) -> usize {
        self.joint_indices.len()
    }

    /// Side length of the refined 2.5-D volume.
    pub fn refined_size(&self) -> usize {
        self.refined_size
    }

    fn conv(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        ids: &ConvIds,
        x: Var,
        stride: usize,
        pad: usize,
        act: bool,
    ) -> Result<Var> {
        let y = tape.conv2d(x, vars[ids.w.index()], stride, pad)?;
        let cout = tape.shape(y)[0];
        let b = tape.reshape(vars[ids.b.index()], &[cout, 1, 1])?;
        let y = tape.add(y, b)?;
        Ok(if act { tape.relu(y) } else { y })
    }

    fn res_block(&self, tape: &mut Tape, vars: &[Var], ids: &[ConvIds; 2], x: Var) -> Result<Var> {
        let h = self.conv(tape, vars, &ids[0], x, 1, 1, true)?;
        let h = self.conv(tape, vars, &ids[1], h, 1, 1, false)?;
        let s = tape.add(h, x)?;
        Ok(tape.relu(s))
    }

    /// Runs the stage on one image (`[image_channels, image_size, image_size]`),
    /// with `vars` as returned by [`ParamSet::bind_all`].
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], image: Var) -> Result<TwOutputs> {
        let j = self.num_joints();

        // Backbone.
        let mut acts: Vec<(usize, Var)> = Vec::new();
        let mut x = image;
        let mut size = tape.shape(x)[1];
        for ids in &self.backbone {
            x = self.conv(tape, vars, ids, x, 2, 1, true)?;
            size /= 2;
            acts.push((size, x));
        }
        for _ in 0..self.extra_pools {
            x = tape.maxpool2d(x, 2, 2)?;
            size /= 2;
            acts.push((size, x));
        }
        if size != self.feature_size {
            return Err(Error::shape(format!(
                "backbone produced a {size}-cell feature map, expected {}",
                self.feature_size
            )));
        }
        let featmap = x;

        // Heatmap decoder.
        let mut y = self.conv(tape, vars, &self.reduce, featmap, 1, 0, true)?;
        for (target, skip, conv) in &self.levels {
            y = tape.upsample_nearest2d(y, 2)?;
            if let Some(skip_ids) = skip {
                let src = acts
                    .iter()
                    .find(|&&(asz, _)| asz == *target)
                    .expect("size plan fixed at registration")
                    .1;
                let proj = self.conv(tape, vars, skip_ids, src, 1, 0, false)?;
                y = tape.add(y, proj)?;
            }
            y = self.conv(tape, vars, conv, y, 1, 1, true)?;
        }
        let pred2d = self.conv(tape, vars, &self.head2d, y, 1, 0, false)?;

        // Refinement hourglass.
        let f = self.conv(tape, vars, &self.feat_reduce, featmap, 1, 0, true)?;
        let up_factor = self.heatmap_size / self.feature_size;
        let f = if up_factor > 1 { tape.upsample_nearest2d(f, up_factor)? } else { f };
        let mut r = tape.concat(&[pred2d, f], 0)?;
        r = self.conv(tape, vars, &self.conv_in, r, 1, 1, true)?;
        let p = self.refine_pools;
        let mut saved = Vec::new();
        for bi in 0..p {
            saved.push(r);
            r = tape.maxpool2d(r, 2, 2)?;
            r = self.res_block(tape, vars, &self.blocks[bi], r)?;
        }
        for bi in p..self.blocks.len() - p {
            r = self.res_block(tape, vars, &self.blocks[bi], r)?;
        }
        for (i, bi) in (self.blocks.len() - p..self.blocks.len()).enumerate() {
            r = tape.upsample_nearest2d(r, 2)?;
            r = tape.add(r, saved[p - 1 - i])?;
            r = self.res_block(tape, vars, &self.blocks[bi], r)?;
        }
        let mut down_to_refined = self.heatmap_size / self.refined_size;
        while down_to_refined > 1 {
            r = tape.maxpool2d(r, 2, 2)?;
            down_to_refined /= 2;
        }
        let raw = self.conv(tape, vars, &self.head25d, r, 1, 0, false)?;

        // Channel j*depth + k is slice k of joint j, so [depth*J, h, w] and
        // [J, depth, h, w] share a flat layout and this reshape is free.
        let hp = self.refined_size;
        let vol_jdhw = tape.reshape(raw, &[j, self.depth, hp, hp])?;
        let volume = tape.permute(vol_jdhw, &[0, 2, 3, 1])?;
        let heatmap25d = tape.permute(volume, &[1, 2, 3, 0])?;
        let joints = soft_argmax(tape, volume)?;
        let featmap_hwc = tape.permute(featmap, &[1, 2, 0])?;

        Ok(TwOutputs { pred2d, volume, heatmap25d, joints, featmap, featmap_hwc })
    }
}

/// Differentiable coordinate readout of a `[J, h, w, d]` volume: softmax over
/// all h*w*d cells of each joint, then expectation of the cell coordinates.
/// Returns `[J, 3]` rows of (x, y, z).
pub fn soft_argmax(tape: &mut Tape, volume: Var) -> Result<Var> {
    let shape = tape.shape(volume).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(format!("soft_argmax expects [J, h, w, d], got {shape:?}")));
    }
    let (j, h, w, d) = (shape[0], shape[1], shape[2], shape[3]);
    let v = h * w * d;
    let flat = tape.reshape(volume, &[j, v])?;
    let probs = tape.softmax(flat, 1)?;
    let mut g = vec![0.0; v * 3];
    for y in 0..h {
        for x in 0..w {
            for k in 0..d {
                let idx = ((y * w) + x) * d + k;
                g[idx * 3] = x as f64;
                g[idx * 3 + 1] = y as f64;
                g[idx * 3 + 2] = k as f64;
            }
        }
    }
    let grid = tape.constant(&Tensor::new(vec![v, 3], g)?);
    tape.matmul(probs, grid)
}

/// Normalized Gaussian heatmap target on an `h x w` grid, centered at
/// `(cx, cy)` (x = column, y = row, zero-based cell centers).  The peak of the
/// continuous density is `1 / (2 pi sigma_x sigma_y)`; cells sample the
/// density at integer coordinates.  Centers outside the grid are rejected.
pub fn gaussian_target(cx: f64, cy: f64, sigma_x: f64, sigma_y: f64, h: usize, w: usize) -> Result<Tensor> {
    if !(cx.is_finite() && cy.is_finite()) {
        return Err(Error::NonFinite("heatmap target center".to_string()));
    }
    if cx < 0.0 || cx >= w as f64 || cy < 0.0 || cy >= h as f64 {
        return Err(Error::Degenerate(format!(
            "heatmap target center ({cx}, {cy}) outside the {w}x{h} grid"
        )));
    }
    let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma_x * sigma_y);
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let e = dx * dx / (2.0 * sigma_x * sigma_x) + dy * dy / (2.0 * sigma_y * sigma_y);
            data[y * w + x] = norm * (-e).exp();
        }
    }
    Tensor::new(vec![h, w], data)
}

/// Stacked [`gaussian_target`] maps, `[J, h, w]`, one per center.
pub fn gaussian_targets(centers: &[(f64, f64)], sigma_x: f64, sigma_y: f64, h: usize, w: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(centers.len() * h * w);
    for &(cx, cy) in centers {
        let t = gaussian_target(cx, cy, sigma_x, sigma_y, h, w)?;
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![centers.len(), h, w], data)
}

/// The individual terms of the first-stage loss and their weighted total.
pub struct TwLossTerms {
    pub total: Var,
    /// Mean (over joints) summed squared heatmap error.
    pub heatmap: Var,
    /// Mean (over joints) squared coordinate error of the soft-argmax readout.
    pub coord: Var,
    /// Summed L1 norm of the weight tensors passed in.
    pub reg: Var,
}

/// First-stage loss: `3 * L_heatmap + 0.01 * L_coord + 0.01 * L1(weights)`.
///
/// `target2d` must match `pred2d` (`[J, hm, hm]`), `target_joints` must match
/// the soft-argmax output (`[J, 3]`, same units), and `weights` are the bound
/// weight parameters included in the L1 term (biases excluded by the caller).
pub fn loss_tw(
    tape: &mut Tape,
    pred2d: Var,
    joints: Var,
    target2d: Var,
    target_joints: Var,
    weights: &[Var],
) -> Result<TwLossTerms> {
    let pshape = tape.shape(pred2d).to_vec();
    let tshape = tape.shape(target2d).to_vec();
    if pshape != tshape {
        return Err(Error::shape(format!("heatmap target {tshape:?} does not match prediction {pshape:?}")));
    }
    let j = pshape[0];
    if tape.shape(joints) != tape.shape(target_joints) {
        return Err(Error::shape("coordinate target does not match soft-argmax output".to_string()));
    }

    let dh = tape.sub(pred2d, target2d)?;
    let dh2 = tape.square(dh);
    let sum_h = tape.sum_all(dh2);
    let heatmap = tape.scale(sum_h, 1.0 / j as f64);

    let dj = tape.sub(joints, target_joints)?;
    let dj2 = tape.square(dj);
    let sum_j = tape.sum_all(dj2);
    let coord = tape.scale(sum_j, 1.0 / j as f64);

    let mut reg = tape.constant(&Tensor::scalar(0.0));
    for &w in weights {
        let a = tape.abs(w);
        let s = tape.sum_all(a);
        reg = tape.add(reg, s)?;
    }

    let th = tape.scale(heatmap, LAMBDA_HEATMAP);
    let tc = tape.scale(coord, LAMBDA_COORD);
    let tr = tape.scale(reg, LAMBDA_REG);
    let t0 = tape.add(th, tc)?;
    let total = tape.add(t0, tr)?;
    Ok(TwLossTerms { total, heatmap, coord, reg })
}
