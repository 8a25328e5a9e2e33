//! Evaluation metrics: mean per-joint position error, its similarity-aligned
//! variant, per-category breakdown, and joint success curves.
//!
//! All batch inputs are `[N, J, 3]` coordinate tensors.  Errors are reported
//! in whatever units the coordinates carry; nothing here assumes millimetres.
//! Alignment is per sample: each prediction is fitted to its ground truth
//! with the least-squares similarity transform (rotation, uniform scale,
//! translation) before the aligned error is averaged.  Samples whose
//! cross-covariance drops below rank 2 (collinear or collapsed point sets)
//! cannot be aligned; they are excluded and counted.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::skeleton::{self, Category, NUM_JOINTS};
use crate::tensor::Tensor;

/// Convergence tolerance of the Jacobi singular-value iteration.
const SVD_TOL: f64 = 1e-12;
/// Hard cap on Jacobi sweeps; 3x3 problems converge in a handful.
const SVD_MAX_SWEEPS: usize = 100;

/// Per-category values in presentation order (fingertips outward-in).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct PerCategory {
    pub tip: f64,
    pub dip: f64,
    pub pip: f64,
    pub mcp: f64,
    pub w: f64,
}

impl PerCategory {
    pub fn get(&self, c: Category) -> f64 {
        match c {
            Category::Tip => self.tip,
            Category::Dip => self.dip,
            Category::Pip => self.pip,
            Category::Mcp => self.mcp,
            Category::Wrist => self.w,
        }
    }

    fn build(mut f: impl FnMut(Category) -> f64) -> PerCategory {
        PerCategory {
            tip: f(Category::Tip),
            dip: f(Category::Dip),
            pip: f(Category::Pip),
            mcp: f(Category::Mcp),
            w: f(Category::Wrist),
        }
    }
}

/// Everything the evaluator reports for one prediction set.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub n_samples: usize,
    /// Mean over samples and joints of the per-joint Euclidean error.
    pub mpjpe: f64,
    /// Same mean after per-sample similarity alignment.
    pub pa_mpjpe: f64,
    /// Samples excluded from `pa_mpjpe` because alignment was degenerate.
    pub excluded_degenerate: usize,
    pub per_category: PerCategory,
    /// Each category's error divided by the fingertip error.
    pub relative_per_category: PerCategory,
    pub pck_thresholds: Vec<f64>,
    /// Fraction of joints within each threshold.
    pub pck_fractions: Vec<f64>,
    /// Normalized trapezoidal area under the success curve (1 = perfect).
    pub pck_auc: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Category table as CSV: `category,mean_error,ratio_to_tip`.
    pub fn category_csv(&self) -> String {
        let mut out = String::from("category,mean_error,ratio_to_tip\n");
        for c in Category::ALL {
            out.push_str(&format!(
                "{},{},{}\n",
                category_name(c),
                self.per_category.get(c),
                self.relative_per_category.get(c)
            ));
        }
        out
    }
}

fn category_name(c: Category) -> &'static str {
    match c {
        Category::Tip => "TIP",
        Category::Dip => "DIP",
        Category::Pip => "PIP",
        Category::Mcp => "MCP",
        Category::Wrist => "W",
    }
}

fn check_batch(pred: &Tensor, gt: &Tensor) -> Result<(usize, usize)> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} and ground truth {:?} differ",
            pred.shape(),
            gt.shape()
        )));
    }
    let s = pred.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::shape(format!("expected [N, J, 3] coordinates, got {s:?}")));
    }
    Ok((s[0], s[1]))
}

/// Stacks per-sample `[J, 3]` poses into one `[N, J, 3]` batch.
pub fn stack_poses(poses: &[Tensor]) -> Result<Tensor> {
    if poses.is_empty() {
        return Err(Error::shape("cannot stack an empty pose list".to_string()));
    }
    let s = poses[0].shape().to_vec();
    if s.len() != 2 || s[1] != 3 {
        return Err(Error::shape(format!("expected [J, 3] poses, got {s:?}")));
    }
    let mut data = Vec::with_capacity(poses.len() * poses[0].len());
    for p in poses {
        if p.shape() != s {
            return Err(Error::shape(format!("pose shape {:?} differs from first {s:?}", p.shape())));
        }
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![poses.len(), s[0], 3], data)
}

fn joint_error(pred: &[f64], gt: &[f64], base: usize) -> f64 {
    let dx = pred[base] - gt[base];
    let dy = pred[base + 1] - gt[base + 1];
    let dz = pred[base + 2] - gt[base + 2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Mean per-joint position error over an `[N, J, 3]` batch.
pub fn mpjpe(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (n, j) = check_batch(pred, gt)?;
    if n == 0 {
        return Err(Error::shape("empty batch".to_string()));
    }
    let (p, g) = (pred.data(), gt.data());
    let mut sum = 0.0;
    for i in 0..n * j {
        sum += joint_error(p, g, i * 3);
    }
    Ok(sum / (n * j) as f64)
}

/// Least-squares similarity alignment of one `[J, 3]` pose onto another.
///
/// Returns the transformed prediction.  The rotation comes from a Jacobi
/// singular-value decomposition of the 3x3 cross-covariance with the usual
/// determinant correction on the smallest singular direction, so the result
/// is always a proper rotation; scale and translation are the closed-form
/// optima for that rotation.
pub fn procrustes_align(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} and ground truth {:?} differ",
            pred.shape(),
            gt.shape()
        )));
    }
    let s = pred.shape();
    if s.len() != 2 || s[1] != 3 || s[0] < 3 {
        return Err(Error::shape(format!("expected [J >= 3, 3] poses, got {s:?}")));
    }
    let j = s[0];
    let (p, g) = (pred.data(), gt.data());

    let mut mu_p = [0.0; 3];
    let mut mu_g = [0.0; 3];
    for i in 0..j {
        for c in 0..3 {
            mu_p[c] += p[i * 3 + c];
            mu_g[c] += g[i * 3 + c];
        }
    }
    for c in 0..3 {
        mu_p[c] /= j as f64;
        mu_g[c] /= j as f64;
    }

    let mut var_p = 0.0;
    let mut h = [[0.0; 3]; 3];
    for i in 0..j {
        let pc = [p[i * 3] - mu_p[0], p[i * 3 + 1] - mu_p[1], p[i * 3 + 2] - mu_p[2]];
        let gc = [g[i * 3] - mu_g[0], g[i * 3 + 1] - mu_g[1], g[i * 3 + 2] - mu_g[2]];
        var_p += pc[0] * pc[0] + pc[1] * pc[1] + pc[2] * pc[2];
        for (a, pa) in pc.iter().enumerate() {
            for (b, gb) in gc.iter().enumerate() {
                h[a][b] += pa * gb;
            }
        }
    }
    if var_p == 0.0 {
        return Err(Error::Degenerate("alignment: prediction has zero spread".to_string()));
    }

    let (u, sig, v) = svd3(&h);
    if sig[0] == 0.0 || sig[1] <= SVD_TOL * sig[0] {
        return Err(Error::Degenerate(
            "alignment: cross-covariance rank below 2 (collinear or collapsed points)".to_string(),
        ));
    }

    // R = V D U^T with D correcting an improper rotation on the smallest
    // singular direction.
    let d = if det3(&v) * det3(&u) < 0.0 { -1.0 } else { 1.0 };
    let mut r = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            let mut acc = 0.0;
            for k in 0..3 {
                let dk = if k == 2 { d } else { 1.0 };
                acc += v[a][k] * dk * u[b][k];
            }
            r[a][b] = acc;
        }
    }
    let scale = (sig[0] + sig[1] + d * sig[2]) / var_p;

    let mut out = Vec::with_capacity(j * 3);
    for i in 0..j {
        let pc = [p[i * 3] - mu_p[0], p[i * 3 + 1] - mu_p[1], p[i * 3 + 2] - mu_p[2]];
        for row in &r {
            let rotated = row[0] * pc[0] + row[1] * pc[1] + row[2] * pc[2];
            out.push(scale * rotated);
        }
    }
    for i in 0..j {
        for c in 0..3 {
            out[i * 3 + c] += mu_g[c];
        }
    }
    Tensor::new(vec![j, 3], out)
}

/// Mean per-joint error after per-sample similarity alignment.
/// Returns the mean over alignable samples and the number excluded.
pub fn pa_mpjpe(pred: &Tensor, gt: &Tensor) -> Result<(f64, usize)> {
    let (n, j) = check_batch(pred, gt)?;
    if n == 0 {
        return Err(Error::shape("empty batch".to_string()));
    }
    let mut sum = 0.0;
    let mut included = 0usize;
    let mut excluded = 0usize;
    for i in 0..n {
        let start = i * j * 3;
        let ps = Tensor::new(vec![j, 3], pred.data()[start..start + j * 3].to_vec())?;
        let gs = Tensor::new(vec![j, 3], gt.data()[start..start + j * 3].to_vec())?;
        match procrustes_align(&ps, &gs) {
            Ok(aligned) => {
                let mut s = 0.0;
                for jj in 0..j {
                    s += joint_error(aligned.data(), gs.data(), jj * 3);
                }
                sum += s / j as f64;
                included += 1;
            }
            Err(Error::Degenerate(_)) => excluded += 1,
            Err(e) => return Err(e),
        }
    }
    if included == 0 {
        return Err(Error::Degenerate("alignment degenerate on every sample".to_string()));
    }
    Ok((sum / included as f64, excluded))
}

/// Mean error per joint category and each category's ratio to the fingertip
/// error.  `categories` labels the J joints of the batch.
pub fn category_breakdown(
    pred: &Tensor,
    gt: &Tensor,
    categories: &[Category],
) -> Result<(PerCategory, PerCategory)> {
    let (n, j) = check_batch(pred, gt)?;
    if n == 0 {
        return Err(Error::shape("empty batch".to_string()));
    }
    if categories.len() != j {
        return Err(Error::shape(format!("{} category labels for {j} joints", categories.len())));
    }
    let (p, g) = (pred.data(), gt.data());
    let mut sums = [0.0; 5];
    let mut counts = [0usize; 5];
    for i in 0..n {
        for (jj, &cat) in categories.iter().enumerate() {
            let slot = Category::ALL.iter().position(|&c| c == cat).expect("category in ALL");
            sums[slot] += joint_error(p, g, (i * j + jj) * 3);
            counts[slot] += 1;
        }
    }
    let means = PerCategory::build(|c| {
        let slot = Category::ALL.iter().position(|&x| x == c).unwrap();
        if counts[slot] == 0 {
            0.0
        } else {
            sums[slot] / counts[slot] as f64
        }
    });
    let ratios = if means.tip > 0.0 {
        PerCategory::build(|c| means.get(c) / means.tip)
    } else {
        PerCategory::build(|_| 0.0)
    };
    Ok((means, ratios))
}

/// Success fractions at each threshold and the normalized trapezoidal area
/// under the curve.  Thresholds must be strictly increasing; a single
/// threshold yields its own fraction as the area.
pub fn pck_curve(pred: &Tensor, gt: &Tensor, thresholds: &[f64]) -> Result<(Vec<f64>, f64)> {
    let (n, j) = check_batch(pred, gt)?;
    if n == 0 {
        return Err(Error::shape("empty batch".to_string()));
    }
    if thresholds.is_empty() {
        return Err(Error::config("success curve needs at least one threshold".to_string()));
    }
    for w in thresholds.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::config(format!("thresholds not strictly increasing: {} then {}", w[0], w[1])));
        }
    }
    if !thresholds.iter().all(|t| t.is_finite()) {
        return Err(Error::config("thresholds must be finite".to_string()));
    }

    let (p, g) = (pred.data(), gt.data());
    let total = (n * j) as f64;
    let mut fractions = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let hits = (0..n * j).filter(|&i| joint_error(p, g, i * 3) <= t).count();
        fractions.push(hits as f64 / total);
    }

    let auc = if thresholds.len() == 1 {
        fractions[0]
    } else {
        let span = thresholds[thresholds.len() - 1] - thresholds[0];
        let mut area = 0.0;
        for i in 1..thresholds.len() {
            area += 0.5 * (fractions[i] + fractions[i - 1]) * (thresholds[i] - thresholds[i - 1]);
        }
        area / span
    };
    Ok((fractions, auc))
}

/// Evaluation thresholds used when none are configured: 0.25 to 5.0
/// coordinate units in steps of 0.25.
pub fn default_thresholds() -> Vec<f64> {
    (1..=20).map(|i| i as f64 * 0.25).collect()
}

/// Runs the full evaluation of a 21-joint batch with canonical categories.
pub fn evaluate(pred: &Tensor, gt: &Tensor, thresholds: &[f64]) -> Result<EvalReport> {
    let (n, j) = check_batch(pred, gt)?;
    if j != NUM_JOINTS {
        return Err(Error::shape(format!("expected {NUM_JOINTS} joints, got {j}")));
    }
    let cats: Vec<Category> = (0..NUM_JOINTS).map(skeleton::category_of).collect();
    let m = mpjpe(pred, gt)?;
    let (pa, excluded) = pa_mpjpe(pred, gt)?;
    let (per, rel) = category_breakdown(pred, gt, &cats)?;
    let (fractions, auc) = pck_curve(pred, gt, thresholds)?;
    Ok(EvalReport {
        n_samples: n,
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

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn column(m: &[[f64; 3]; 3], k: usize) -> [f64; 3] {
    [m[0][k], m[1][k], m[2][k]]
}

fn set_column(m: &mut [[f64; 3]; 3], k: usize, v: [f64; 3]) {
    for (row, val) in m.iter_mut().zip(v) {
        row[k] = val;
    }
}

/// One-sided cyclic Jacobi singular-value decomposition of a 3x3 matrix:
/// `m = u * diag(sigma) * v^T` with orthogonal factors and singular values
/// sorted descending.  Rank-deficient inputs get their missing left
/// directions completed orthogonally so `u` stays a rotation-or-reflection.
fn svd3(m: &[[f64; 3]; 3]) -> ([[f64; 3]; 3], [f64; 3], [[f64; 3]; 3]) {
    let mut a = *m;
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

    for _ in 0..SVD_MAX_SWEEPS {
        let mut rotated = false;
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let cp = column(&a, p);
            let cq = column(&a, q);
            let app: f64 = cp.iter().map(|x| x * x).sum();
            let aqq: f64 = cq.iter().map(|x| x * x).sum();
            let apq: f64 = cp.iter().zip(cq).map(|(x, y)| x * y).sum();
            if apq.abs() <= SVD_TOL * (app * aqq).sqrt() || apq == 0.0 {
                continue;
            }
            rotated = true;
            let zeta = (aqq - app) / (2.0 * apq);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            for row in 0..3 {
                let (ap, aq) = (a[row][p], a[row][q]);
                a[row][p] = c * ap - s * aq;
                a[row][q] = s * ap + c * aq;
                let (vp, vq) = (v[row][p], v[row][q]);
                v[row][p] = c * vp - s * vq;
                v[row][q] = s * vp + c * vq;
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sig = [0.0; 3];
    for k in 0..3 {
        let col = column(&a, k);
        sig[k] = (col[0] * col[0] + col[1] * col[1] + col[2] * col[2]).sqrt();
    }
    // Sort singular values descending, permuting both factors.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&x, &y| sig[y].partial_cmp(&sig[x]).expect("finite singular values"));
    let mut u = [[0.0; 3]; 3];
    let mut vs = [[0.0; 3]; 3];
    let mut sig_sorted = [0.0; 3];
    for (dst, &src) in order.iter().enumerate() {
        sig_sorted[dst] = sig[src];
        set_column(&mut vs, dst, column(&v, src));
        if sig[src] > 0.0 {
            let col = column(&a, src);
            set_column(&mut u, dst, [col[0] / sig[src], col[1] / sig[src], col[2] / sig[src]]);
        }
    }
    // Complete zero columns of u into an orthonormal basis.
    for k in 0..3 {
        if sig_sorted[k] > 0.0 {
            continue;
        }
        let filled: Vec<[f64; 3]> = (0..k).map(|i| column(&u, i)).collect();
        let candidate = match filled.len() {
            0 => [1.0, 0.0, 0.0],
            1 => {
                let f = filled[0];
                let alt = if f[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
                cross(f, alt)
            }
            _ => cross(filled[0], filled[1]),
        };
        let norm = (candidate[0] * candidate[0] + candidate[1] * candidate[1] + candidate[2] * candidate[2]).sqrt();
        set_column(&mut u, k, [candidate[0] / norm, candidate[1] / norm, candidate[2] / norm]);
    }
    (u, sig_sorted, vs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_rng;
    use proptest::prelude::*;

    fn rand_batch(seed: u64, n: usize, j: usize, spread: f64) -> Tensor {
        let mut rng = test_rng(seed);
        let data: Vec<f64> = (0..n * j * 3).map(|_| (rng.next_f64() * 2.0 - 1.0) * spread).collect();
        Tensor::new(vec![n, j, 3], data).unwrap()
    }

    fn rand_pose(seed: u64, j: usize, spread: f64) -> Tensor {
        let mut rng = test_rng(seed);
        let data: Vec<f64> = (0..j * 3).map(|_| (rng.next_f64() * 2.0 - 1.0) * spread).collect();
        Tensor::new(vec![j, 3], data).unwrap()
    }

    fn rand_rotation(rng: &mut crate::TestRng) -> [[f64; 3]; 3] {
        // Rodrigues from a random axis and angle.
        let mut axis = [rng.next_f64() - 0.5, rng.next_f64() - 0.5, rng.next_f64() - 0.5];
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt().max(1e-9);
        for a in &mut axis {
            *a /= n;
        }
        let angle = rng.next_f64() * std::f64::consts::TAU;
        let (s, c) = angle.sin_cos();
        let [x, y, z] = axis;
        [
            [c + x * x * (1.0 - c), x * y * (1.0 - c) - z * s, x * z * (1.0 - c) + y * s],
            [y * x * (1.0 - c) + z * s, c + y * y * (1.0 - c), y * z * (1.0 - c) - x * s],
            [z * x * (1.0 - c) - y * s, z * y * (1.0 - c) + x * s, c + z * z * (1.0 - c)],
        ]
    }

    fn transform(pose: &Tensor, scale: f64, r: &[[f64; 3]; 3], t: [f64; 3]) -> Tensor {
        let j = pose.shape()[0];
        let mut out = Vec::with_capacity(j * 3);
        for i in 0..j {
            let p = [pose.data()[i * 3], pose.data()[i * 3 + 1], pose.data()[i * 3 + 2]];
            for (c, row) in r.iter().enumerate() {
                out.push(scale * (row[0] * p[0] + row[1] * p[1] + row[2] * p[2]) + t[c]);
            }
        }
        Tensor::new(vec![j, 3], out).unwrap()
    }

    fn sq_residual(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum()
    }

    #[test]
    fn mpjpe_trivial_and_brute_force() {
        let gt = rand_batch(1, 4, 21, 2.0);
        assert_eq!(mpjpe(&gt, &gt).unwrap(), 0.0);

        let mut off = gt.data().to_vec();
        for i in 0..4 * 21 {
            off[i * 3] += 3.0;
            off[i * 3 + 1] += 4.0;
        }
        let pred = Tensor::new(vec![4, 21, 3], off).unwrap();
        assert!((mpjpe(&pred, &gt).unwrap() - 5.0).abs() < 1e-12);

        let pred = rand_batch(2, 5, 21, 2.0);
        let gt2 = rand_batch(3, 5, 21, 2.0);
        let mut want = 0.0;
        for s in 0..5 {
            for j in 0..21 {
                let mut d2 = 0.0;
                for c in 0..3 {
                    let diff = pred.at(&[s, j, c]) - gt2.at(&[s, j, c]);
                    d2 += diff * diff;
                }
                want += d2.sqrt();
            }
        }
        want /= (5 * 21) as f64;
        assert!((mpjpe(&pred, &gt2).unwrap() - want).abs() < 1e-12);

        let bad = rand_batch(4, 5, 20, 1.0);
        assert!(mpjpe(&pred, &bad).is_err());
    }

    #[test]
    fn alignment_is_identity_on_ground_truth() {
        let gt = rand_pose(10, 21, 1.5);
        let aligned = procrustes_align(&gt, &gt).unwrap();
        for (a, b) in aligned.data().iter().zip(gt.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn alignment_recovers_exact_similarity_transforms() {
        let mut rng = test_rng(20);
        for trial in 0..10 {
            let gt = rand_pose(30 + trial, 21, 1.5);
            let r = rand_rotation(&mut rng);
            let t = [rng.next_f64() * 4.0 - 2.0, rng.next_f64() * 4.0 - 2.0, rng.next_f64() * 4.0 - 2.0];
            let pred = transform(&gt, 2.0, &r, t);
            let aligned = procrustes_align(&pred, &gt).unwrap();
            for (a, b) in aligned.data().iter().zip(gt.data()) {
                assert!((a - b).abs() < 1e-8, "trial {trial}: residual {}", (a - b).abs());
            }
        }
    }

    /// Independent closed-form oracle: the optimal rotation as the dominant
    /// eigenvector of the 4x4 quaternion matrix (power iteration), with the
    /// matching closed-form scale and translation.
    fn horn_align(pred: &Tensor, gt: &Tensor) -> Tensor {
        let j = pred.shape()[0];
        let (p, g) = (pred.data(), gt.data());
        let mut mu_p = [0.0; 3];
        let mut mu_g = [0.0; 3];
        for i in 0..j {
            for c in 0..3 {
                mu_p[c] += p[i * 3 + c] / j as f64;
                mu_g[c] += g[i * 3 + c] / j as f64;
            }
        }
        let mut s = [[0.0; 3]; 3];
        let mut var_p = 0.0;
        for i in 0..j {
            let pc = [p[i * 3] - mu_p[0], p[i * 3 + 1] - mu_p[1], p[i * 3 + 2] - mu_p[2]];
            let gc = [g[i * 3] - mu_g[0], g[i * 3 + 1] - mu_g[1], g[i * 3 + 2] - mu_g[2]];
            var_p += pc.iter().map(|x| x * x).sum::<f64>();
            for a in 0..3 {
                for b in 0..3 {
                    s[a][b] += pc[a] * gc[b];
                }
            }
        }
        #[rustfmt::skip]
        let n = [
            [s[0][0] + s[1][1] + s[2][2], s[1][2] - s[2][1],          s[2][0] - s[0][2],          s[0][1] - s[1][0]],
            [s[1][2] - s[2][1],           s[0][0] - s[1][1] - s[2][2], s[0][1] + s[1][0],          s[0][2] + s[2][0]],
            [s[2][0] - s[0][2],           s[0][1] + s[1][0],          -s[0][0] + s[1][1] - s[2][2], s[1][2] + s[2][1]],
            [s[0][1] - s[1][0],           s[0][2] + s[2][0],          s[1][2] + s[2][1],          -s[0][0] - s[1][1] + s[2][2]],
        ];
        // Shift to make the target eigenvalue dominant, then power-iterate.
        let shift: f64 = 1.0 + n.iter().map(|row| row.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max);
        let mut q = [0.5, 0.5, 0.5, 0.5];
        for _ in 0..2000 {
            let mut next = [0.0; 4];
            for a in 0..4 {
                next[a] = shift * q[a];
                for b in 0..4 {
                    next[a] += n[a][b] * q[b];
                }
            }
            let nrm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            for a in 0..4 {
                q[a] = next[a] / nrm;
            }
        }
        let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
        let r = [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ];
        // Optimal scale for this rotation: sum g . (R p) / sum |p|^2.
        let mut num = 0.0;
        for i in 0..j {
            let pc = [p[i * 3] - mu_p[0], p[i * 3 + 1] - mu_p[1], p[i * 3 + 2] - mu_p[2]];
            let gc = [g[i * 3] - mu_g[0], g[i * 3 + 1] - mu_g[1], g[i * 3 + 2] - mu_g[2]];
            for a in 0..3 {
                num += gc[a] * (r[a][0] * pc[0] + r[a][1] * pc[1] + r[a][2] * pc[2]);
            }
        }
        let scale = num / var_p;
        let t = [
            mu_g[0] - scale * (r[0][0] * mu_p[0] + r[0][1] * mu_p[1] + r[0][2] * mu_p[2]),
            mu_g[1] - scale * (r[1][0] * mu_p[0] + r[1][1] * mu_p[1] + r[1][2] * mu_p[2]),
            mu_g[2] - scale * (r[2][0] * mu_p[0] + r[2][1] * mu_p[1] + r[2][2] * mu_p[2]),
        ];
        transform(pred, scale, &r, t)
    }

    #[test]
    fn alignment_matches_quaternion_oracle_on_noisy_data() {
        let mut rng = test_rng(40);
        for trial in 0..5 {
            let gt = rand_pose(50 + trial, 21, 1.5);
            let r = rand_rotation(&mut rng);
            let base = transform(&gt, 0.7 + rng.next_f64(), &r, [0.3, -1.0, 0.5]);
            let mut noisy = base.data().to_vec();
            for v in &mut noisy {
                *v += (rng.next_f64() - 0.5) * 0.2;
            }
            let pred = Tensor::new(vec![21, 3], noisy).unwrap();
            let ours = procrustes_align(&pred, &gt).unwrap();
            let oracle = horn_align(&pred, &gt);
            for (a, b) in ours.data().iter().zip(oracle.data()) {
                assert!((a - b).abs() < 1e-9, "trial {trial}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn alignment_never_beats_identity_objective() {
        for seed in 0..20 {
            let pred = rand_pose(100 + seed, 21, 2.0);
            let gt = rand_pose(200 + seed, 21, 2.0);
            let aligned = procrustes_align(&pred, &gt).unwrap();
            assert!(sq_residual(&aligned, &gt) <= sq_residual(&pred, &gt) + 1e-9);
        }
    }

    #[test]
    fn alignment_residual_invariant_to_pred_pretransform() {
        let mut rng = test_rng(60);
        for trial in 0..10 {
            let pred = rand_pose(300 + trial, 21, 1.5);
            let gt = rand_pose(400 + trial, 21, 1.5);
            let base = sq_residual(&procrustes_align(&pred, &gt).unwrap(), &gt);
            let r = rand_rotation(&mut rng);
            let warped = transform(&pred, 0.5 + 2.0 * rng.next_f64(), &r, [1.0, -2.0, 0.25]);
            let again = sq_residual(&procrustes_align(&warped, &gt).unwrap(), &gt);
            assert!((base - again).abs() < 1e-8, "trial {trial}: {base} vs {again}");
        }
    }

    #[test]
    fn degenerate_configurations_are_excluded_with_a_count() {
        // Collapsed prediction: zero spread.
        let gt = rand_pose(70, 21, 1.0);
        let flat = Tensor::new(vec![21, 3], vec![0.5; 63]).unwrap();
        assert!(matches!(procrustes_align(&flat, &gt), Err(Error::Degenerate(_))));

        // Collinear ground truth: rank-1 cross-covariance.
        let mut line = Vec::new();
        for i in 0..21 {
            line.extend_from_slice(&[i as f64, 2.0 * i as f64, -i as f64]);
        }
        let collinear = Tensor::new(vec![21, 3], line).unwrap();
        assert!(matches!(procrustes_align(&gt, &collinear), Err(Error::Degenerate(_))));

        // A batch with one bad sample still evaluates, counting the exclusion.
        let good_p = rand_pose(71, 21, 1.0);
        let good_g = rand_pose(72, 21, 1.0);
        let mut pdata = good_p.data().to_vec();
        pdata.extend_from_slice(flat.data());
        let mut gdata = good_g.data().to_vec();
        gdata.extend_from_slice(good_g.data());
        let pred = Tensor::new(vec![2, 21, 3], pdata).unwrap();
        let gt2 = Tensor::new(vec![2, 21, 3], gdata).unwrap();
        let (pa, excluded) = pa_mpjpe(&pred, &gt2).unwrap();
        assert_eq!(excluded, 1);
        let aligned = procrustes_align(&good_p, &good_g).unwrap();
        let mut want = 0.0;
        for j in 0..21 {
            want += joint_error(aligned.data(), good_g.data(), j * 3) / 21.0;
        }
        assert!((pa - want).abs() < 1e-12);
    }

    #[test]
    fn jacobi_svd_recomposes_and_stays_orthogonal() {
        let mut rng = test_rng(80);
        for trial in 0..30 {
            let mut m = [[0.0; 3]; 3];
            for row in &mut m {
                for v in row.iter_mut() {
                    *v = (rng.next_f64() * 2.0 - 1.0) * 10f64.powi((trial % 7) as i32 - 3);
                }
            }
            if trial % 5 == 0 {
                // Force rank deficiency: third row = sum of the first two.
                for c in 0..3 {
                    m[2][c] = m[0][c] + m[1][c];
                }
            }
            let (u, sig, v) = svd3(&m);
            assert!(sig[0] >= sig[1] && sig[1] >= sig[2] && sig[2] >= 0.0);
            let scale = sig[0].max(1.0);
            for a in 0..3 {
                for b in 0..3 {
                    let mut rec = 0.0;
                    let mut utu = 0.0;
                    let mut vtv = 0.0;
                    for k in 0..3 {
                        rec += u[a][k] * sig[k] * v[b][k];
                        utu += u[k][a] * u[k][b];
                        vtv += v[k][a] * v[k][b];
                    }
                    let id = if a == b { 1.0 } else { 0.0 };
                    assert!((rec - m[a][b]).abs() < 1e-9 * scale, "trial {trial} recompose");
                    assert!((utu - id).abs() < 1e-9, "trial {trial} u orthogonal");
                    assert!((vtv - id).abs() < 1e-9, "trial {trial} v orthogonal");
                }
            }
        }
    }

    #[test]
    fn category_breakdown_ratios_and_recomposition() {
        let cats: Vec<Category> = (0..21).map(skeleton::category_of).collect();
        let gt = rand_batch(90, 3, 21, 1.0);

        // Uniform error: all ratios 1.
        let mut off = gt.data().to_vec();
        for v in off.iter_mut().skip(2).step_by(3) {
            *v += 2.5;
        }
        let pred = Tensor::new(vec![3, 21, 3], off).unwrap();
        let (_, ratios) = category_breakdown(&pred, &gt, &cats).unwrap();
        for c in Category::ALL {
            assert!((ratios.get(c) - 1.0).abs() < 1e-12);
        }

        // Fingertip-only error: ratios (1, 0, 0, 0, 0).
        let mut off = gt.data().to_vec();
        for s in 0..3 {
            for &j in &skeleton::TIP_JOINTS {
                off[(s * 21 + j) * 3] += 10.0;
            }
        }
        let pred = Tensor::new(vec![3, 21, 3], off).unwrap();
        let (means, ratios) = category_breakdown(&pred, &gt, &cats).unwrap();
        assert!((means.tip - 10.0).abs() < 1e-12);
        assert_eq!(ratios.tip, 1.0);
        for c in [Category::Dip, Category::Pip, Category::Mcp, Category::Wrist] {
            assert_eq!(ratios.get(c), 0.0);
        }

        // Published relative magnitudes as a fixture: errors scaled
        // 1.00 / 0.80 / 0.72 / 0.59 / 0.40 from fingertip to wrist.
        let mut off = gt.data().to_vec();
        for s in 0..3 {
            for j in 0..21 {
                let e = match skeleton::category_of(j) {
                    Category::Tip => 10.0,
                    Category::Dip => 8.0,
                    Category::Pip => 7.2,
                    Category::Mcp => 5.9,
                    Category::Wrist => 4.0,
                };
                off[(s * 21 + j) * 3 + 1] += e;
            }
        }
        let pred = Tensor::new(vec![3, 21, 3], off).unwrap();
        let (means, ratios) = category_breakdown(&pred, &gt, &cats).unwrap();
        for (c, want) in Category::ALL.iter().zip([1.0, 0.80, 0.72, 0.59, 0.40]) {
            assert!((ratios.get(*c) - want).abs() < 1e-12, "{c:?}");
        }

        // Count-weighted category means recompose the global mean.
        let weighted: f64 = Category::ALL.iter().map(|&c| means.get(c) * c.count() as f64).sum::<f64>() / 21.0;
        assert!((weighted - mpjpe(&pred, &gt).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn success_curve_cases() {
        let gt = rand_batch(95, 4, 21, 1.0);
        let (fractions, auc) = pck_curve(&gt, &gt, &[0.5, 1.0, 2.0]).unwrap();
        assert_eq!(fractions, vec![1.0, 1.0, 1.0]);
        assert_eq!(auc, 1.0);

        // Every joint off by exactly 1: a threshold below that catches none.
        let mut off = gt.data().to_vec();
        for i in 0..4 * 21 {
            off[i * 3] += 1.0;
        }
        let pred = Tensor::new(vec![4, 21, 3], off).unwrap();
        let (fractions, _) = pck_curve(&pred, &gt, &[0.25, 0.5, 1.5]).unwrap();
        assert_eq!(fractions[0], 0.0);
        assert_eq!(fractions[1], 0.0);
        assert_eq!(fractions[2], 1.0);

        // Random case against brute-force counting and a manual trapezoid.
        let pred = rand_batch(96, 5, 21, 1.5);
        let gt2 = rand_batch(97, 5, 21, 1.5);
        let th = [0.4, 0.9, 1.3, 2.2];
        let (fractions, auc) = pck_curve(&pred, &gt2, &th).unwrap();
        let mut want = vec![0usize; th.len()];
        for s in 0..5 {
            for j in 0..21 {
                let mut d2 = 0.0;
                for c in 0..3 {
                    let d = pred.at(&[s, j, c]) - gt2.at(&[s, j, c]);
                    d2 += d * d;
                }
                for (k, &t) in th.iter().enumerate() {
                    if d2.sqrt() <= t {
                        want[k] += 1;
                    }
                }
            }
        }
        let mut want_auc = 0.0;
        for k in 1..th.len() {
            let f1 = want[k] as f64 / 105.0;
            let f0 = want[k - 1] as f64 / 105.0;
            want_auc += 0.5 * (f0 + f1) * (th[k] - th[k - 1]);
        }
        want_auc /= th[th.len() - 1] - th[0];
        for (k, &w) in want.iter().enumerate() {
            assert!((fractions[k] - w as f64 / 105.0).abs() < 1e-12);
        }
        assert!((auc - want_auc).abs() < 1e-12);

        assert!(pck_curve(&pred, &gt2, &[]).is_err());
        assert!(pck_curve(&pred, &gt2, &[1.0, 1.0]).is_err());
        assert!(pck_curve(&pred, &gt2, &[2.0, 1.0]).is_err());
        let (f1, a1) = pck_curve(&pred, &gt2, &[0.9]).unwrap();
        assert_eq!(a1, f1[0]);
    }

    #[test]
    fn report_serializes_to_json_and_csv() {
        let pred = rand_batch(98, 3, 21, 1.5);
        let gt = rand_batch(99, 3, 21, 1.5);
        let report = evaluate(&pred, &gt, &default_thresholds()).unwrap();
        assert_eq!(report.n_samples, 3);
        assert!(report.mpjpe > 0.0);
        assert_eq!(report.relative_per_category.tip, 1.0);

        let parsed: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(parsed["n_samples"], 3);
        assert!(parsed["per_category"]["tip"].is_number());
        assert_eq!(parsed["pck_fractions"].as_array().unwrap().len(), 20);

        let csv = report.category_csv();
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[0], "category,mean_error,ratio_to_tip");
        assert!(lines[1].starts_with("TIP,"));
        assert!(lines[5].starts_with("W,"));
    }

    proptest! {
        /// Squared residual after alignment never exceeds the unaligned one:
        /// the identity transform is always in the feasible family.
        #[test]
        fn alignment_objective_no_worse_than_identity(
            pv in proptest::collection::vec(-5.0f64..5.0, 63),
            gv in proptest::collection::vec(-5.0f64..5.0, 63),
        ) {
            let pred = Tensor::new(vec![21, 3], pv).unwrap();
            let gt = Tensor::new(vec![21, 3], gv).unwrap();
            match procrustes_align(&pred, &gt) {
                Ok(aligned) => prop_assert!(sq_residual(&aligned, &gt) <= sq_residual(&pred, &gt) + 1e-9),
                Err(Error::Degenerate(_)) => {}
                Err(e) => return Err(TestCaseError::fail(format!("unexpected error: {e}"))),
            }
        }
    }
}
