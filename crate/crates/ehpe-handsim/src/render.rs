//! Deterministic rasterization of a posed hand into a small RGB image.
//!
//! Bones become anti-aliased soft line segments, joints become Gaussian
//! blobs.  Depth enters as an intensity cue: channel 0 draws bones brighter
//! when close, channel 1 draws joint blobs with the same near-bright cue, and
//! channel 2 draws bones with the cue reversed, so depth information survives
//! even where segments overlap.  Everything is composited with max, keeping
//! each drawing operation local to its own neighborhood.

use ehpe_core::error::{Error, Result};
use ehpe_core::tensor::Tensor;

use crate::geom;

#[derive(Clone, Debug)]
pub struct RenderConfig {
    /// Half-width of bone segments in pixels (plus a half-pixel soft edge).
    pub line_radius: f64,
    /// Standard deviation of joint blobs in pixels.
    pub blob_sigma: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig { line_radius: 1.0, blob_sigma: 0.8 }
    }
}

fn cue_near(z: f64, depth_res: usize) -> f64 {
    1.0 - 0.6 * (z / depth_res as f64).clamp(0.0, 1.0)
}

fn cue_far(z: f64, depth_res: usize) -> f64 {
    0.4 + 0.6 * (z / depth_res as f64).clamp(0.0, 1.0)
}

struct Canvas<'a> {
    data: &'a mut [f64],
    width: usize,
    height: usize,
}

impl Canvas<'_> {
    fn max_at(&mut self, channel: usize, x: usize, y: usize, v: f64) {
        let i = (channel * self.height + y) * self.width + x;
        if v > self.data[i] {
            self.data[i] = v;
        }
    }
}

/// Renders joints (x, y, z in 2.5-D image coordinates) and the bone segments
/// connecting them onto a `[3, height, width]` canvas in [0, 1].  Joints may
/// be any subset; bone indices must stay within it.
pub fn render(
    joints: &[[f64; 3]],
    bones: &[(usize, usize)],
    width: usize,
    height: usize,
    depth_res: usize,
    cfg: &RenderConfig,
) -> Result<Tensor> {
    if cfg.line_radius <= 0.0 || cfg.blob_sigma <= 0.0 {
        return Err(Error::config("line_radius and blob_sigma must be positive".to_string()));
    }
    let mut data = vec![0.0; 3 * height * width];
    let mut canvas = Canvas { data: &mut data, width, height };

    for &(a, b) in bones {
        if a >= joints.len() || b >= joints.len() {
            return Err(Error::config(format!("bone ({a}, {b}) references a missing joint")));
        }
        let (pa, pb) = (joints[a], joints[b]);
        let margin = cfg.line_radius + 1.0;
        let x0 = (pa[0].min(pb[0]) - margin).floor().max(0.0) as usize;
        let x1 = (pa[0].max(pb[0]) + margin).ceil().min(width as f64 - 1.0) as usize;
        let y0 = (pa[1].min(pb[1]) - margin).floor().max(0.0) as usize;
        let y1 = (pa[1].max(pb[1]) + margin).ceil().min(height as f64 - 1.0) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dist, t) =
                    geom::point_segment_dist_2d((x as f64, y as f64), (pa[0], pa[1]), (pb[0], pb[1]));
                let cov = (cfg.line_radius + 0.5 - dist).clamp(0.0, 1.0);
                if cov > 0.0 {
                    let z = pa[2] + t * (pb[2] - pa[2]);
                    canvas.max_at(0, x, y, cov * cue_near(z, depth_res));
                    canvas.max_at(2, x, y, cov * cue_far(z, depth_res));
                }
            }
        }
    }

    let reach = (4.0 * cfg.blob_sigma).ceil();
    for p in joints {
        let x0 = (p[0] - reach).floor().max(0.0) as usize;
        let x1 = (p[0] + reach).ceil().min(width as f64 - 1.0) as usize;
        let y0 = (p[1] - reach).floor().max(0.0) as usize;
        let y1 = (p[1] + reach).ceil().min(height as f64 - 1.0) as usize;
        let amp = cue_near(p[2], depth_res);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let r2 = (x as f64 - p[0]).powi(2) + (y as f64 - p[1]).powi(2);
                let v = amp * (-r2 / (2.0 * cfg.blob_sigma * cfg.blob_sigma)).exp();
                canvas.max_at(1, x, y, v);
            }
        }
    }

    Tensor::new(vec![3, height, width], data)
}
