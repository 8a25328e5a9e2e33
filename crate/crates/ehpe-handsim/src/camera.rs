//! Orthographic projection from hand units to 2.5-D image coordinates.
//!
//! (x, y) are pixel coordinates (x right, y down, zero-based), z is a linear
//! remap of metric depth into [0, depth_res).  Orthographic projection keeps
//! the depth axis independent of (x, y), so learnability of the depth readout
//! is attributable to the model rather than to perspective cues.

use ehpe_core::error::{Error, Result};

use crate::geom::Vec3;

#[derive(Clone, Debug)]
pub struct Camera {
    /// Pixels per hand unit.
    pub scale: f64,
    /// Principal point in pixels.
    pub center: (f64, f64),
    /// Image size in pixels (width, height).
    pub image: (usize, usize),
    /// Metric depth range mapped onto [0, depth_res).
    pub depth_range: (f64, f64),
    /// Number of discrete depth units d.
    pub depth_res: usize,
}

impl Default for Camera {
    fn default() -> Self {
        Camera {
            scale: 11.0,
            center: (32.0, 32.0),
            image: (64, 64),
            depth_range: (-2.5, 2.5),
            depth_res: 8,
        }
    }
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::config(format!("camera scale {} must be positive", self.scale)));
        }
        if self.depth_range.1 <= self.depth_range.0 {
            return Err(Error::config("camera depth range is empty".to_string()));
        }
        if self.image.0 == 0 || self.image.1 == 0 || self.depth_res == 0 {
            return Err(Error::config("camera image and depth dimensions must be positive".to_string()));
        }
        Ok(())
    }

    /// Projects one 3-D point.  Returns None when the pixel or depth position
    /// falls outside the image volume (the caller re-draws the sample).
    pub fn project(&self, p: Vec3) -> Option<Vec3> {
        let x = self.center.0 + self.scale * p[0];
        let y = self.center.1 - self.scale * p[1];
        let (lo, hi) = self.depth_range;
        let z = (p[2] - lo) / (hi - lo) * self.depth_res as f64;
        let in_x = x >= 0.0 && x < self.image.0 as f64;
        let in_y = y >= 0.0 && y < self.image.1 as f64;
        let in_z = z >= 0.0 && z < self.depth_res as f64;
        (in_x && in_y && in_z).then_some([x, y, z])
    }

    /// Exact inverse of [`Camera::project`] on its image.
    pub fn unproject(&self, q: Vec3) -> Vec3 {
        let (lo, hi) = self.depth_range;
        [
            (q[0] - self.center.0) / self.scale,
            (self.center.1 - q[1]) / self.scale,
            lo + q[2] / self.depth_res as f64 * (hi - lo),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wrist_at_origin_hits_principal_point() {
        let cam = Camera::default();
        let q = cam.project([0.0, 0.0, 0.0]).unwrap();
        assert_eq!(q[0], 32.0);
        assert_eq!(q[1], 32.0);
        assert_eq!(q[2], 4.0); // middle of the depth range
    }

    #[test]
    fn depth_only_differences_keep_the_pixel() {
        let cam = Camera::default();
        let a = cam.project([0.5, -0.25, 0.3]).unwrap();
        let b = cam.project([0.5, -0.25, -1.7]).unwrap();
        assert_eq!(a[0], b[0]);
        assert_eq!(a[1], b[1]);
        assert!(a[2] > b[2]);
    }

    #[test]
    fn out_of_volume_points_are_signalled() {
        let cam = Camera::default();
        assert!(cam.project([3.0, 0.0, 0.0]).is_none()); // 32 + 33 = 65 >= 64
        assert!(cam.project([0.0, 0.0, 2.5]).is_none()); // z = 8 not < 8
        assert!(cam.project([0.0, 0.0, -2.6]).is_none());
        assert!(cam.project([0.0, 2.95, 0.0]).is_none()); // y = -0.45
    }

    proptest! {
        #[test]
        fn unproject_inverts_project(
            x in -2.8f64..2.8,
            y in -2.8f64..2.8,
            z in -2.4f64..2.4,
        ) {
            let cam = Camera::default();
            if let Some(q) = cam.project([x, y, z]) {
                let p = cam.unproject(q);
                prop_assert!((p[0] - x).abs() < 1e-9);
                prop_assert!((p[1] - y).abs() < 1e-9);
                prop_assert!((p[2] - z).abs() < 1e-9);
            }
        }
    }
}
