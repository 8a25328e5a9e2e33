//! One fully labelled synthetic sample: pose -> kinematics -> projection ->
//! rendering, with re-draws when a pose leaves the image volume.

use ehpe_core::error::{Error, Result};
use ehpe_core::skeleton::{self, NUM_JOINTS};
use ehpe_core::tensor::Tensor;

use crate::camera::Camera;
use crate::kinematics::{forward_kinematics, Skeleton};
use crate::pose::{sample_pose, sample_rng, PoseLimits};
use crate::render::{render, RenderConfig};

/// Poses drawn from one sample stream before giving up.
pub const MAX_REDRAWS: usize = 1000;

/// Everything that parameterizes generation (but not which samples to make).
#[derive(Clone, Debug, Default)]
pub struct GenParams {
    pub skeleton: Skeleton,
    pub camera: Camera,
    pub limits: PoseLimits,
    pub render: RenderConfig,
}

/// A labelled synthetic sample.
#[derive(Clone, Debug)]
pub struct HandSample {
    /// `[3, height, width]`, values in [0, 1].
    pub image: Tensor,
    /// `[21, 3]` rows of (x px, y px, z in [0, depth_res)).
    pub joints25d: Tensor,
    /// Per-joint category letter (W/M/P/D/T) as ASCII bytes.
    pub category: [u8; NUM_JOINTS],
    pub sample_id: u64,
}

/// The constant category row every sample carries.
pub fn category_letters() -> [u8; NUM_JOINTS] {
    let mut out = [0u8; NUM_JOINTS];
    for (j, slot) in out.iter_mut().enumerate() {
        *slot = skeleton::category_of(j).letter() as u8;
    }
    out
}

/// Generates sample `sample_id` of the dataset keyed by `seed`.  Poses whose
/// projection leaves the image volume are re-drawn from the same per-sample
/// stream, so generation order never matters; a configuration that cannot
/// produce an in-bounds pose within [`MAX_REDRAWS`] draws fails.
pub fn make_sample(seed: u64, sample_id: u64, params: &GenParams) -> Result<HandSample> {
    params.camera.validate()?;
    let mut rng = sample_rng(seed, sample_id);
    for _ in 0..MAX_REDRAWS {
        let pose = sample_pose(&mut rng, &params.limits)?;
        let joints3d = forward_kinematics(&pose, &params.skeleton)?;
        let mut joints25d = [[0.0f64; 3]; NUM_JOINTS];
        let mut in_bounds = true;
        for (q, p) in joints25d.iter_mut().zip(joints3d.iter()) {
            match params.camera.project(*p) {
                Some(v) => *q = v,
                None => {
                    in_bounds = false;
                    break;
                }
            }
        }
        if !in_bounds {
            continue;
        }
        let (w, h) = params.camera.image;
        let image = render(&joints25d, &skeleton::bones(), w, h, params.camera.depth_res, &params.render)?;
        let joints25d = Tensor::new(vec![NUM_JOINTS, 3], joints25d.into_iter().flatten().collect())?;
        return Ok(HandSample { image, joints25d, category: category_letters(), sample_id });
    }
    Err(Error::Degenerate(format!(
        "no in-bounds pose for sample {sample_id} after {MAX_REDRAWS} draws; \
         camera scale and pose limits leave too little margin"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_are_deterministic_and_in_bounds() {
        let params = GenParams::default();
        let a = make_sample(3, 17, &params).unwrap();
        let b = make_sample(3, 17, &params).unwrap();
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.joints25d.data(), b.joints25d.data());
        assert_eq!(a.sample_id, 17);

        for j in 0..NUM_JOINTS {
            let (x, y, z) = (a.joints25d.at(&[j, 0]), a.joints25d.at(&[j, 1]), a.joints25d.at(&[j, 2]));
            assert!(x >= 0.0 && x < 64.0);
            assert!(y >= 0.0 && y < 64.0);
            assert!(z >= 0.0 && z < 8.0);
        }
        assert_eq!(&a.category, b"WMPDTMPDTMPDTMPDTMPDT");
    }

    #[test]
    fn tight_camera_forces_redraws_but_stays_in_bounds() {
        // A camera with almost no margin: most poses project outside, so the
        // generator must re-draw, yet every returned sample is valid.
        let params = GenParams {
            camera: Camera { scale: 14.5, ..Default::default() },
            ..Default::default()
        };
        for id in 0..5 {
            let s = make_sample(9, id, &params).unwrap();
            for j in 0..NUM_JOINTS {
                assert!(s.joints25d.at(&[j, 0]) < 64.0 && s.joints25d.at(&[j, 0]) >= 0.0);
            }
        }
    }

    #[test]
    fn impossible_camera_reports_degeneracy() {
        let params = GenParams {
            camera: Camera { scale: 1000.0, ..Default::default() },
            ..Default::default()
        };
        let err = make_sample(1, 0, &params).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)), "{err}");
    }
}
