//! The canonical hand skeleton and its forward kinematics.
//!
//! Joint order is wrist first, then each finger (thumb, index, middle, ring,
//! pinky) as MCP -> PIP -> DIP -> TIP, matching the joint taxonomy helpers in
//! `ehpe_core::skeleton`.  The rest pose is a flat hand in the x-y plane with
//! fingers along +y (splayed per finger), palm normal +z; positive flexion
//! curls the finger toward +z.

use ehpe_core::error::{Error, Result};
use ehpe_core::skeleton::{self, NUM_FINGERS, NUM_JOINTS};

use crate::geom::{self, Vec3};
use crate::pose::JointAngles;

/// Splay of each finger's palm bone, degrees from +y (thumb..pinky).
pub const SPLAY_DEG: [f64; NUM_FINGERS] = [-60.0, -15.0, 0.0, 15.0, 30.0];

/// Bone lengths in canonical hand units, indexed like
/// [`ehpe_core::skeleton::bones`]: bone `b` ends at joint `b + 1`, so each
/// finger occupies four consecutive entries (palm, proximal, middle, distal).
#[derive(Clone, Debug)]
pub struct Skeleton {
    pub bone_lengths: [f64; 20],
}

impl Default for Skeleton {
    fn default() -> Self {
        Skeleton::canonical()
    }
}

impl Skeleton {
    /// A plausible right hand; the longest chain (middle finger) spans 2.02
    /// units from the wrist.
    pub fn canonical() -> Self {
        #[rustfmt::skip]
        let bone_lengths = [
            0.40, 0.35, 0.30, 0.25, // thumb
            0.90, 0.45, 0.25, 0.20, // index
            1.00, 0.50, 0.30, 0.22, // middle
            0.95, 0.45, 0.28, 0.20, // ring
            0.85, 0.35, 0.22, 0.18, // pinky
        ];
        Skeleton { bone_lengths }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bone_lengths.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::config("bone lengths must be positive and finite".to_string()));
        }
        Ok(())
    }

    /// Radius of the smallest wrist-centered sphere containing every pose.
    pub fn reach(&self) -> f64 {
        (0..NUM_FINGERS)
            .map(|f| self.bone_lengths[4 * f..4 * f + 4].iter().sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// Places all 21 joints in 3-D hand units.  Wrist sits at the global
/// translation; every bone keeps its configured length exactly (rotations are
/// length-preserving by construction).
pub fn forward_kinematics(angles: &JointAngles, skeleton: &Skeleton) -> Result<[Vec3; NUM_JOINTS]> {
    skeleton.validate()?;
    let deg = std::f64::consts::PI / 180.0;
    let mut local = [[0.0f64; 3]; NUM_JOINTS];

    for f in 0..NUM_FINGERS {
        let splay = SPLAY_DEG[f] * deg;
        let base_dir = [splay.sin(), splay.cos(), 0.0];
        let [mcp_flex, abduction, pip_flex, dip_flex] = angles.fingers[f];

        // The palm bone is rigid; abduction swings the finger about the palm
        // normal at the MCP, flexion then curls it about the (abducted)
        // in-plane axis perpendicular to the finger.
        let mcp = geom::scale(base_dir, skeleton.bone_lengths[4 * f]);
        let dir = geom::rotate_z(base_dir, abduction * deg);
        let axis = geom::rotate_z([splay.cos(), -splay.sin(), 0.0], abduction * deg);

        let mut pos = mcp;
        let mut acc = 0.0;
        let flexions = [mcp_flex, pip_flex, dip_flex];
        for (s, flex) in flexions.iter().enumerate() {
            acc += flex * deg;
            let d = geom::rotate_axis(dir, axis, acc);
            pos = geom::add(pos, geom::scale(d, skeleton.bone_lengths[4 * f + 1 + s]));
            local[1 + 4 * f + 1 + s] = pos;
        }
        local[1 + 4 * f] = mcp;
    }

    let rot = [angles.rot[0] * deg, angles.rot[1] * deg, angles.rot[2] * deg];
    let mut out = [[0.0f64; 3]; NUM_JOINTS];
    for (o, p) in out.iter_mut().zip(local.iter()) {
        *o = geom::add(geom::rotate_xyz(*p, rot), angles.trans);
    }
    Ok(out)
}

/// Euclidean length of every bone in a placed pose, in
/// [`ehpe_core::skeleton::bones`] order.
pub fn measured_bone_lengths(joints: &[Vec3; NUM_JOINTS]) -> [f64; 20] {
    let mut out = [0.0; 20];
    for (i, (a, b)) in skeleton::bones().iter().enumerate() {
        let d = [
            joints[*b][0] - joints[*a][0],
            joints[*b][1] - joints[*a][1],
            joints[*b][2] - joints[*a][2],
        ];
        out[i] = geom::norm(d);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::{sample_pose, sample_rng, PoseLimits};
    use proptest::prelude::*;

    #[test]
    fn zero_pose_is_flat_and_collinear() {
        let skel = Skeleton::canonical();
        let joints = forward_kinematics(&JointAngles::zero(), &skel).unwrap();
        assert_eq!(joints[0], [0.0, 0.0, 0.0]);
        for f in 0..NUM_FINGERS {
            let tip = joints[1 + 4 * f + 3];
            // Chain collinear: tip distance from wrist equals summed lengths.
            let total: f64 = skel.bone_lengths[4 * f..4 * f + 4].iter().sum();
            assert!((geom::norm(tip) - total).abs() < 1e-9, "finger {f}");
            // Flat: everything in the z = 0 plane.
            for s in 0..4 {
                assert!(joints[1 + 4 * f + s][2].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn right_angle_mcp_is_perpendicular_and_local() {
        let skel = Skeleton::canonical();
        let mut angles = JointAngles::zero();
        angles.fingers[2][0] = 90.0; // middle finger MCP only
        let bent = forward_kinematics(&angles, &skel).unwrap();
        let flat = forward_kinematics(&JointAngles::zero(), &skel).unwrap();

        // Segments beyond the middle MCP point along the palm normal +z.
        let mcp = bent[1 + 8];
        let tip = bent[1 + 8 + 3];
        let seg = [tip[0] - mcp[0], tip[1] - mcp[1], tip[2] - mcp[2]];
        let len = geom::norm(seg);
        assert!((seg[2] / len - 1.0).abs() < 1e-12, "direction {seg:?}");

        // All other fingers are untouched.
        for (j, (b, f)) in bent.iter().zip(flat.iter()).enumerate() {
            if !(9..=12).contains(&j) {
                assert_eq!(b, f, "joint {j}");
            }
        }
    }

    #[test]
    fn random_poses_preserve_bone_lengths() {
        let skel = Skeleton::canonical();
        let limits = PoseLimits::default();
        for id in 0..200 {
            let pose = sample_pose(&mut sample_rng(11, id), &limits).unwrap();
            let joints = forward_kinematics(&pose, &skel).unwrap();
            let measured = measured_bone_lengths(&joints);
            for (m, c) in measured.iter().zip(&skel.bone_lengths) {
                assert!((m - c).abs() <= 1e-9, "measured {m}, configured {c}");
            }
        }
    }

    #[test]
    fn non_positive_bone_length_is_rejected() {
        let mut skel = Skeleton::canonical();
        skel.bone_lengths[3] = 0.0;
        assert!(forward_kinematics(&JointAngles::zero(), &skel).is_err());
    }

    proptest! {
        /// Bone lengths survive arbitrary (even out-of-limit) angle settings.
        #[test]
        fn lengths_invariant_under_any_angles(
            mcp in -180.0f64..180.0,
            abd in -90.0f64..90.0,
            pip in -180.0f64..180.0,
            dip in -180.0f64..180.0,
            rx in -180.0f64..180.0,
            finger in 0usize..5,
        ) {
            let skel = Skeleton::canonical();
            let mut angles = JointAngles::zero();
            angles.fingers[finger] = [mcp, abd, pip, dip];
            angles.rot = [rx, -rx / 2.0, rx / 3.0];
            angles.trans = [0.3, -0.2, 0.1];
            let joints = forward_kinematics(&angles, &skel).unwrap();
            let measured = measured_bone_lengths(&joints);
            for (m, c) in measured.iter().zip(&skel.bone_lengths) {
                prop_assert!((m - c).abs() <= 1e-9);
            }
        }
    }
}
