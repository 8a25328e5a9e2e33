//! Minimal 3-vector helpers for the kinematic chain.  Everything works on
//! plain `[f64; 3]` to keep the generator dependency-free.

pub type Vec3 = [f64; 3];

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// Rotates `v` by `angle` radians around the unit axis `k` (Rodrigues):
/// v cos t + (k x v) sin t + k (k . v)(1 - cos t).
pub fn rotate_axis(v: Vec3, k: Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    let kxv = cross(k, v);
    let kdv = dot(k, v);
    [
        v[0] * c + kxv[0] * s + k[0] * kdv * (1.0 - c),
        v[1] * c + kxv[1] * s + k[1] * kdv * (1.0 - c),
        v[2] * c + kxv[2] * s + k[2] * kdv * (1.0 - c),
    ]
}

/// Rotation about the z axis in the x-y plane.
pub fn rotate_z(v: Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    [v[0] * c - v[1] * s, v[0] * s + v[1] * c, v[2]]
}

/// Intrinsic x-then-y-then-z rotation of `v` by the three angles.
pub fn rotate_xyz(v: Vec3, angles: [f64; 3]) -> Vec3 {
    let v = rotate_axis(v, [1.0, 0.0, 0.0], angles[0]);
    let v = rotate_axis(v, [0.0, 1.0, 0.0], angles[1]);
    rotate_axis(v, [0.0, 0.0, 1.0], angles[2])
}

/// Distance from point `p` to the segment `a`-`b`, all in the x-y plane
/// (z components ignored); also returns the interpolation parameter in [0,1]
/// of the closest point, for attribute interpolation along the segment.
pub fn point_segment_dist_2d(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    let d = ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt();
    (d, t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rodrigues_preserves_length_and_matches_quarter_turn() {
        let v = [1.0, 2.0, -0.5];
        let k = [0.0, 0.0, 1.0];
        let r = rotate_axis(v, k, std::f64::consts::FRAC_PI_2);
        assert!((norm(r) - norm(v)).abs() < 1e-12);
        assert!((r[0] - -2.0).abs() < 1e-12);
        assert!((r[1] - 1.0).abs() < 1e-12);
        assert!((r[2] - -0.5).abs() < 1e-12);
    }

    #[test]
    fn segment_distance_handles_endpoints_and_interior() {
        let (d, t) = point_segment_dist_2d((0.0, 1.0), (0.0, 0.0), (2.0, 0.0));
        assert!((d - 1.0).abs() < 1e-12 && (t - 0.0).abs() < 1e-12);
        let (d, t) = point_segment_dist_2d((1.0, -3.0), (0.0, 0.0), (2.0, 0.0));
        assert!((d - 3.0).abs() < 1e-12 && (t - 0.5).abs() < 1e-12);
        let (d, _) = point_segment_dist_2d((5.0, 0.0), (0.0, 0.0), (2.0, 0.0));
        assert!((d - 3.0).abs() < 1e-12);
        // degenerate segment
        let (d, t) = point_segment_dist_2d((1.0, 1.0), (0.0, 0.0), (0.0, 0.0));
        assert!((d - 2f64.sqrt()).abs() < 1e-12 && t == 0.0);
    }
}
