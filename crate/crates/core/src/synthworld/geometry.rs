use std::f64::consts::PI;

use super::BoxLabel;

/// Maps any angle into `(-pi, pi]`.
pub fn canonical_yaw(yaw: f64) -> f64 {
    let mut a = yaw.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Distance along the ray `origin + t * dir` (`dir` unit length, `t >= 0`)
/// at which it first enters `b`, or `None` when it misses. A ray starting
/// inside the box reports `t = 0`.
pub fn ray_box_entry(origin: (f64, f64), dir: (f64, f64), b: &BoxLabel) -> Option<f64> {
    let (s, c) = (b.yaw as f64).sin_cos();
    let (dx, dy) = (origin.0 - b.x as f64, origin.1 - b.y as f64);
    let o = [dx * c + dy * s, -dx * s + dy * c];
    let d = [dir.0 * c + dir.1 * s, -dir.0 * s + dir.1 * c];
    let half = [b.l as f64 / 2.0, b.w as f64 / 2.0];
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for i in 0..2 {
        if d[i].abs() < 1e-15 {
            if o[i].abs() > half[i] {
                return None;
            }
        } else {
            let a = (-half[i] - o[i]) / d[i];
            let z = (half[i] - o[i]) / d[i];
            t0 = t0.max(a.min(z));
            t1 = t1.min(a.max(z));
        }
    }
    (t0 <= t1).then_some(t0)
}

/// Angular interval `(lo, hi)` subtended by the box as seen from the origin,
/// measured relative to the center azimuth so that it never wraps.
pub(crate) fn angular_span(b: &BoxLabel) -> (f64, f64) {
    let center = (b.y as f64).atan2(b.x as f64);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in b.corners() {
        let rel = canonical_yaw(y.atan2(x) - center);
        lo = lo.min(rel);
        hi = hi.max(rel);
    }
    (center + lo, center + hi)
}
