use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use super::geometry::ray_box_entry;
use super::{mix_seed, BoxLabel, Scene, WorldSpec};

const LIDAR_STREAM: u64 = 1;

/// Mean number of returns for a box whose center is `distance` meters away.
pub fn expected_point_count(density: f64, distance: f64) -> f64 {
    density / distance.powi(2).max(1.0)
}

/// Simulated LiDAR returns for every box in the scene.
pub fn render_lidar(scene: &Scene, spec: &WorldSpec) -> Vec<[f32; 2]> {
    render_lidar_with_owners(scene, spec).into_iter().map(|(p, _)| p).collect()
}

/// Like [`render_lidar`], also reporting which box produced each return.
///
/// Every box draws from its own random stream and all candidate returns are
/// sampled before the occlusion test, so toggling occlusion only ever
/// removes points.
pub fn render_lidar_with_owners(scene: &Scene, spec: &WorldSpec) -> Vec<([f32; 2], usize)> {
    let mut out = Vec::new();
    for (bi, b) in scene.boxes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, scene.scene_id, LIDAR_STREAM, bi as u64]));
        let lambda = expected_point_count(spec.points_density, b.distance());
        let count = if lambda > 0.0 {
            Poisson::new(lambda).map(|p| p.sample(&mut rng) as usize).unwrap_or(0)
        } else {
            0
        };
        let edges = facing_edges(b);
        let total: f64 = edges.iter().map(|e| e.2).sum();
        for _ in 0..count {
            let mut u = rng.gen::<f64>() * total;
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            if total <= 0.0 {
                continue;
            }
            let mut point = edges[edges.len() - 1].1;
            for &(a, z, len) in &edges {
                if u <= len {
                    let f = u / len;
                    point = (a.0 + f * (z.0 - a.0), a.1 + f * (z.1 - a.1));
                    break;
                }
                u -= len;
            }
            if spec.occlusion && is_shadowed(point, bi, &scene.boxes) {
                continue;
            }
            let noisy = [(point.0 + spec.point_noise * nx) as f32, (point.1 + spec.point_noise * ny) as f32];
            out.push((noisy, bi));
        }
    }
    out
}

/// Edges whose outward normal faces the sensor, as `(start, end, length)`.
fn facing_edges(b: &BoxLabel) -> Vec<((f64, f64), (f64, f64), f64)> {
    let c = b.corners();
    (0..4)
        .filter_map(|i| {
            let (a, z) = (c[i], c[(i + 1) % 4]);
            let (ex, ey) = (z.0 - a.0, z.1 - a.1);
            // Counter-clockwise corners: outward normal is (ey, -ex).
            let mid = ((a.0 + z.0) / 2.0, (a.1 + z.1) / 2.0);
            let facing = ey * (-mid.0) - ex * (-mid.1) > 0.0;
            facing.then(|| (a, z, ex.hypot(ey)))
        })
        .collect()
}

fn is_shadowed(point: (f64, f64), owner: usize, boxes: &[BoxLabel]) -> bool {
    let r = point.0.hypot(point.1);
    if r == 0.0 {
        return false;
    }
    let dir = (point.0 / r, point.1 / r);
    boxes
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != owner)
        .any(|(_, o)| ray_box_entry((0.0, 0.0), dir, o).is_some_and(|t| t < r - 1e-9))
}
