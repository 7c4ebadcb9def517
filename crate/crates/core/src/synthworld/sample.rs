use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::camera::{render_camera, Panorama};
use super::lidar::render_lidar;
use super::{mix_seed, BoxLabel, Scene, WorldError, WorldSpec};

const MAX_ATTEMPTS: usize = 1000;
/// Objects keep this much clearance between their corners and the sensor.
const SENSOR_CLEARANCE: f64 = 0.5;
/// Non-overlap rule: center distance must exceed this fraction of the
/// half-diagonal sum.
const SEPARATION: f64 = 0.8;

/// Samples ground-truth boxes only; sensors are left unrendered (no points,
/// background panorama).
pub fn sample_scene(rng: &mut impl Rng, spec: &WorldSpec, scene_id: u64) -> Result<Scene, WorldError> {
    spec.validate()?;
    let n = rng.gen_range(1..=spec.max_objects);
    let (x0, x1) = spec.x_range();
    let mut boxes: Vec<BoxLabel> = Vec::with_capacity(n);
    let mut attempts = 0;
    while boxes.len() < n {
        if attempts == MAX_ATTEMPTS {
            return Err(WorldError::SamplingFailed { scene_id, attempts });
        }
        attempts += 1;
        let class_id = rng.gen_range(0..spec.num_classes);
        let size = spec.class_sizes[class_id];
        let w = rng.gen_range(size.width.0..=size.width.1);
        let l = rng.gen_range(size.length.0..=size.length.1);
        let yaw = rng.gen_range(-PI..PI);
        let x = rng.gen_range(x0..x1);
        let y = rng.gen_range(0.0..spec.extent);
        let candidate = BoxLabel {
            class_id: class_id as u32,
            x: x as f32,
            y: y as f32,
            w: w as f32,
            l: l as f32,
            yaw: yaw_f32(yaw),
        };
        if !spec.contains(candidate.x as f64, candidate.y as f64) {
            continue;
        }
        if candidate.distance() <= candidate.half_diagonal() + SENSOR_CLEARANCE {
            continue;
        }
        let clear = boxes.iter().all(|o| {
            let d = ((o.x - candidate.x) as f64).hypot((o.y - candidate.y) as f64);
            d > SEPARATION * (o.half_diagonal() + candidate.half_diagonal())
        });
        if clear {
            boxes.push(candidate);
        }
    }
    Ok(Scene {
        scene_id,
        boxes,
        lidar_points: Vec::new(),
        panorama: Panorama::background(spec.azimuth_bins, spec.num_classes),
    })
}

/// Rounds to `f32` keeping the stored yaw in `(-pi, pi]` as measured in `f32`.
fn yaw_f32(yaw: f64) -> f32 {
    let y = yaw as f32;
    if y <= -std::f32::consts::PI {
        std::f32::consts::PI
    } else {
        y.min(std::f32::consts::PI)
    }
}

/// Fully rendered scene; a pure function of `(spec, scene_id)`.
pub fn generate_scene(spec: &WorldSpec, scene_id: u64) -> Result<Scene, WorldError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, scene_id, 0]));
    let mut scene = sample_scene(&mut rng, spec, scene_id)?;
    scene.lidar_points = render_lidar(&scene, spec);
    scene.panorama = render_camera(&scene, spec);
    Ok(scene)
}

pub fn generate_scenes(spec: &WorldSpec, ids: std::ops::Range<u64>) -> Result<Vec<Scene>, WorldError> {
    ids.map(|id| generate_scene(spec, id)).collect()
}
