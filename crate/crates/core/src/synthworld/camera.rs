use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::geometry::{angular_span, ray_box_entry};
use super::{mix_seed, Scene, WorldSpec};

const CAMERA_STREAM: u64 = 2;

/// Per-azimuth appearance features, row-major `bins x channels`.
///
/// Column layout: `[one-hot class (m), background flag, angular width (rad),
/// range cue (m)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Panorama {
    pub bins: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Panorama {
    pub fn background(bins: usize, num_classes: usize) -> Self {
        let channels = num_classes + 3;
        let mut data = vec![0.0; bins * channels];
        for a in 0..bins {
            data[a * channels + num_classes] = 1.0;
        }
        Self { bins, channels, data }
    }

    pub fn column(&self, a: usize) -> &[f32] {
        &self.data[a * self.channels..(a + 1) * self.channels]
    }

    fn column_mut(&mut self, a: usize) -> &mut [f32] {
        &mut self.data[a * self.channels..(a + 1) * self.channels]
    }

    pub fn num_classes(&self) -> usize {
        self.channels - 3
    }

    /// Class of the object seen in column `a`, `None` for background.
    pub fn column_class(&self, a: usize) -> Option<usize> {
        let m = self.num_classes();
        let col = self.column(a);
        if col[m] > 0.5 {
            return None;
        }
        (0..m).max_by(|&i, &j| col[i].total_cmp(&col[j]))
    }

    pub fn range_cue(&self, a: usize) -> f32 {
        self.column(a)[self.channels - 1]
    }
}

/// Nearest ray hit per panorama bin as `(range, box index)`.
pub fn camera_hit_ranges(scene: &Scene, spec: &WorldSpec) -> Vec<Option<(f64, usize)>> {
    (0..spec.azimuth_bins)
        .map(|a| {
            let dir = spec.bin_azimuth(a).sin_cos();
            let dir = (dir.1, dir.0);
            scene
                .boxes
                .iter()
                .enumerate()
                .filter_map(|(i, b)| ray_box_entry((0.0, 0.0), dir, b).map(|t| (t, i)))
                .min_by(|x, y| x.0.total_cmp(&y.0))
        })
        .collect()
}

/// Renders the panorama. Each object gets one range-cue error draw with
/// standard deviation `range_noise * distance`; class channels are exact.
pub fn render_camera(scene: &Scene, spec: &WorldSpec) -> Panorama {
    let m = spec.num_classes;
    let noise: Vec<f64> = scene
        .boxes
        .iter()
        .enumerate()
        .map(|(bi, b)| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, scene.scene_id, CAMERA_STREAM, bi as u64]));
            let z: f64 = StandardNormal.sample(&mut rng);
            spec.range_noise * b.distance() * z
        })
        .collect();
    let mut pano = Panorama::background(spec.azimuth_bins, m);
    for (a, hit) in camera_hit_ranges(scene, spec).into_iter().enumerate() {
        let Some((t, bi)) = hit else { continue };
        let b = &scene.boxes[bi];
        let (lo, hi) = angular_span(b);
        let col = pano.column_mut(a);
        col.iter_mut().for_each(|v| *v = 0.0);
        col[b.class_id as usize] = 1.0;
        col[m + 1] = (hi - lo) as f32;
        col[m + 2] = (t + noise[bi]) as f32;
    }
    pano
}
