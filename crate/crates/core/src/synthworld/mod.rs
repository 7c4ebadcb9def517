//! Seeded synthetic BEV scenes and the two simulated sensors.
//!
//! The world is a square of side `extent` meters with the sensor at the
//! midpoint of its near edge: `x` spans `[-extent/2, extent/2]`, `y` spans
//! `[0, extent]`, and the sensor sits at the origin looking along `+y`.
//! LiDAR returns thin out with distance and are shadowed by nearer boxes;
//! the camera is a 1-D panorama that always knows the class of what it sees
//! but only gets a noisy range cue.

mod camera;
mod geometry;
mod io;
mod lidar;
mod sample;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

pub use camera::{camera_hit_ranges, render_camera, Panorama};
pub use geometry::{canonical_yaw, ray_box_entry};
pub use io::{load_dataset, read_dataset, serialize_dataset, write_dataset, FORMAT_VERSION, MAGIC};
pub use lidar::{expected_point_count, render_lidar, render_lidar_with_owners};
pub use sample::{generate_scene, generate_scenes, sample_scene};

#[derive(Debug, thiserror::Error)]
pub enum WorldError {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error("scene {scene_id}: rejection sampling found no valid layout after {attempts} attempts")]
    SamplingFailed { scene_id: u64, attempts: usize },
    #[error("dataset format version {found} does not match supported version {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("dataset truncated while reading {0}")]
    Truncated(String),
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Uniform size ranges (meters) for one class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeRange {
    pub width: (f64, f64),
    pub length: (f64, f64),
}

impl SizeRange {
    pub fn mid(&self) -> (f64, f64) {
        ((self.width.0 + self.width.1) / 2.0, (self.length.0 + self.length.1) / 2.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub extent: f64,
    pub num_classes: usize,
    pub max_objects: usize,
    pub class_sizes: Vec<SizeRange>,
    /// Expected LiDAR returns per box at 1 m; falls off as `1/d^2`.
    pub points_density: f64,
    pub occlusion: bool,
    /// Std-dev of LiDAR point position noise (m).
    pub point_noise: f64,
    /// Camera range-cue noise std-dev per meter of distance.
    pub range_noise: f64,
    pub azimuth_bins: usize,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            extent: 40.0,
            num_classes: 3,
            max_objects: 6,
            class_sizes: vec![
                SizeRange { width: (1.7, 2.1), length: (3.9, 4.9) },
                SizeRange { width: (0.5, 0.9), length: (0.5, 0.9) },
                SizeRange { width: (0.6, 0.9), length: (1.6, 2.0) },
            ],
            points_density: 200.0,
            occlusion: true,
            point_noise: 0.05,
            range_noise: 0.08,
            azimuth_bins: 128,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: &str| Err(WorldError::InvalidSpec(m.to_string()));
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return bad("extent must be positive");
        }
        if self.num_classes < 2 {
            return bad("at least two classes are required");
        }
        if self.class_sizes.len() != self.num_classes {
            return bad("one size range per class is required");
        }
        if self.max_objects == 0 {
            return bad("max_objects must be at least 1");
        }
        if self.azimuth_bins == 0 {
            return bad("azimuth_bins must be positive");
        }
        for s in &self.class_sizes {
            if !(s.width.0 > 0.0 && s.width.0 <= s.width.1 && s.length.0 > 0.0 && s.length.0 <= s.length.1) {
                return bad("size ranges must be positive and ordered");
            }
        }
        if self.point_noise < 0.0 || self.range_noise < 0.0 || self.points_density < 0.0 {
            return bad("noise levels and density must be non-negative");
        }
        Ok(())
    }

    /// Channels per panorama column: class one-hot, background flag,
    /// angular width, range cue.
    pub fn panorama_channels(&self) -> usize {
        self.num_classes + 3
    }

    pub fn x_range(&self) -> (f64, f64) {
        (-self.extent / 2.0, self.extent / 2.0)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (x0, x1) = self.x_range();
        x >= x0 && x <= x1 && y >= 0.0 && y <= self.extent
    }

    /// Azimuth of the center of panorama bin `a`; bins cover `[0, pi]`.
    pub fn bin_azimuth(&self, a: usize) -> f64 {
        (a as f64 + 0.5) * PI / self.azimuth_bins as f64
    }
}

/// One ground-truth object. Stored in `f32` so that the dataset file is
/// lossless.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxLabel {
    pub class_id: u32,
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub l: f32,
    /// Heading of the length axis, in `(-pi, pi]`.
    pub yaw: f32,
}

impl BoxLabel {
    pub fn distance(&self) -> f64 {
        (self.x as f64).hypot(self.y as f64)
    }

    pub fn half_diagonal(&self) -> f64 {
        0.5 * (self.w as f64).hypot(self.l as f64)
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = (self.yaw as f64).sin_cos();
        let (hl, hw) = (self.l as f64 / 2.0, self.w as f64 / 2.0);
        let local = [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)];
        local.map(|(u, v)| (self.x as f64 + u * c - v * s, self.y as f64 + u * s + v * c))
    }

    pub fn contains_point(&self, px: f64, py: f64) -> bool {
        let (s, c) = (self.yaw as f64).sin_cos();
        let (dx, dy) = (px - self.x as f64, py - self.y as f64);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        u.abs() <= self.l as f64 / 2.0 && v.abs() <= self.w as f64 / 2.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: u64,
    pub boxes: Vec<BoxLabel>,
    pub lidar_points: Vec<[f32; 2]>,
    pub panorama: Panorama,
}

/// Splitmix-style mixing of a seed with stream identifiers.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut z = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        z ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(z << 6).wrapping_add(z >> 2);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}
