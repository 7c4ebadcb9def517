use std::path::Path;

use crate::bevgrid::BevGridSpec;
use crate::detectors::{lidar_bev, panorama_input, LiftTable};
use crate::nn::Tensor;
use crate::scalar::Scalar;
use crate::synthworld::{camera_hit_ranges, generate_scenes, load_dataset, serialize_dataset, Scene, WorldError, WorldSpec};

/// Validation scene ids start here so they never collide with training ids.
pub const VAL_ID_OFFSET: u64 = 1 << 32;

pub const TRAIN_FILE: &str = "train.lgwd";
pub const VAL_FILE: &str = "val.lgwd";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub world: WorldSpec,
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
}

impl Dataset {
    pub fn generate(world: &WorldSpec, train: usize, val: usize) -> Result<Self, WorldError> {
        Ok(Self {
            world: world.clone(),
            train: generate_scenes(world, 0..train as u64)?,
            val: generate_scenes(world, VAL_ID_OFFSET..VAL_ID_OFFSET + val as u64)?,
        })
    }

    /// Writes both splits into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), WorldError> {
        std::fs::create_dir_all(dir)?;
        serialize_dataset(&dir.join(TRAIN_FILE), &self.world, &self.train)?;
        serialize_dataset(&dir.join(VAL_FILE), &self.world, &self.val)
    }

    pub fn load(dir: &Path) -> Result<Self, WorldError> {
        let (world, train) = load_dataset(&dir.join(TRAIN_FILE))?;
        let (world_val, val) = load_dataset(&dir.join(VAL_FILE))?;
        if world != world_val {
            return Err(WorldError::InvalidSpec("train and val splits use different worlds".into()));
        }
        Ok(Self { world, train, val })
    }
}

/// Network inputs of one split, computed once.
#[derive(Clone, Debug)]
pub struct Prepared<S> {
    /// `[3, 1, H, W]` point statistics per scene.
    pub lidar: Vec<Tensor<S>>,
    /// `[F, 1, 1, A]` panorama per scene.
    pub panorama: Vec<Tensor<S>>,
    /// Depth bin of the nearest hit per column, per scene.
    pub depth: Vec<Vec<Option<usize>>>,
}

impl<S: Scalar> Prepared<S> {
    pub fn new(scenes: &[Scene], world: &WorldSpec, grid: &BevGridSpec, depth_bins: usize) -> Self {
        let lift = LiftTable::new(world, grid, depth_bins);
        Self {
            lidar: scenes.iter().map(|s| lidar_bev(&s.lidar_points, grid)).collect(),
            panorama: scenes.iter().map(|s| panorama_input(&s.panorama, world.extent)).collect(),
            depth: scenes
                .iter()
                .map(|s| camera_hit_ranges(s, world).into_iter().map(|h| h.map(|(r, _)| lift.depth_bin(r))).collect())
                .collect(),
        }
    }

    pub fn lidar_batch(&self, ids: &[usize]) -> Tensor<S> {
        Tensor::stack(&ids.iter().map(|&i| self.lidar[i].clone()).collect::<Vec<_>>())
    }

    pub fn panorama_batch(&self, ids: &[usize]) -> Tensor<S> {
        Tensor::stack(&ids.iter().map(|&i| self.panorama[i].clone()).collect::<Vec<_>>())
    }

    pub fn depth_batch(&self, ids: &[usize]) -> Vec<Option<usize>> {
        ids.iter().flat_map(|&i| self.depth[i].iter().copied()).collect()
    }
}
