use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bevgrid::{BevGridSpec, HeatmapParams};
use crate::detectors::{AdapterSpec, DecodeConfig, StudentConfig, TeacherConfig};
use crate::distill::{LossWeights, PartitionSpec};
use crate::evalkit::EvalConfig;
use crate::labelenc::{LabelEncTrainConfig, LabelEncoderConfig, LabelEncoderVariant};
use crate::synthworld::WorldSpec;
use crate::train::Schedule;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("invalid config field `{field}`: {message}")]
    Invalid { field: &'static str, message: String },
}

/// Network widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `C_T`, width of the point-cloud feature and the label feature.
    pub teacher_channels: usize,
    /// `C_S`, width of the camera BEV feature.
    pub student_channels: usize,
    /// `d`, label embedding width.
    pub embed_dim: usize,
    /// `D`, depth bins.
    pub depth_bins: usize,
    pub column_channels: usize,
    pub lift_channels: usize,
    pub head_channels: usize,
    pub label_hidden: usize,
    pub adapter_layers: usize,
    pub adapter_zero_init: bool,
    pub position_blind: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            teacher_channels: 64,
            student_channels: 48,
            embed_dim: 64,
            depth_bins: 32,
            column_channels: 32,
            lift_channels: 32,
            head_channels: 32,
            label_hidden: 64,
            adapter_layers: 2,
            adapter_zero_init: false,
            position_blind: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub val_scenes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_scenes: 2000, val_scenes: 500 }
    }
}

/// Which distillation terms and which label encoder the student uses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Switches {
    /// Point-cloud feature imitation plus response distillation.
    pub use_lidar_distill: bool,
    pub use_label_distill: bool,
    /// Give each teacher its own channel group instead of the whole feature.
    pub use_partition: bool,
    pub label_encoder_variant: LabelEncoderVariant,
}

impl Default for Switches {
    fn default() -> Self {
        Self {
            use_lidar_distill: true,
            use_label_distill: true,
            use_partition: true,
            label_encoder_variant: LabelEncoderVariant::Inverse,
        }
    }
}

/// Every hyperparameter of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub world: WorldSpec,
    /// BEV cells per side; the grid covers the world exactly.
    pub grid_cells: usize,
    pub model: ModelConfig,
    pub partition: PartitionSpec,
    pub loss: LossWeights,
    pub heatmap: HeatmapParams,
    /// Foreground threshold on the ground-truth heatmap.
    pub tau: f64,
    /// Weight mask cells by heatmap value instead of binary membership.
    pub soft_mask: bool,
    pub data: DataConfig,
    pub teacher: Schedule,
    pub labelenc: Schedule,
    pub student: Schedule,
    pub switches: Switches,
    /// Weight of the student-feature alignment in the student-feature
    /// supervised label encoder.
    pub align_weight: f64,
    pub eval: EvalConfig,
    pub decode: DecodeConfig,
    /// Evaluate on the validation split every this many epochs; 0 only
    /// evaluates after the last epoch.
    pub eval_every: usize,
    /// Near/far boundary as a fraction of the extent.
    pub distance_split: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let schedule = |epochs: usize, decay: Vec<usize>| Schedule {
            decay_epochs: decay,
            ..Schedule::new(epochs, 8, 4e-4)
        };
        Self {
            seed: 0,
            world: WorldSpec::default(),
            grid_cells: 64,
            model: ModelConfig::default(),
            partition: PartitionSpec::default(),
            loss: LossWeights::default(),
            heatmap: HeatmapParams::default(),
            tau: 0.1,
            soft_mask: false,
            data: DataConfig::default(),
            teacher: schedule(20, vec![16]),
            labelenc: schedule(12, vec![10]),
            student: schedule(24, vec![20]),
            switches: Switches::default(),
            align_weight: 1.0,
            eval: EvalConfig::default(),
            decode: DecodeConfig::default(),
            eval_every: 0,
            distance_split: 0.75,
        }
    }
}

fn invalid(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field, message: message.into() }
}

impl ExperimentConfig {
    /// Parses TOML; missing keys take their defaults, unknown keys are
    /// errors.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.world.validate().map_err(|e| invalid("world", e.to_string()))?;
        if self.grid_cells == 0 {
            return Err(invalid("grid_cells", "must be positive"));
        }
        self.grid().validate(&self.world).map_err(|e| invalid("grid_cells", e.to_string()))?;
        let m = &self.model;
        let widths = [
            m.teacher_channels,
            m.student_channels,
            m.embed_dim,
            m.depth_bins,
            m.column_channels,
            m.lift_channels,
            m.head_channels,
            m.label_hidden,
        ];
        if widths.contains(&0) {
            return Err(invalid("model", "all widths must be positive"));
        }
        if !(1..=3).contains(&m.adapter_layers) {
            return Err(invalid("model.adapter_layers", "must be 1, 2 or 3"));
        }
        self.partition
            .check(m.student_channels)
            .map_err(|e| invalid("partition", e.to_string()))?;
        self.loss.validate().map_err(|e| invalid("loss", e))?;
        if !(self.heatmap.beta > 0.0 && self.heatmap.r_min >= 0.0) {
            return Err(invalid("heatmap", "beta must be positive and r_min non-negative"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(invalid("tau", "must lie in (0, 1]"));
        }
        for (field, s) in [("teacher", &self.teacher), ("labelenc", &self.labelenc), ("student", &self.student)] {
            s.validate().map_err(|e| invalid(field, e))?;
        }
        if self.data.train_scenes == 0 {
            return Err(invalid("data.train_scenes", "must be positive"));
        }
        if self.eval.thresholds.is_empty() || !self.eval.thresholds.iter().any(|&t| t == self.eval.tp_threshold) {
            return Err(invalid("eval", "tp_threshold must be one of the thresholds"));
        }
        if !(self.align_weight >= 0.0 && self.align_weight.is_finite()) {
            return Err(invalid("align_weight", "must be finite and non-negative"));
        }
        if !(self.distance_split > 0.0) {
            return Err(invalid("distance_split", "must be positive"));
        }
        if self.decode.k_max == 0 {
            return Err(invalid("decode.k_max", "must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> BevGridSpec {
        BevGridSpec::for_world(&self.world, self.grid_cells)
    }

    /// Near/far boundary in meters.
    pub fn split_distance(&self) -> f64 {
        self.distance_split * self.world.extent
    }

    pub fn teacher_config(&self) -> TeacherConfig {
        TeacherConfig {
            channels: self.model.teacher_channels,
            head_channels: self.model.head_channels,
            num_classes: self.world.num_classes,
        }
    }

    pub fn student_config(&self) -> StudentConfig {
        StudentConfig {
            panorama_channels: self.world.panorama_channels(),
            azimuth_bins: self.world.azimuth_bins,
            column_channels: self.model.column_channels,
            lift_channels: self.model.lift_channels,
            depth_bins: self.model.depth_bins,
            channels: self.model.student_channels,
            head_channels: self.model.head_channels,
            num_classes: self.world.num_classes,
        }
    }

    /// Adapter placement implied by the switches: with partitioning each
    /// adapter reads its own group, otherwise the whole feature.
    pub fn adapter_spec(&self) -> AdapterSpec {
        let s = &self.switches;
        let whole = 0..self.model.student_channels;
        let pick = |on: bool, r: std::ops::Range<usize>| {
            on.then(|| if s.use_partition { r } else { whole.clone() })
        };
        AdapterSpec {
            teacher_channels: self.model.teacher_channels,
            layers: self.model.adapter_layers,
            zero_init: self.model.adapter_zero_init,
            lidar_range: pick(s.use_lidar_distill, self.partition.lidar_range()),
            label_range: pick(s.use_label_distill, self.partition.label_range()),
        }
    }

    pub fn label_encoder_config(&self) -> LabelEncoderConfig {
        LabelEncoderConfig {
            embed_dim: self.model.embed_dim,
            hidden: self.model.label_hidden,
            channels: self.model.teacher_channels,
            num_classes: self.world.num_classes,
            position_blind: self.model.position_blind,
        }
    }

    pub fn labelenc_train_config(&self, variant: LabelEncoderVariant) -> LabelEncTrainConfig {
        LabelEncTrainConfig {
            variant,
            encoder: self.label_encoder_config(),
            head_channels: self.model.head_channels,
            schedule: self.labelenc.clone(),
            weights: self.loss,
            heatmap: self.heatmap,
            tau: self.tau,
            align_weight: self.align_weight,
            seed: self.seed,
        }
    }
}
