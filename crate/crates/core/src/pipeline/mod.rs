//! The staged training protocol: teacher pretraining, label-encoder
//! training against the frozen teacher head, then distillation into the
//! camera student, plus checkpoints, run directories and ablation grids.

mod ablation;
mod checkpoint;
mod config;
mod data;
mod rundir;
mod stages;

use std::path::Path;

pub use ablation::{AblationAxis, AblationRow, AblationTable, SeedResult, Workbench};
pub use checkpoint::{
    encode_checkpoint, load_labelenc, load_student, load_teacher, read_header, save_labelenc, save_student, save_teacher,
    CheckpointError, CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{ConfigError, DataConfig, ExperimentConfig, ModelConfig, Switches};
pub use data::{Dataset, Prepared, TRAIN_FILE, VAL_FILE, VAL_ID_OFFSET};
pub use rundir::{file_hash, metrics_csv, run_stage_labelenc, run_stage_student, run_stage_teacher, RunDir, RunManifest};
pub use stages::{
    evaluate_detections, masks_for, student_detect, student_features, student_step, teacher_detect, train_labelenc, train_student,
    train_teacher, Corpus, EvalReport, FrozenAudit, LabelEncReport, LabelEncRun, StageRun, StepError, StudentBatch, StudentRun,
};

use crate::bevgrid::BevError;
use crate::detectors::DetectorError;
use crate::distill::DistillError;
use crate::labelenc::LabelEncError;
use crate::synthworld::WorldError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Bev(#[from] BevError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    LabelEnc(#[from] LabelEncError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{stage} training diverged at epoch {epoch}: {source}")]
    Diverged { stage: &'static str, epoch: usize, source: DistillError },
    #[error("a {0} checkpoint is required by the enabled switches")]
    MissingCheckpoint(&'static str),
    #[error("frozen {0} parameters changed during training")]
    FrozenMutated(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    pub(crate) fn diverged(stage: &'static str, epoch: usize, source: DistillError) -> Self {
        Self::Diverged { stage, epoch, source }
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}
