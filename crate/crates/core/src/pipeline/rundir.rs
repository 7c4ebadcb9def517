use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::{load_labelenc, load_teacher, save_labelenc, save_student, save_teacher};
use super::config::ExperimentConfig;
use super::stages::{
    student_features, train_labelenc, train_student, train_teacher, Corpus, EvalReport, LabelEncRun, StageRun,
    StudentRun,
};
use super::{write_atomic, PipelineError};
use crate::detectors::Teacher;
use crate::labelenc::LabelEncoderVariant;
use crate::scalar::Scalar;
use crate::train::EpochLog;

/// Identifies a run; written once, before any work.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub config_hash: String,
    pub seed: u64,
    pub revision: String,
    pub started_unix: u64,
    pub out_dir: String,
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, cfg: &ExperimentConfig, out: &Path) -> Self {
        Self {
            command: command.to_string(),
            config_path: config_path.map(|p| p.display().to_string()),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            revision: option_env!("LABELGUIDE_REVISION")
                .map(str::to_string)
                .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION"))),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            out_dir: out.display().to_string(),
        }
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_FILE: &str = "report.json";

/// An output directory holding one run's artifacts.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Creates the directory, then writes the manifest (refusing to replace
    /// an existing one) and the config snapshot.
    pub fn create(path: &Path, manifest: &RunManifest, cfg: &ExperimentConfig) -> std::io::Result<Self> {
        std::fs::create_dir_all(path)?;
        let mut f = OpenOptions::new().write(true).create_new(true).open(path.join(MANIFEST_FILE))?;
        f.write_all(&serde_json::to_vec_pretty(manifest).expect("manifest serializes"))?;
        f.sync_all()?;
        write_atomic(&path.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
        Ok(Self { path: path.to_path_buf() })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> std::io::Result<()> {
        write_atomic(&self.file(name), bytes)
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> std::io::Result<()> {
        self.write(name, &serde_json::to_vec_pretty(value).expect("report serializes"))
    }
}

/// SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Per-epoch CSV: losses, then validation metrics where evaluated.
pub fn metrics_csv(epochs: &[EpochLog], evals: &[(usize, EvalReport)]) -> String {
    let mut names: Vec<&str> = Vec::new();
    for e in epochs {
        for (n, _) in &e.components {
            if !names.contains(&n.as_str()) {
                names.push(n);
            }
        }
    }
    let mut out = String::from("epoch,lr,loss");
    for n in &names {
        let _ = write!(out, ",{n}");
    }
    out.push_str(",mAP,NDS*,mATE,mASE,mAOE\n");
    for e in epochs {
        let _ = write!(out, "{},{},{}", e.epoch, e.lr, e.loss);
        for n in &names {
            match e.components.iter().find(|(k, _)| k == n) {
                Some((_, v)) => {
                    let _ = write!(out, ",{v}");
                }
                None => out.push(','),
            }
        }
        match evals.iter().find(|(ep, _)| *ep == e.epoch) {
            Some((_, r)) => {
                let m = r.overall;
                let _ = write!(out, ",{},{},{},{},{}", m.map, m.nds, m.mate, m.mase, m.maoe);
            }
            None => out.push_str(",,,,,"),
        }
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct StageReport<'a> {
    stage: &'a str,
    seed: u64,
    report: EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    audit: Option<serde_json::Value>,
}

/// Stage 0 with artifacts: `teacher.ckpt`, `metrics.csv`, `report.json`.
pub fn run_stage_teacher<S: Scalar>(
    cfg: &ExperimentConfig,
    corpus: &Corpus<S>,
    run: &RunDir,
) -> Result<StageRun<Teacher<S>>, PipelineError> {
    let out = train_teacher(cfg, corpus)?;
    save_teacher(&run.file("teacher.ckpt"), cfg, &out.model)?;
    run.write("metrics.csv", metrics_csv(&out.epochs, &out.evals).as_bytes())?;
    run.write_json(REPORT_FILE, &StageReport { stage: "teacher", seed: cfg.seed, report: out.report(), audit: None })?;
    Ok(out)
}

/// Stage 1 with artifacts: `labelenc.ckpt`, `metrics.csv`, `report.json`
/// and the one-row `autoencoder.csv`. The student-feature-supervised
/// variant first trains a plain camera student for its targets.
pub fn run_stage_labelenc<S: Scalar>(
    cfg: &ExperimentConfig,
    corpus: &Corpus<S>,
    teacher_ckpt: Option<&Path>,
    run: &RunDir,
) -> Result<LabelEncRun<S>, PipelineError> {
    let variant = cfg.switches.label_encoder_variant;
    let teacher = match teacher_ckpt {
        Some(p) => Some(load_teacher::<S>(p)?.1),
        None if variant == LabelEncoderVariant::Inverse => return Err(PipelineError::MissingCheckpoint("teacher")),
        None => None,
    };
    let feats = if variant == LabelEncoderVariant::LabelencStyle {
        let mut base = train_student(&baseline(cfg), corpus, None, None)?.stage.model;
        Some(student_features(&mut base, &corpus.train))
    } else {
        None
    };
    let out = train_labelenc(cfg, corpus, variant, teacher.as_ref(), feats.as_deref())?;
    save_labelenc(&run.file("labelenc.ckpt"), cfg, &out.model)?;
    run.write("metrics.csv", metrics_csv(&out.epochs, &[]).as_bytes())?;
    run.write_json(REPORT_FILE, &out.report)?;
    let r = &out.report;
    let csv = format!("variant,seed,mAP,NDS*,mATE,mAOE\n{},{},{},{},{},{}\n", variant.name(), r.seed, r.map, r.nds, r.mate, r.maoe);
    run.write("autoencoder.csv", csv.as_bytes())?;
    Ok(out)
}

/// The same config with every distillation switch off. Partitioning is
/// meaningless without distillation and is switched off too, so that the
/// config hashes like the component-ablation baseline.
pub(crate) fn baseline(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.switches.use_lidar_distill = false;
    c.switches.use_label_distill = false;
    c.switches.use_partition = false;
    c
}

/// Stage 2 with artifacts: `student.ckpt`, `metrics.csv`, `report.json`
/// (including parameter and file hashes of the frozen checkpoints).
pub fn run_stage_student<S: Scalar>(
    cfg: &ExperimentConfig,
    corpus: &Corpus<S>,
    teacher_ckpt: Option<&Path>,
    labelenc_ckpt: Option<&Path>,
    run: &RunDir,
) -> Result<StudentRun<S>, PipelineError> {
    let sw = &cfg.switches;
    let teacher_ckpt = if sw.use_lidar_distill { teacher_ckpt } else { None };
    let labelenc_ckpt = if sw.use_label_distill { labelenc_ckpt } else { None };
    if sw.use_lidar_distill && teacher_ckpt.is_none() {
        return Err(PipelineError::MissingCheckpoint("teacher"));
    }
    if sw.use_label_distill && labelenc_ckpt.is_none() {
        return Err(PipelineError::MissingCheckpoint("labelenc"));
    }
    let hash = |p: Option<&Path>| p.map(file_hash).transpose();
    let files_before = (hash(teacher_ckpt)?, hash(labelenc_ckpt)?);
    let teacher = teacher_ckpt.map(load_teacher::<S>).transpose()?.map(|x| x.1);
    let labelenc = labelenc_ckpt.map(load_labelenc::<S>).transpose()?.map(|x| x.1);
    let out = train_student(cfg, corpus, teacher.as_ref(), labelenc.as_ref())?;
    let files_after = (hash(teacher_ckpt)?, hash(labelenc_ckpt)?);
    if files_before.0 != files_after.0 {
        return Err(PipelineError::FrozenMutated("teacher checkpoint"));
    }
    if files_before.1 != files_after.1 {
        return Err(PipelineError::FrozenMutated("labelenc checkpoint"));
    }
    save_student(&run.file("student.ckpt"), cfg, &out.stage.model)?;
    run.write("metrics.csv", metrics_csv(&out.stage.epochs, &out.stage.evals).as_bytes())?;
    let audit = serde_json::json!({
        "parameters": out.audit,
        "intact": out.audit.intact(),
        "teacher_file": files_after.0,
        "labelenc_file": files_after.1,
    });
    run.write_json(
        REPORT_FILE,
        &StageReport { stage: "student", seed: cfg.seed, report: out.stage.report(), audit: Some(audit) },
    )?;
    Ok(out)
}
