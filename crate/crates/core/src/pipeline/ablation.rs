use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::rundir::baseline;
use super::stages::{student_features, train_labelenc, train_student, train_teacher, Corpus, EvalReport, LabelEncReport};
use super::PipelineError;
use crate::detectors::Teacher;
use crate::distill::PartitionSpec;
use crate::evalkit::Metrics;
use crate::labelenc::{LabelEncoderModel, LabelEncoderVariant};
use crate::nn::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    /// Baseline, +LiDAR, +LiDAR+label, +partitioning.
    Components,
    /// Channel ratios lidar:label:image of 1:3:2, 3:1:2 and 2:2:2.
    ChannelRatio,
    /// Inverse, autoencoder and student-feature-supervised label encoders.
    LabelencVariant,
    /// Near/far buckets of LiDAR-only versus LiDAR+label distillation.
    Distance,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 4] = [Self::Components, Self::ChannelRatio, Self::LabelencVariant, Self::Distance];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Components => "components",
            Self::ChannelRatio => "channel_ratio",
            Self::LabelencVariant => "labelenc_variant",
            Self::Distance => "distance",
        }
    }
}

impl FromStr for AblationAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown ablation axis `{s}` (expected components, channel_ratio, labelenc_variant or distance)"))
    }
}

/// Channel ratios in `lidar:label:image` order.
pub const CHANNEL_RATIOS: [(usize, usize, usize); 3] = [(1, 3, 2), (3, 1, 2), (2, 2, 2)];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub seeds: Vec<SeedResult>,
}

impl AblationRow {
    fn mean(&self, f: impl Fn(&Metrics) -> f64) -> f64 {
        self.seeds.iter().map(|s| f(&s.metrics)).sum::<f64>() / self.seeds.len().max(1) as f64
    }

    pub fn mean_map(&self) -> f64 {
        self.mean(|m| m.map)
    }

    pub fn mean_nds(&self) -> f64 {
        self.mean(|m| m.nds)
    }

    pub fn mean_mate(&self) -> f64 {
        self.mean(|m| m.mate)
    }

    pub fn mean_mase(&self) -> f64 {
        self.mean(|m| m.mase)
    }

    /// Sample standard deviation of mAP across seeds (0 for one seed).
    pub fn std_map(&self) -> f64 {
        let n = self.seeds.len();
        if n < 2 {
            return 0.0;
        }
        let mu = self.mean_map();
        (self.seeds.iter().map(|s| (s.metrics.map - mu).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
    /// Teacher validation metrics per seed.
    pub teachers: Vec<SeedResult>,
    /// Autoencoder rows of every label encoder the grid trained.
    pub label_encoders: Vec<LabelEncReport>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.config == name)
    }

    /// Seed-mean table with header `config,mAP,NDS*,mATE,mASE`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("config,mAP,NDS*,mATE,mASE\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.config, r.mean_map(), r.mean_nds(), r.mean_mate(), r.mean_mase());
        }
        out
    }

    /// One line per (config, seed).
    pub fn to_seed_csv(&self) -> String {
        let mut out = String::from("config,seed,mAP,NDS*,mATE,mASE,mAOE,num_gt,num_pred\n");
        for r in &self.rows {
            for s in &r.seeds {
                let m = &s.metrics;
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{}",
                    r.config, s.seed, m.map, m.nds, m.mate, m.mase, m.maoe, m.num_gt, m.num_pred
                );
            }
        }
        out
    }
}

/// Shared state for ablation grids: one corpus, and every trained model
/// memoized so configs that coincide across axes are trained once.
pub struct Workbench<S> {
    pub base: ExperimentConfig,
    pub corpus: Corpus<S>,
    /// Progress messages go here when set.
    pub progress: Option<Box<dyn FnMut(&str)>>,
    teachers: HashMap<u64, (Teacher<S>, EvalReport)>,
    labelencs: HashMap<(u64, LabelEncoderVariant), (LabelEncoderModel<S>, LabelEncReport)>,
    baseline_features: HashMap<u64, Vec<Tensor<S>>>,
    students: HashMap<String, EvalReport>,
}

/// One row of the component ablation.
pub fn component_config(base: &ExperimentConfig, lidar: bool, label: bool, partition: bool) -> ExperimentConfig {
    let mut c = base.clone();
    c.switches.use_lidar_distill = lidar;
    c.switches.use_label_distill = label;
    c.switches.use_partition = partition;
    c
}

impl<S: Scalar> Workbench<S> {
    pub fn new(base: ExperimentConfig, corpus: Corpus<S>) -> Self {
        Self {
            base,
            corpus,
            progress: None,
            teachers: HashMap::new(),
            labelencs: HashMap::new(),
            baseline_features: HashMap::new(),
            students: HashMap::new(),
        }
    }

    fn say(&mut self, msg: &str) {
        if let Some(p) = self.progress.as_mut() {
            p(msg);
        }
    }

    fn seeded(&self, cfg: &ExperimentConfig, seed: u64) -> ExperimentConfig {
        ExperimentConfig { seed, ..cfg.clone() }
    }

    pub fn teacher(&mut self, seed: u64) -> Result<&(Teacher<S>, EvalReport), PipelineError> {
        if !self.teachers.contains_key(&seed) {
            self.say(&format!("teacher seed {seed}"));
            let cfg = self.seeded(&self.base, seed);
            let run = train_teacher(&cfg, &self.corpus)?;
            let report = run.report();
            self.teachers.insert(seed, (run.model, report));
        }
        Ok(&self.teachers[&seed])
    }

    fn baseline_features(&mut self, seed: u64) -> Result<(), PipelineError> {
        if !self.baseline_features.contains_key(&seed) {
            let cfg = self.seeded(&baseline(&self.base), seed);
            self.say(&format!("baseline student for label targets, seed {seed}"));
            let mut run = train_student(&cfg, &self.corpus, None, None)?;
            self.students.insert(cfg.hash(), run.stage.report());
            let feats = student_features(&mut run.stage.model, &self.corpus.train);
            self.baseline_features.insert(seed, feats);
        }
        Ok(())
    }

    pub fn label_encoder(
        &mut self,
        seed: u64,
        variant: LabelEncoderVariant,
    ) -> Result<&(LabelEncoderModel<S>, LabelEncReport), PipelineError> {
        if !self.labelencs.contains_key(&(seed, variant)) {
            if variant == LabelEncoderVariant::Inverse {
                self.teacher(seed)?;
            }
            if variant == LabelEncoderVariant::LabelencStyle {
                self.baseline_features(seed)?;
            }
            self.say(&format!("label encoder {} seed {seed}", variant.name()));
            let cfg = self.seeded(&self.base, seed);
            let teacher = (variant == LabelEncoderVariant::Inverse).then(|| &self.teachers[&seed].0);
            let feats = (variant == LabelEncoderVariant::LabelencStyle).then(|| self.baseline_features[&seed].as_slice());
            let run = train_labelenc(&cfg, &self.corpus, variant, teacher, feats)?;
            self.labelencs.insert((seed, variant), (run.model, run.report));
        }
        Ok(&self.labelencs[&(seed, variant)])
    }

    /// Validation report of a student trained with `cfg` (its own seed).
    pub fn student(&mut self, cfg: &ExperimentConfig) -> Result<EvalReport, PipelineError> {
        let key = cfg.hash();
        if let Some(r) = self.students.get(&key) {
            return Ok(*r);
        }
        let sw = cfg.switches.clone();
        if sw.use_lidar_distill {
            self.teacher(cfg.seed)?;
        }
        if sw.use_label_distill {
            self.label_encoder(cfg.seed, sw.label_encoder_variant)?;
        }
        self.say(&format!(
            "student seed {} lidar={} label={} partition={} variant={} split={}:{}:{}",
            cfg.seed,
            sw.use_lidar_distill,
            sw.use_label_distill,
            sw.use_partition,
            sw.label_encoder_variant.name(),
            cfg.partition.lidar,
            cfg.partition.label,
            cfg.partition.image
        ));
        let teacher = sw.use_lidar_distill.then(|| &self.teachers[&cfg.seed].0);
        let labelenc = sw.use_label_distill.then(|| &self.labelencs[&(cfg.seed, sw.label_encoder_variant)].0);
        let mut run = train_student(cfg, &self.corpus, teacher, labelenc)?;
        if key == self.seeded(&baseline(&self.base), cfg.seed).hash() && !self.baseline_features.contains_key(&cfg.seed) {
            let feats = student_features(&mut run.stage.model, &self.corpus.train);
            self.baseline_features.insert(cfg.seed, feats);
        }
        if !run.audit.intact() {
            return Err(PipelineError::FrozenMutated("distillation sources"));
        }
        let report = run.stage.report();
        self.students.insert(key, report);
        Ok(report)
    }

    /// Named configs of an axis, before seeding.
    pub fn grid(&self, axis: AblationAxis) -> Result<Vec<(String, ExperimentConfig)>, PipelineError> {
        let b = &self.base;
        Ok(match axis {
            AblationAxis::Components => vec![
                ("baseline".into(), component_config(b, false, false, false)),
                ("lidar".into(), component_config(b, true, false, false)),
                ("lidar+label".into(), component_config(b, true, true, false)),
                ("lidar+label+partition".into(), component_config(b, true, true, true)),
            ],
            AblationAxis::ChannelRatio => CHANNEL_RATIOS
                .iter()
                .map(|&(lidar, label, image)| {
                    let mut c = component_config(b, true, true, true);
                    c.partition = PartitionSpec::from_ratio((image, lidar, label), b.model.student_channels)
                        .map_err(|e| super::ConfigError::Invalid { field: "partition", message: e.to_string() })?;
                    Ok((format!("{lidar}:{label}:{image}"), c))
                })
                .collect::<Result<_, PipelineError>>()?,
            AblationAxis::LabelencVariant => LabelEncoderVariant::ALL
                .iter()
                .map(|&v| {
                    let mut c = component_config(b, true, true, true);
                    c.switches.label_encoder_variant = v;
                    (v.name().to_string(), c)
                })
                .collect(),
            AblationAxis::Distance => vec![
                ("lidar".into(), component_config(b, true, false, false)),
                ("lidar+label".into(), component_config(b, true, true, false)),
            ],
        })
    }

    pub fn run(&mut self, axis: AblationAxis, seeds: &[u64]) -> Result<AblationTable, PipelineError> {
        let grid = self.grid(axis)?;
        let mut rows = Vec::new();
        for (name, cfg) in &grid {
            let mut results = Vec::new();
            for &seed in seeds {
                results.push((seed, self.student(&self.seeded(cfg, seed))?));
            }
            if axis == AblationAxis::Distance {
                for (bucket, pick) in [("near", 0), ("far", 1)] {
                    let seeds = results
                        .iter()
                        .map(|&(seed, r)| SeedResult { seed, metrics: if pick == 0 { r.near } else { r.far } })
                        .collect();
                    rows.push(AblationRow { config: format!("{name}/{bucket}"), seeds });
                }
            } else {
                let seeds = results.iter().map(|&(seed, r)| SeedResult { seed, metrics: r.overall }).collect();
                rows.push(AblationRow { config: name.clone(), seeds });
            }
        }
        let mut teachers = Vec::new();
        for &seed in seeds {
            if let Some((_, r)) = self.teachers.get(&seed) {
                teachers.push(SeedResult { seed, metrics: r.overall });
            }
        }
        let mut label_encoders: Vec<LabelEncReport> = self
            .labelencs
            .iter()
            .filter(|((s, _), _)| seeds.contains(s))
            .map(|(_, (_, r))| r.clone())
            .collect();
        label_encoders.sort_by(|a, b| (a.seed, a.variant.name()).cmp(&(b.seed, b.variant.name())));
        Ok(AblationTable { axis, rows, teachers, label_encoders })
    }
}
