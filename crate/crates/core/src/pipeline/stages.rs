use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::{Dataset, Prepared};
use super::PipelineError;
use crate::bevgrid::{foreground_mask, gt_heatmap, soft_foreground_mask, BevError, ForegroundMask};
use crate::detectors::{head_decode, AdaptTarget, DetectionMaps, Detection, DetectorError, Student, Teacher};
use crate::distill::{detection_loss, feature_loss, response_loss, total_loss, DetTargets, DistillError, LossTerms};
use crate::evalkit::{bucket_by_distance, match_detections, summarize, Metrics};
use crate::labelenc::{autoencoder_eval, train_label_encoder, LabelEncoderModel, LabelEncoderVariant};
use crate::nn::{clip_grad_norm, state_hash, AdamW, Module, Pass, Tensor};
use crate::scalar::Scalar;
use crate::synthworld::{mix_seed, BoxLabel, Scene};
use crate::train::{epoch_order, EpochLog, LossMeter};

const TEACHER_STREAM: u64 = 0x5445_4143;
const LABELENC_STREAM: u64 = 0x4c41_4245;
const STUDENT_STREAM: u64 = 0x5354_5544;

fn stage_rng(cfg: &ExperimentConfig, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, stream]))
}

/// A dataset with its network inputs computed once.
#[derive(Clone, Debug)]
pub struct Corpus<S> {
    pub data: Dataset,
    pub train: Prepared<S>,
    pub val: Prepared<S>,
}

impl<S: Scalar> Corpus<S> {
    pub fn new(data: Dataset, cfg: &ExperimentConfig) -> Self {
        let grid = cfg.grid();
        let train = Prepared::new(&data.train, &data.world, &grid, cfg.model.depth_bins);
        let val = Prepared::new(&data.val, &data.world, &grid, cfg.model.depth_bins);
        Self { data, train, val }
    }
}

/// Overall metrics plus the near/far split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Metrics,
    pub near: Metrics,
    pub far: Metrics,
}

pub fn evaluate_detections(dets: Vec<Vec<Detection>>, scenes: &[Scene], cfg: &ExperimentConfig) -> EvalReport {
    let pairs: Vec<_> = dets.into_iter().zip(scenes).map(|(d, s)| (d, s.boxes.clone())).collect();
    let result = match_detections(&pairs, cfg.world.num_classes, &cfg.eval);
    let (near, far) = bucket_by_distance(&result, cfg.split_distance());
    EvalReport { overall: summarize(&result), near, far }
}

fn decode_all<S: Scalar>(
    n: usize,
    cfg: &ExperimentConfig,
    mut forward: impl FnMut(&[usize]) -> DetectionMaps<S>,
) -> Vec<Vec<Detection>> {
    let grid = cfg.grid();
    let ids: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(n);
    for chunk in ids.chunks(cfg.student.batch_size.max(8)) {
        out.extend(head_decode(&forward(chunk), &grid, cfg.decode.score_thresh, cfg.decode.k_max));
    }
    out
}

pub fn teacher_detect<S: Scalar>(teacher: &mut Teacher<S>, inputs: &Prepared<S>, cfg: &ExperimentConfig) -> Vec<Vec<Detection>> {
    decode_all(inputs.lidar.len(), cfg, |ids| teacher.forward(&inputs.lidar_batch(ids), Pass::INFER).maps)
}

pub fn student_detect<S: Scalar>(student: &mut Student<S>, inputs: &Prepared<S>, cfg: &ExperimentConfig) -> Vec<Vec<Detection>> {
    decode_all(inputs.panorama.len(), cfg, |ids| student.forward(&inputs.panorama_batch(ids), Pass::INFER).maps)
}

/// `F_image` of every scene, one `[C_S, 1, H, W]` map each.
pub fn student_features<S: Scalar>(student: &mut Student<S>, inputs: &Prepared<S>) -> Vec<Tensor<S>> {
    let ids: Vec<usize> = (0..inputs.panorama.len()).collect();
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(16) {
        let f = student.forward(&inputs.panorama_batch(chunk), Pass::INFER).features;
        out.extend((0..chunk.len()).map(|n| f.sample(n)));
    }
    out
}

/// Foreground masks of a batch, binary or heatmap-weighted.
pub fn masks_for(boxes: &[&[BoxLabel]], cfg: &ExperimentConfig) -> Result<Vec<ForegroundMask>, BevError> {
    let grid = cfg.grid();
    boxes
        .iter()
        .map(|bs| {
            let hm = gt_heatmap(bs, cfg.world.num_classes, &grid, &cfg.heatmap)?;
            Ok(if cfg.soft_mask { soft_foreground_mask(&hm, cfg.tau) } else { foreground_mask(&hm, cfg.tau) })
        })
        .collect()
}

fn batch_boxes<'a>(scenes: &'a [Scene], ids: &[usize]) -> Vec<&'a [BoxLabel]> {
    ids.iter().map(|&i| scenes[i].boxes.as_slice()).collect()
}

fn due(cfg: &ExperimentConfig, epoch: usize, epochs: usize) -> bool {
    epoch + 1 == epochs || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0)
}

/// Output of a detector training stage.
#[derive(Clone, Debug)]
pub struct StageRun<M> {
    pub model: M,
    pub epochs: Vec<EpochLog>,
    /// Validation reports by epoch.
    pub evals: Vec<(usize, EvalReport)>,
}

impl<M> StageRun<M> {
    pub fn report(&self) -> EvalReport {
        self.evals.last().expect("every stage evaluates after its last epoch").1
    }
}

/// Stage 0: the point-cloud detector trained with the detection loss.
pub fn train_teacher<S: Scalar>(cfg: &ExperimentConfig, corpus: &Corpus<S>) -> Result<StageRun<Teacher<S>>, PipelineError> {
    let mut rng = stage_rng(cfg, TEACHER_STREAM);
    let mut teacher = Teacher::new(cfg.teacher_config(), &mut rng);
    let grid = cfg.grid();
    let sched = &cfg.teacher;
    let mut opt = AdamW::new(sched.weight_decay);
    let (mut epochs, mut evals) = (Vec::new(), Vec::new());
    for epoch in 0..sched.epochs {
        let lr = sched.lr_at(epoch);
        let mut meter = LossMeter::default();
        for ids in epoch_order(corpus.data.train.len(), mix_seed(&[cfg.seed, TEACHER_STREAM]), epoch).chunks(sched.batch_size) {
            let boxes = batch_boxes(&corpus.data.train, ids);
            let targets = DetTargets::build(&boxes, cfg.world.num_classes, &grid, &cfg.heatmap)?;
            teacher.zero_grad();
            let out = teacher.forward(&corpus.train.lidar_batch(ids), Pass::TRAIN);
            let (det, g, _) = detection_loss(&out.maps, None, &targets, &cfg.loss);
            let total = total_loss(&LossTerms { detection: det.total(), ..Default::default() }, &cfg.loss)
                .map_err(|e| PipelineError::diverged("teacher", epoch, e))?;
            teacher.backward(&g);
            clip(&mut teacher, sched.grad_clip);
            opt.step(&mut teacher, lr);
            meter.add(total, &[("heatmap", det.heatmap), ("regress", det.regress)]);
        }
        epochs.push(meter.finish(epoch, lr));
        if due(cfg, epoch, sched.epochs) {
            let dets = teacher_detect(&mut teacher, &corpus.val, cfg);
            evals.push((epoch, evaluate_detections(dets, &corpus.data.val, cfg)));
        }
    }
    if evals.is_empty() {
        let dets = teacher_detect(&mut teacher, &corpus.val, cfg);
        evals.push((0, evaluate_detections(dets, &corpus.data.val, cfg)));
    }
    Ok(StageRun { model: teacher, epochs, evals })
}

fn clip<S: Scalar>(module: &mut dyn Module<S>, max_norm: f64) {
    if max_norm > 0.0 {
        clip_grad_norm(module, max_norm);
    }
}

/// Output of stage 1.
#[derive(Clone, Debug)]
pub struct LabelEncRun<S> {
    pub model: LabelEncoderModel<S>,
    pub epochs: Vec<EpochLog>,
    /// Boxes decoded back out of the encoded validation labels.
    pub report: LabelEncReport,
}

/// One row of the autoencoder table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelEncReport {
    pub variant: LabelEncoderVariant,
    pub seed: u64,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "NDS*")]
    pub nds: f64,
    #[serde(rename = "mATE")]
    pub mate: f64,
    #[serde(rename = "mAOE")]
    pub maoe: f64,
}

/// Stage 1: the label encoder for `variant`. The inverse variant needs the
/// teacher; the student-feature-supervised one needs baseline student
/// features of the training scenes.
pub fn train_labelenc<S: Scalar>(
    cfg: &ExperimentConfig,
    corpus: &Corpus<S>,
    variant: LabelEncoderVariant,
    teacher: Option<&Teacher<S>>,
    student_features: Option<&[Tensor<S>]>,
) -> Result<LabelEncRun<S>, PipelineError> {
    if variant == LabelEncoderVariant::Inverse && teacher.is_none() {
        return Err(PipelineError::MissingCheckpoint("teacher"));
    }
    let mut rng = stage_rng(cfg, LABELENC_STREAM);
    let train_cfg = cfg.labelenc_train_config(variant);
    let before = teacher.map(|t| state_hash(&t.head));
    let trained = train_label_encoder(
        &corpus.data.train,
        &cfg.grid(),
        teacher.map(|t| &t.head),
        student_features,
        &train_cfg,
        &mut rng,
    )?;
    if let (Some(t), Some(h)) = (teacher, before) {
        if state_hash(&t.head) != h {
            return Err(PipelineError::FrozenMutated("teacher"));
        }
    }
    let mut model = trained.model;
    let m = autoencoder_eval(&mut model, &corpus.data.val, &cfg.decode, &cfg.eval, 16)?;
    let report = LabelEncReport { variant, seed: cfg.seed, map: m.map, nds: m.nds, mate: m.mate, maoe: m.maoe };
    Ok(LabelEncRun { model, epochs: trained.epochs, report })
}

/// Hashes of the frozen models before and after student training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrozenAudit {
    pub teacher_before: Option<String>,
    pub teacher_after: Option<String>,
    pub labelenc_before: Option<String>,
    pub labelenc_after: Option<String>,
}

impl FrozenAudit {
    pub fn intact(&self) -> bool {
        self.teacher_before == self.teacher_after && self.labelenc_before == self.labelenc_after
    }
}

/// Output of stage 2.
#[derive(Clone, Debug)]
pub struct StudentRun<S> {
    pub stage: StageRun<Student<S>>,
    pub audit: FrozenAudit,
}

/// Inputs of one student step.
pub struct StudentBatch<'a, S> {
    pub boxes: Vec<&'a [BoxLabel]>,
    pub panorama: Tensor<S>,
    pub lidar: Tensor<S>,
    pub depth: Vec<Option<usize>>,
}

impl<'a, S: Scalar> StudentBatch<'a, S> {
    pub fn new(scenes: &'a [Scene], inputs: &Prepared<S>, ids: &[usize]) -> Self {
        Self {
            boxes: batch_boxes(scenes, ids),
            panorama: inputs.panorama_batch(ids),
            lidar: inputs.lidar_batch(ids),
            depth: inputs.depth_batch(ids),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StepError {
    #[error(transparent)]
    Bev(#[from] BevError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    NonFinite(DistillError),
}

impl StepError {
    fn at_epoch(self, epoch: usize) -> PipelineError {
        match self {
            StepError::Bev(e) => e.into(),
            StepError::Detector(e) => e.into(),
            StepError::NonFinite(e) => PipelineError::diverged("student", epoch, e),
        }
    }
}

/// Loss of one student step, with its gradient accumulated into `student`:
/// detection and depth loss plus every distillation term whose source is
/// given. Returns the weighted total and the unweighted components.
pub fn student_step<S: Scalar>(
    cfg: &ExperimentConfig,
    student: &mut Student<S>,
    teacher: Option<&mut Teacher<S>>,
    labelenc: Option<&mut LabelEncoderModel<S>>,
    batch: &StudentBatch<S>,
) -> Result<(f64, Vec<(&'static str, f64)>), StepError> {
    let w = &cfg.loss;
    let grid = cfg.grid();
    let targets = DetTargets::build(&batch.boxes, cfg.world.num_classes, &grid, &cfg.heatmap)?.with_depth(batch.depth.clone());
    let out = student.forward(&batch.panorama, Pass::TRAIN);
    let (det, mut g_maps, g_depth) = detection_loss(&out.maps, Some(&out.depth_logits), &targets, w);
    let mut terms = LossTerms { detection: det.total(), ..Default::default() };
    let mut g_feat: Option<Tensor<S>> = None;
    let mut add_feat = |g: Tensor<S>| match g_feat.as_mut() {
        Some(acc) => acc.add_assign(&g),
        None => g_feat = Some(g),
    };
    let masks = if teacher.is_some() || labelenc.is_some() { masks_for(&batch.boxes, cfg)? } else { Vec::new() };
    if let Some(t) = teacher {
        let t_out = t.forward(&batch.lidar, Pass::INFER);
        let adapted = student.adapt(AdaptTarget::Lidar, &out.features, Pass::TRAIN)?;
        let (v, mut g) = feature_loss(&t_out.features, &adapted, &masks);
        g.scale(S::of(w.lambda_lidar));
        add_feat(student.adapt_backward(AdaptTarget::Lidar, &g)?);
        terms.lidar_feature = Some(v);
        let (resp, g_resp) = response_loss(&t_out.maps, &out.maps, &masks, w.quality_gamma);
        g_maps.add_scaled(&g_resp, S::of(w.lambda_response));
        terms.response = Some(resp.total());
    }
    if let Some(l) = labelenc {
        let f_label = l.encoder.encode(&batch.boxes, Pass::INFER)?;
        let adapted = student.adapt(AdaptTarget::Label, &out.features, Pass::TRAIN)?;
        let (v, mut g) = feature_loss(&f_label, &adapted, &masks);
        g.scale(S::of(w.lambda_label));
        add_feat(student.adapt_backward(AdaptTarget::Label, &g)?);
        terms.label_feature = Some(v);
    }
    let total = total_loss(&terms, w).map_err(StepError::NonFinite)?;
    student.backward(&g_maps, g_feat.as_ref(), g_depth.as_ref());
    let mut parts = vec![("heatmap", det.heatmap), ("regress", det.regress), ("depth", det.depth)];
    parts.extend(terms.lidar_feature.map(|v| ("lidar_feature", v)));
    parts.extend(terms.response.map(|v| ("response", v)));
    parts.extend(terms.label_feature.map(|v| ("label_feature", v)));
    Ok((total, parts))
}

/// Stage 2: the camera student, distilled per the config switches from a
/// frozen teacher and a frozen label encoder.
pub fn train_student<S: Scalar>(
    cfg: &ExperimentConfig,
    corpus: &Corpus<S>,
    teacher: Option<&Teacher<S>>,
    labelenc: Option<&LabelEncoderModel<S>>,
) -> Result<StudentRun<S>, PipelineError> {
    let sw = &cfg.switches;
    let mut frozen_teacher = match (sw.use_lidar_distill, teacher) {
        (true, None) => return Err(PipelineError::MissingCheckpoint("teacher")),
        (true, Some(t)) => {
            let mut t = t.clone();
            t.freeze();
            Some(t)
        }
        (false, _) => None,
    };
    let mut frozen_label = match (sw.use_label_distill, labelenc) {
        (true, None) => return Err(PipelineError::MissingCheckpoint("labelenc")),
        (true, Some(l)) => Some(l.clone()),
        (false, _) => None,
    };
    let mut audit = FrozenAudit {
        teacher_before: frozen_teacher.as_ref().map(|t| state_hash(t)),
        labelenc_before: frozen_label.as_ref().map(|l| state_hash(l)),
        ..Default::default()
    };
    let check = |audit: &mut FrozenAudit, t: &Option<Teacher<S>>, l: &Option<LabelEncoderModel<S>>| {
        audit.teacher_after = t.as_ref().map(|t| state_hash(t));
        audit.labelenc_after = l.as_ref().map(|l| state_hash(l));
        if audit.teacher_before != audit.teacher_after {
            return Err(PipelineError::FrozenMutated("teacher"));
        }
        if audit.labelenc_before != audit.labelenc_after {
            return Err(PipelineError::FrozenMutated("labelenc"));
        }
        Ok(())
    };

    let mut rng = stage_rng(cfg, STUDENT_STREAM);
    let grid = cfg.grid();
    let mut student = Student::new(cfg.student_config(), &corpus.data.world, &grid, &cfg.adapter_spec(), &mut rng);
    let sched = &cfg.student;
    let mut opt = AdamW::new(sched.weight_decay);
    let (mut epochs, mut evals) = (Vec::new(), Vec::new());
    for epoch in 0..sched.epochs {
        let lr = sched.lr_at(epoch);
        let mut meter = LossMeter::default();
        for ids in epoch_order(corpus.data.train.len(), mix_seed(&[cfg.seed, STUDENT_STREAM]), epoch).chunks(sched.batch_size) {
            let batch = StudentBatch::new(&corpus.data.train, &corpus.train, ids);
            student.zero_grad();
            let (total, parts) = student_step(cfg, &mut student, frozen_teacher.as_mut(), frozen_label.as_mut(), &batch)
                .map_err(|e| e.at_epoch(epoch))?;
            clip(&mut student, sched.grad_clip);
            opt.step(&mut student, lr);
            meter.add(total, &parts);
        }
        epochs.push(meter.finish(epoch, lr));
        check(&mut audit, &frozen_teacher, &frozen_label)?;
        if due(cfg, epoch, sched.epochs) {
            let dets = student_detect(&mut student, &corpus.val, cfg);
            evals.push((epoch, evaluate_detections(dets, &corpus.data.val, cfg)));
        }
    }
    if sched.epochs == 0 {
        check(&mut audit, &frozen_teacher, &frozen_label)?;
        let dets = student_detect(&mut student, &corpus.val, cfg);
        evals.push((0, evaluate_detections(dets, &corpus.data.val, cfg)));
    }
    Ok(StudentRun { stage: StageRun { model: student, epochs, evals }, audit })
}
