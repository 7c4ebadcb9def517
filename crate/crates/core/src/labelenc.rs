//! The label encoder: embeds each ground-truth box, rasterizes the
//! embeddings into BEV and refines them with a conv block, trained so that
//! a detection head can read the boxes back out.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bevgrid::{
    foreground_mask, gather_owned, gt_heatmap, scatter_owned, BevError, BevGridSpec, ForegroundMask, HeatmapParams,
    Placement,
};
use crate::detectors::{head_decode, DecodeConfig, Detection, Head};
use crate::distill::{detection_loss, feature_loss, DetTargets, LossWeights};
use crate::evalkit::{evaluate, EvalConfig, Metrics};
use crate::nn::{clip_grad_norm, composite_module, state_hash, AdamW, Conv2d, Layer, Module, Pass, Seq, Tensor};
use crate::scalar::Scalar;
use crate::synthworld::{BoxLabel, Scene};
use crate::train::{epoch_order, EpochLog, LossMeter, Schedule};

/// Box attributes fed to the box embedding.
pub const BOX_ATTRIBUTES: usize = 6;

#[derive(Debug, thiserror::Error)]
pub enum LabelEncError {
    #[error("the inverse variant needs the pretrained point-cloud head")]
    MissingTeacherHead,
    #[error("the student-feature-supervised variant needs baseline student features")]
    MissingStudentFeatures,
    #[error(transparent)]
    Bev(#[from] BevError),
    #[error("label encoder loss became non-finite at epoch {epoch} (component `{component}`)")]
    NonFinite { epoch: usize, component: &'static str },
    #[error("frozen head changed during training")]
    HeadMutated,
}

/// How the label encoder is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelEncoderVariant {
    /// Against the frozen pretrained point-cloud head.
    Inverse,
    /// Jointly with a freshly initialized head.
    Autoencoder,
    /// Autoencoder plus alignment of a projection of the label feature to a
    /// baseline camera student's BEV feature.
    LabelencStyle,
}

impl LabelEncoderVariant {
    pub const ALL: [LabelEncoderVariant; 3] = [Self::Inverse, Self::Autoencoder, Self::LabelencStyle];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Inverse => "inverse",
            Self::Autoencoder => "autoencoder",
            Self::LabelencStyle => "labelenc-style",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelEncoderConfig {
    /// Embedding width `d`.
    pub embed_dim: usize,
    pub hidden: usize,
    /// Output width, equal to the point-cloud feature width.
    pub channels: usize,
    pub num_classes: usize,
    /// Zero the position attributes so only `q` carries location.
    pub position_blind: bool,
}

/// Normalized attributes `(x, y)` in `[0, 1]` over the grid, log sizes and
/// the heading as `(sin, cos)`.
pub fn box_attributes(b: &BoxLabel, grid: &BevGridSpec, position_blind: bool) -> [f64; BOX_ATTRIBUTES] {
    let (sin, cos) = (b.yaw as f64).sin_cos();
    let (x, y) = if position_blind {
        (0.0, 0.0)
    } else {
        (
            (b.x as f64 - grid.origin.0) / (grid.width as f64 * grid.cell_size),
            (b.y as f64 - grid.origin.1) / (grid.height as f64 * grid.cell_size),
        )
    };
    [x, y, (b.w as f64).ln(), (b.l as f64).ln(), sin, cos]
}

#[derive(Clone, Debug)]
struct EncodeCache {
    placements: Vec<Placement>,
    offsets: Vec<usize>,
    objects: usize,
}

#[derive(Clone, Debug)]
pub struct LabelEncoder<S> {
    pub config: LabelEncoderConfig,
    pub grid: BevGridSpec,
    pub phi_cls: Seq<S>,
    pub phi_box: Seq<S>,
    pub f: Seq<S>,
    cache: Option<EncodeCache>,
}

composite_module!(LabelEncoder { phi_cls, phi_box, f });

fn mlp<S: Scalar>(cin: usize, hidden: usize, cout: usize, rng: &mut impl Rng) -> Seq<S> {
    Seq::new(vec![
        Layer::Conv(Conv2d::new(cin, hidden, 1, rng)),
        Layer::relu(),
        Layer::Conv(Conv2d::new(hidden, cout, 1, rng)),
    ])
}

impl<S: Scalar> LabelEncoder<S> {
    pub fn new(config: LabelEncoderConfig, grid: &BevGridSpec, rng: &mut impl Rng) -> Self {
        let (d, h, c) = (config.embed_dim, config.hidden, config.channels);
        Self {
            config,
            grid: *grid,
            phi_cls: mlp(config.num_classes, h, d, rng),
            phi_box: mlp(BOX_ATTRIBUTES, h, d, rng),
            f: Seq::conv_stack(&[d, c, c], true, true, rng),
            cache: None,
        }
    }

    /// Per-object embeddings `phi_cls(onehot) + phi_box(attrs)`, `[d, k, 1, 1]`.
    pub fn object_vectors(&mut self, boxes: &[BoxLabel], pass: Pass) -> Tensor<S> {
        let (m, k) = (self.config.num_classes, boxes.len());
        let mut onehot = Tensor::zeros(m, k, 1, 1);
        let mut attrs = Tensor::zeros(BOX_ATTRIBUTES, k, 1, 1);
        for (i, b) in boxes.iter().enumerate() {
            onehot.data[b.class_id as usize * k + i] = S::one();
            for (a, v) in box_attributes(b, &self.grid, self.config.position_blind).into_iter().enumerate() {
                attrs.data[a * k + i] = S::of(v);
            }
        }
        let mut v = self.phi_cls.forward(&onehot, pass);
        v.add_assign(&self.phi_box.forward(&attrs, pass));
        v
    }

    /// The rasterized embeddings before the conv block, `[d, n, H, W]`.
    pub fn label_map(&mut self, boxes: &[&[BoxLabel]], pass: Pass) -> Result<Tensor<S>, BevError> {
        let mut offsets = Vec::with_capacity(boxes.len());
        let mut flat = Vec::new();
        for bs in boxes {
            for (index, b) in bs.iter().enumerate() {
                if self.grid.cell_of(b.x as f64, b.y as f64).is_none() {
                    return Err(BevError::OutsideGrid { index, x: b.x, y: b.y });
                }
            }
            offsets.push(flat.len());
            flat.extend_from_slice(bs);
        }
        let vectors = self.object_vectors(&flat, pass);
        let placements: Vec<Placement> = boxes.iter().map(|bs| Placement::new(bs, &self.grid)).collect();
        let mut map = Tensor::zeros(self.config.embed_dim, boxes.len(), self.grid.height, self.grid.width);
        for (s, p) in placements.iter().enumerate() {
            scatter_owned(&vectors, offsets[s], p, &mut map, s);
        }
        self.cache = pass.record.then_some(EncodeCache { placements, offsets, objects: flat.len() });
        Ok(map)
    }

    /// `F_label` for a batch of box lists, `[C, n, H, W]`.
    pub fn encode(&mut self, boxes: &[&[BoxLabel]], pass: Pass) -> Result<Tensor<S>, BevError> {
        let map = self.label_map(boxes, pass)?;
        Ok(self.f.forward(&map, pass))
    }

    pub fn backward(&mut self, grad: &Tensor<S>) {
        let g_map = self.f.backward(grad);
        let cache = self.cache.take().expect("label encoder backward without recorded forward");
        let mut g_vec = Tensor::zeros(self.config.embed_dim, cache.objects, 1, 1);
        for (s, p) in cache.placements.iter().enumerate() {
            gather_owned(&g_map, s, p, &mut g_vec, cache.offsets[s]);
        }
        self.phi_cls.backward(&g_vec);
        self.phi_box.backward(&g_vec);
    }
}

/// A trained label encoder with the head it was trained against and, for
/// the student-feature-supervised variant, its alignment projection.
#[derive(Clone, Debug)]
pub struct LabelEncoderModel<S> {
    pub variant: LabelEncoderVariant,
    pub encoder: LabelEncoder<S>,
    pub head: Head<S>,
    pub projection: Option<Seq<S>>,
}

composite_module!(LabelEncoderModel { encoder, head, projection });

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelEncTrainConfig {
    pub variant: LabelEncoderVariant,
    pub encoder: LabelEncoderConfig,
    pub head_channels: usize,
    pub schedule: Schedule,
    pub weights: LossWeights,
    pub heatmap: HeatmapParams,
    pub tau: f64,
    /// Weight of the student-feature alignment term.
    pub align_weight: f64,
    pub seed: u64,
}

/// Result of label-encoder training.
pub struct LabelEncTraining<S> {
    pub model: LabelEncoderModel<S>,
    pub epochs: Vec<EpochLog>,
    /// Hash of the head before training; equals the final hash for the
    /// inverse variant.
    pub head_hash_before: String,
}

/// Trains a label encoder on `scenes`.
///
/// `teacher_head` is required for the inverse variant and is cloned and
/// frozen. `student_features` (one `[C_S, 1, H, W]` map per scene) are
/// required for the student-feature-supervised variant.
pub fn train_label_encoder<S: Scalar>(
    scenes: &[Scene],
    grid: &BevGridSpec,
    teacher_head: Option<&Head<S>>,
    student_features: Option<&[Tensor<S>]>,
    config: &LabelEncTrainConfig,
    rng: &mut impl Rng,
) -> Result<LabelEncTraining<S>, LabelEncError> {
    let m = config.encoder.num_classes;
    let encoder = LabelEncoder::new(config.encoder, grid, rng);
    let (head, frozen) = match config.variant {
        LabelEncoderVariant::Inverse => {
            let mut h = teacher_head.ok_or(LabelEncError::MissingTeacherHead)?.clone();
            h.net.frozen = true;
            (h, true)
        }
        _ => (Head::new(config.encoder.channels, config.head_channels, m, rng), false),
    };
    let projection = match config.variant {
        LabelEncoderVariant::LabelencStyle => {
            let feats = student_features.ok_or(LabelEncError::MissingStudentFeatures)?;
            assert_eq!(feats.len(), scenes.len(), "one student feature map per scene");
            let cs = feats.first().map_or(1, |f| f.c);
            Some(Seq::new(vec![Layer::Conv(Conv2d::new(config.encoder.channels, cs, 1, rng))]))
        }
        _ => None,
    };
    let mut model = LabelEncoderModel { variant: config.variant, encoder, head, projection };
    let head_hash_before = state_hash(&model.head);
    let (mut opt_enc, mut opt_head, mut opt_proj) =
        (AdamW::new(config.schedule.weight_decay), AdamW::new(config.schedule.weight_decay), AdamW::new(config.schedule.weight_decay));
    let mut epochs = Vec::new();
    for epoch in 0..config.schedule.epochs {
        let lr = config.schedule.lr_at(epoch);
        let mut meter = LossMeter::default();
        let order = epoch_order(scenes.len(), config.seed, epoch);
        for batch in order.chunks(config.schedule.batch_size) {
            let boxes: Vec<&[BoxLabel]> = batch.iter().map(|&i| scenes[i].boxes.as_slice()).collect();
            let targets = DetTargets::build(&boxes, m, grid, &config.heatmap)?;
            model.encoder.zero_grad();
            model.head.zero_grad();
            model.projection.zero_grad();
            let f_label = model.encoder.encode(&boxes, Pass::TRAIN)?;
            let head_pass = if frozen { Pass::FROZEN } else { Pass::TRAIN };
            let maps = model.head.forward(&f_label, head_pass);
            let (det, g_maps, _) = detection_loss(&maps, None, &targets, &config.weights);
            let mut g_feat = model.head.backward(&g_maps);
            let mut align = 0.0;
            if let (Some(proj), Some(feats)) = (model.projection.as_mut(), student_features) {
                let target = Tensor::stack(&batch.iter().map(|&i| feats[i].clone()).collect::<Vec<_>>());
                let masks = batch_masks(&boxes, m, grid, &config.heatmap, config.tau)?;
                let out = proj.forward(&f_label, Pass::TRAIN);
                let (v, mut g) = feature_loss(&target, &out, &masks);
                g.scale(S::of(config.align_weight));
                g_feat.add_assign(&proj.backward(&g));
                align = v;
            }
            let total = det.total() + config.align_weight * align;
            if !total.is_finite() {
                let component = if det.total().is_finite() { "alignment" } else { "detection" };
                return Err(LabelEncError::NonFinite { epoch, component });
            }
            model.encoder.backward(&g_feat);
            if config.schedule.grad_clip > 0.0 {
                clip_grad_norm(&mut model.encoder, config.schedule.grad_clip);
            }
            opt_enc.step(&mut model.encoder, lr);
            if !frozen {
                opt_head.step(&mut model.head, lr);
            }
            if let Some(p) = model.projection.as_mut() {
                opt_proj.step(p, lr);
            }
            meter.add(total, &[("heatmap", det.heatmap), ("regress", det.regress), ("align", align)]);
        }
        epochs.push(meter.finish(epoch, lr));
    }
    if frozen && state_hash(&model.head) != head_hash_before {
        return Err(LabelEncError::HeadMutated);
    }
    Ok(LabelEncTraining { model, epochs, head_hash_before })
}

/// Foreground masks of a batch of box lists.
pub fn batch_masks(
    boxes: &[&[BoxLabel]],
    num_classes: usize,
    grid: &BevGridSpec,
    params: &HeatmapParams,
    tau: f64,
) -> Result<Vec<ForegroundMask>, BevError> {
    boxes.iter().map(|bs| Ok(foreground_mask(&gt_heatmap(bs, num_classes, grid, params)?, tau))).collect()
}

/// Decodes `head(encoder(labels))` for every scene.
pub fn reconstruct<S: Scalar>(
    model: &mut LabelEncoderModel<S>,
    scenes: &[Scene],
    decode: &DecodeConfig,
    batch_size: usize,
) -> Result<Vec<Vec<Detection>>, BevError> {
    let grid = model.encoder.grid;
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(batch_size.max(1)) {
        let boxes: Vec<&[BoxLabel]> = chunk.iter().map(|s| s.boxes.as_slice()).collect();
        let f = model.encoder.encode(&boxes, Pass::INFER)?;
        let maps = model.head.forward(&f, Pass::INFER);
        out.extend(head_decode(&maps, &grid, decode.score_thresh, decode.k_max));
    }
    Ok(out)
}

/// How well boxes survive the round trip through encoder and head.
pub fn autoencoder_eval<S: Scalar>(
    model: &mut LabelEncoderModel<S>,
    scenes: &[Scene],
    decode: &DecodeConfig,
    eval: &EvalConfig,
    batch_size: usize,
) -> Result<Metrics, BevError> {
    let dets = reconstruct(model, scenes, decode, batch_size)?;
    let pairs: Vec<_> = dets.into_iter().zip(scenes).map(|(d, s)| (d, s.boxes.clone())).collect();
    Ok(evaluate(&pairs, model.encoder.config.num_classes, eval))
}
