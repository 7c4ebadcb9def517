use crate::bevgrid::{gt_heatmap, BevError, BevGridSpec, ForegroundMask, HeatmapParams};
use crate::detectors::{regress_target, DetectionMaps, MapsGrad, REGRESS_CHANNELS};
use crate::nn::Tensor;
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::synthworld::BoxLabel;

use super::LossWeights;

fn check_masks<S: Scalar>(x: &Tensor<S>, masks: &[ForegroundMask]) {
    assert_eq!(masks.len(), x.n, "one mask per sample");
    for m in masks {
        assert_eq!(m.mask.len(), x.h * x.w, "mask does not match feature grid");
    }
}

/// Masked feature imitation over a batch:
/// `sum_n sum_ij M_ij ||target_ij - pred_ij||^2 / sum_n N_p`, zero when no
/// sample has foreground. Returns the loss and its gradient w.r.t. `pred`.
pub fn feature_loss<S: Scalar>(target: &Tensor<S>, pred: &Tensor<S>, masks: &[ForegroundMask]) -> (f64, Tensor<S>) {
    assert_eq!(target.shape(), pred.shape(), "feature shapes differ");
    check_masks(pred, masks);
    let mut grad = Tensor::zeros_like(pred);
    let n_p: usize = masks.iter().map(|m| m.n_p).sum();
    if n_p == 0 {
        return (0.0, grad);
    }
    let hw = pred.h * pred.w;
    let inv = 1.0 / n_p as f64;
    let mut total = 0.0;
    for c in 0..pred.c {
        for (s, m) in masks.iter().enumerate() {
            let base = (c * pred.n + s) * hw;
            for (i, &wgt) in m.weights.iter().enumerate() {
                if wgt == 0.0 {
                    continue;
                }
                let d = pred.data[base + i].f64() - target.data[base + i].f64();
                total += wgt * d * d;
                grad.data[base + i] = S::of(2.0 * wgt * d * inv);
            }
        }
    }
    (total * inv, grad)
}

/// Response distillation terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ResponseLoss {
    pub cls: f64,
    pub bbox: f64,
}

impl ResponseLoss {
    pub fn total(&self) -> f64 {
        self.cls + self.bbox
    }
}

/// Quality focal loss of logit `z` against soft target `t`:
/// `|t - p|^gamma * BCE(p, t)`. Returns value and derivative in `z`.
pub fn quality_focal(z: f64, t: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(z);
    let bce = softplus(z) - t * z;
    let d = (p - t).abs();
    let w = d.powf(gamma);
    let dw = if d == 0.0 { 0.0 } else { gamma * d.powf(gamma - 1.0) * (p - t).signum() * p * (1.0 - p) };
    (w * bce, dw * bce + w * (p - t))
}

/// Soft-label distillation of the teacher's outputs, restricted to
/// ground-truth foreground cells: quality focal loss on the heatmap (teacher
/// probabilities as targets) plus L1 on the regression channels, each
/// divided by the number of foreground cells in the batch.
pub fn response_loss<S: Scalar>(
    teacher: &DetectionMaps<S>,
    student: &DetectionMaps<S>,
    masks: &[ForegroundMask],
    gamma: f64,
) -> (ResponseLoss, MapsGrad<S>) {
    assert_eq!(teacher.logits.shape(), student.logits.shape(), "heatmap shapes differ");
    assert_eq!(teacher.regress.shape(), student.regress.shape(), "regression shapes differ");
    check_masks(&student.logits, masks);
    let mut grad = MapsGrad::zeros_like(student);
    let fg: usize = masks.iter().map(|m| m.mask.iter().filter(|&&b| b).count()).sum();
    if fg == 0 {
        return (ResponseLoss::default(), grad);
    }
    let inv = 1.0 / fg as f64;
    let (n, hw) = (student.batch(), student.logits.h * student.logits.w);
    let mut out = ResponseLoss::default();
    for (s, m) in masks.iter().enumerate() {
        for (i, _) in m.mask.iter().enumerate().filter(|(_, &b)| b) {
            for c in 0..student.num_classes() {
                let idx = (c * n + s) * hw + i;
                let t = teacher.heatmap.data[idx].f64();
                let (v, dz) = quality_focal(student.logits.data[idx].f64(), t, gamma);
                out.cls += v * inv;
                grad.logits.data[idx] = S::of(dz * inv);
            }
            for c in 0..REGRESS_CHANNELS {
                let idx = (c * n + s) * hw + i;
                let d = student.regress.data[idx].f64() - teacher.regress.data[idx].f64();
                out.bbox += d.abs() * inv;
                grad.regress.data[idx] = S::of(sign(d) * inv);
            }
        }
    }
    (out, grad)
}

fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One object's regression target at its center cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CenterTarget {
    pub sample: usize,
    pub cell: usize,
    pub values: [f64; REGRESS_CHANNELS],
}

/// Everything the detection loss compares a batch of maps against.
#[derive(Clone, Debug, PartialEq)]
pub struct DetTargets {
    pub num_classes: usize,
    pub batch: usize,
    pub grid: BevGridSpec,
    /// Ground-truth heatmaps laid out like a `[m, n, H, W]` tensor.
    pub heatmap: Vec<f64>,
    pub centers: Vec<CenterTarget>,
    /// Nearest-hit depth bin per `(sample, column)`, `None` for background.
    pub depth: Vec<Option<usize>>,
}

impl DetTargets {
    pub fn build(
        boxes: &[&[BoxLabel]],
        num_classes: usize,
        grid: &BevGridSpec,
        params: &HeatmapParams,
    ) -> Result<Self, BevError> {
        let (n, hw) = (boxes.len(), grid.cells());
        let mut heatmap = vec![0.0; num_classes * n * hw];
        let mut centers = Vec::new();
        for (s, bs) in boxes.iter().enumerate() {
            let hm = gt_heatmap(bs, num_classes, grid, params)?;
            for c in 0..num_classes {
                heatmap[(c * n + s) * hw..][..hw].copy_from_slice(&hm.data[c * hw..][..hw]);
            }
            for b in bs.iter() {
                let (row, col) = grid.cell_of(b.x as f64, b.y as f64).expect("checked by gt_heatmap");
                centers.push(CenterTarget { sample: s, cell: grid.index(row, col), values: regress_target(b, grid, row, col) });
            }
        }
        Ok(Self { num_classes, batch: n, grid: *grid, heatmap, centers, depth: Vec::new() })
    }

    pub fn with_depth(mut self, depth: Vec<Option<usize>>) -> Self {
        self.depth = depth;
        self
    }
}

/// Detection loss terms, already weighted.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DetLoss {
    pub heatmap: f64,
    pub regress: f64,
    pub depth: f64,
}

impl DetLoss {
    pub fn total(&self) -> f64 {
        self.heatmap + self.regress + self.depth
    }
}

/// Penalty-reduced focal loss of logit `z` against Gaussian target `y`.
/// Returns value and derivative in `z`.
pub fn gaussian_focal(z: f64, y: f64, alpha: f64, beta: f64) -> (f64, f64) {
    let p = sigmoid(z);
    if y >= 1.0 {
        let sp = softplus(-z);
        let q = (1.0 - p).powf(alpha);
        (q * sp, -q * (alpha * p * sp + (1.0 - p)))
    } else {
        let sp = softplus(z);
        let k = (1.0 - y).powf(beta) * p.powf(alpha);
        (k * sp, k * (alpha * (1.0 - p) * sp + p))
    }
}

/// Supervised detection loss: Gaussian focal heatmap loss normalized by the
/// number of peak cells, L1 regression at object centers normalized by the
/// object count, and depth cross-entropy over columns that see an object
/// normalized by their count. Depth terms are skipped when `depth_logits`
/// is `None` (point-cloud and label-encoder training).
pub fn detection_loss<S: Scalar>(
    maps: &DetectionMaps<S>,
    depth_logits: Option<&Tensor<S>>,
    targets: &DetTargets,
    weights: &LossWeights,
) -> (DetLoss, MapsGrad<S>, Option<Tensor<S>>) {
    assert_eq!(maps.logits.data.len(), targets.heatmap.len(), "heatmap targets do not match maps");
    let mut grad = MapsGrad::zeros_like(maps);
    let mut out = DetLoss::default();

    let num_pos = targets.heatmap.iter().filter(|&&y| y >= 1.0).count().max(1) as f64;
    for (i, &y) in targets.heatmap.iter().enumerate() {
        let (v, dz) = gaussian_focal(maps.logits.data[i].f64(), y, weights.focal_alpha, weights.focal_beta);
        out.heatmap += v / num_pos;
        grad.logits.data[i] = S::of(dz / num_pos);
    }

    let (n, hw) = (maps.batch(), maps.regress.h * maps.regress.w);
    if !targets.centers.is_empty() {
        let k = weights.regress / targets.centers.len() as f64;
        for t in &targets.centers {
            for (c, &target) in t.values.iter().enumerate() {
                let idx = (c * n + t.sample) * hw + t.cell;
                let d = maps.regress.data[idx].f64() - target;
                out.regress += k * d.abs();
                grad.regress.data[idx] += S::of(k * sign(d));
            }
        }
    }

    let depth_grad = depth_logits.map(|logits| {
        let mut g = Tensor::zeros_like(logits);
        let p = logits.plane();
        assert_eq!(targets.depth.len(), p, "one depth target per column");
        let hits = targets.depth.iter().filter(|d| d.is_some()).count();
        if hits > 0 {
            let k = weights.depth / hits as f64;
            for (i, bin) in targets.depth.iter().enumerate() {
                let Some(bin) = *bin else { continue };
                let mx = (0..logits.c).map(|d| logits.data[d * p + i].f64()).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..logits.c).map(|d| (logits.data[d * p + i].f64() - mx).exp()).sum();
                let lse = mx + z.ln();
                out.depth += k * (lse - logits.data[bin * p + i].f64());
                for d in 0..logits.c {
                    let prob = (logits.data[d * p + i].f64() - lse).exp();
                    let onehot = if d == bin { 1.0 } else { 0.0 };
                    g.data[d * p + i] = S::of(k * (prob - onehot));
                }
            }
        }
        g
    });
    (out, grad, depth_grad)
}
