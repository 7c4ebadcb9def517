use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bevgrid::{gt_heatmap, BevError, BevGridSpec, HeatmapParams};
use crate::nn::{composite_module, Conv2d, Layer, Pass, Seq, Tensor};
use crate::scalar::{sigmoid, Scalar};
use crate::synthworld::BoxLabel;

/// Regression channels: center offset within the cell (cells), log size,
/// heading as raw `(sin, cos)`.
pub const REGRESS_CHANNELS: usize = 6;

/// Initial heatmap bias: sigmoid(-2.19) ~ 0.1.
const HEAT_BIAS: f64 = -2.19;

/// Logit used when turning a target probability of exactly 0 or 1 into maps.
pub const LOGIT_CLAMP: f64 = 40.0;

/// Output of a center head for a batch: per-class heatmap and dense box
/// regression, all `[channels, n, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionMaps<S> {
    pub logits: Tensor<S>,
    /// `sigmoid(logits)`.
    pub heatmap: Tensor<S>,
    pub regress: Tensor<S>,
}

impl<S: Scalar> DetectionMaps<S> {
    pub fn from_logits(logits: Tensor<S>, regress: Tensor<S>) -> Self {
        assert_eq!(regress.c, REGRESS_CHANNELS);
        assert_eq!((logits.n, logits.h, logits.w), (regress.n, regress.h, regress.w));
        let heatmap = logits.map(sigmoid);
        Self { logits, heatmap, regress }
    }

    pub fn num_classes(&self) -> usize {
        self.logits.c
    }

    pub fn batch(&self) -> usize {
        self.logits.n
    }

    pub fn sample(&self, n: usize) -> Self {
        Self { logits: self.logits.sample(n), heatmap: self.heatmap.sample(n), regress: self.regress.sample(n) }
    }

    pub fn stack(parts: &[Self]) -> Self {
        let logits: Vec<_> = parts.iter().map(|p| p.logits.clone()).collect();
        let heatmap: Vec<_> = parts.iter().map(|p| p.heatmap.clone()).collect();
        let regress: Vec<_> = parts.iter().map(|p| p.regress.clone()).collect();
        Self { logits: Tensor::stack(&logits), heatmap: Tensor::stack(&heatmap), regress: Tensor::stack(&regress) }
    }

    pub fn cast<T: Scalar>(&self) -> DetectionMaps<T> {
        DetectionMaps { logits: self.logits.cast(), heatmap: self.heatmap.cast(), regress: self.regress.cast() }
    }

    pub fn is_finite(&self) -> bool {
        self.logits.is_finite() && self.regress.is_finite()
    }
}

/// Gradient of a loss with respect to the head outputs.
#[derive(Clone, Debug)]
pub struct MapsGrad<S> {
    pub logits: Tensor<S>,
    pub regress: Tensor<S>,
}

impl<S: Scalar> MapsGrad<S> {
    pub fn zeros_like(maps: &DetectionMaps<S>) -> Self {
        Self { logits: Tensor::zeros_like(&maps.logits), regress: Tensor::zeros_like(&maps.regress) }
    }

    pub fn add_scaled(&mut self, other: &Self, k: S) {
        self.logits.add_scaled(&other.logits, k);
        self.regress.add_scaled(&other.regress, k);
    }
}

/// Center head: two 3x3 convolutions with ReLU, then a 1x1 projection to
/// `m` heatmap logits and the regression channels.
#[derive(Clone, Debug)]
pub struct Head<S> {
    pub net: Seq<S>,
    pub num_classes: usize,
}

composite_module!(Head { net });

impl<S: Scalar> Head<S> {
    pub fn new(cin: usize, hidden: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        let mut out = Conv2d::new(hidden, num_classes + REGRESS_CHANNELS, 1, rng);
        for b in &mut out.bias.value[..num_classes] {
            *b = S::of(HEAT_BIAS);
        }
        let net = Seq::new(vec![
            Layer::Conv(Conv2d::new(cin, hidden, 3, rng)),
            Layer::relu(),
            Layer::Conv(Conv2d::new(hidden, hidden, 3, rng)),
            Layer::relu(),
            Layer::Conv(out),
        ]);
        Self { net, num_classes }
    }

    pub fn in_channels(&self) -> usize {
        match &self.net.layers[0] {
            Layer::Conv(c) => c.cin,
            _ => unreachable!("head starts with a convolution"),
        }
    }

    pub fn forward(&mut self, features: &Tensor<S>, pass: Pass) -> DetectionMaps<S> {
        let out = self.net.forward(features, pass);
        let m = self.num_classes;
        DetectionMaps::from_logits(out.slice_channels(0..m), out.slice_channels(m..m + REGRESS_CHANNELS))
    }

    /// Returns the gradient with respect to the head input.
    pub fn backward(&mut self, grad: &MapsGrad<S>) -> Tensor<S> {
        let g = Tensor::concat_channels(&[&grad.logits, &grad.regress]);
        self.net.backward(&g)
    }
}

/// Regression target for one box at its center cell.
pub fn regress_target(b: &BoxLabel, grid: &BevGridSpec, row: usize, col: usize) -> [f64; REGRESS_CHANNELS] {
    let (sin, cos) = (b.yaw as f64).sin_cos();
    [
        (b.x as f64 - grid.origin.0) / grid.cell_size - (col as f64 + 0.5),
        (b.y as f64 - grid.origin.1) / grid.cell_size - (row as f64 + 0.5),
        (b.w as f64).ln(),
        (b.l as f64).ln(),
        sin,
        cos,
    ]
}

/// The maps a perfect head would output for `boxes`: the ground-truth
/// heatmap (as clamped logits) and exact regression targets at every
/// object's center cell, zero elsewhere.
pub fn encode_maps<S: Scalar>(
    boxes: &[BoxLabel],
    num_classes: usize,
    grid: &BevGridSpec,
    params: &HeatmapParams,
) -> Result<DetectionMaps<S>, BevError> {
    let hm = gt_heatmap(boxes, num_classes, grid, params)?;
    let logits = hm
        .data
        .iter()
        .map(|&p| {
            let z = if p <= 0.0 { -LOGIT_CLAMP } else if p >= 1.0 { LOGIT_CLAMP } else { (p / (1.0 - p)).ln() };
            S::of(z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))
        })
        .collect();
    let logits = Tensor::from_vec(num_classes, 1, grid.height, grid.width, logits);
    let mut regress = Tensor::zeros(REGRESS_CHANNELS, 1, grid.height, grid.width);
    for b in boxes {
        let (row, col) = grid.cell_of(b.x as f64, b.y as f64).expect("checked by gt_heatmap");
        for (ch, v) in regress_target(b, grid, row, col).into_iter().enumerate() {
            regress.set(ch, 0, row, col, S::of(v));
        }
    }
    Ok(DetectionMaps::from_logits(logits, regress))
}

/// Peak extraction settings for [`head_decode`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub score_thresh: f64,
    pub k_max: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { score_thresh: 0.1, k_max: 50 }
    }
}

/// A decoded box with its heatmap score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: BoxLabel,
    pub score: f64,
}

/// Local 3x3 maxima of each class heatmap above `score_thresh`, best
/// `k_max` per sample, boxes read from the regression channels.
pub fn head_decode<S: Scalar>(
    maps: &DetectionMaps<S>,
    grid: &BevGridSpec,
    score_thresh: f64,
    k_max: usize,
) -> Vec<Vec<Detection>> {
    let (m, h, w) = (maps.num_classes(), maps.heatmap.h, maps.heatmap.w);
    (0..maps.batch())
        .map(|n| {
            let mut peaks = Vec::new();
            for c in 0..m {
                for row in 0..h {
                    for col in 0..w {
                        let v = maps.heatmap.at(c, n, row, col).f64();
                        if v < score_thresh || !is_local_max(maps, c, n, row, col, v) {
                            continue;
                        }
                        peaks.push((v, c, row, col));
                    }
                }
            }
            peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2, a.3).cmp(&(b.1, b.2, b.3))));
            peaks.truncate(k_max);
            peaks
                .into_iter()
                .map(|(score, c, row, col)| {
                    let r = |ch: usize| maps.regress.at(ch, n, row, col).f64();
                    let (cx, cy) = grid.cell_center(row, col);
                    let label = BoxLabel {
                        class_id: c as u32,
                        x: (cx + r(0) * grid.cell_size) as f32,
                        y: (cy + r(1) * grid.cell_size) as f32,
                        w: r(2).clamp(-5.0, 5.0).exp() as f32,
                        l: r(3).clamp(-5.0, 5.0).exp() as f32,
                        yaw: r(4).atan2(r(5)) as f32,
                    };
                    Detection { label, score }
                })
                .collect()
        })
        .collect()
}

/// Plateaus keep only their first cell in scan order.
fn is_local_max<S: Scalar>(maps: &DetectionMaps<S>, c: usize, n: usize, row: usize, col: usize, v: f64) -> bool {
    let (h, w) = (maps.heatmap.h as isize, maps.heatmap.w as isize);
    for dr in -1isize..=1 {
        for dc in -1isize..=1 {
            let (rr, cc) = (row as isize + dr, col as isize + dc);
            if (dr, dc) == (0, 0) || rr < 0 || cc < 0 || rr >= h || cc >= w {
                continue;
            }
            let u = maps.heatmap.at(c, n, rr as usize, cc as usize).f64();
            let earlier = (dr, dc) < (0, 0);
            if u > v || (earlier && u == v) {
                return false;
            }
        }
    }
    true
}
