use std::f64::consts::PI;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adapter::Adapter;
use super::head::{DetectionMaps, Head, MapsGrad};
use super::DetectorError;
use crate::bevgrid::BevGridSpec;
use crate::nn::{composite_module, Conv2d, Layer, Pass, Seq, Tensor};
use crate::scalar::Scalar;
use crate::synthworld::{Panorama, WorldSpec};

/// Sub-samples per (column, depth bin): across the column's azimuth width
/// and along the bin's range interval.
const AZIMUTH_SUBSAMPLES: usize = 3;
const RANGE_SUBSAMPLES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentConfig {
    pub panorama_channels: usize,
    pub azimuth_bins: usize,
    pub column_channels: usize,
    pub lift_channels: usize,
    pub depth_bins: usize,
    pub channels: usize,
    pub head_channels: usize,
    pub num_classes: usize,
}

/// Which adaptation module a call refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptTarget {
    Lidar,
    Label,
}

/// Panorama as a `[channels, 1, 1, bins]` tensor with the angular width
/// and range cue rescaled to order one.
pub fn panorama_input<S: Scalar>(pano: &Panorama, extent: f64) -> Tensor<S> {
    let (f, a) = (pano.channels, pano.bins);
    let m = pano.num_classes();
    let mut out = Tensor::zeros(f, 1, 1, a);
    for bin in 0..a {
        let col = pano.column(bin);
        for ch in 0..f {
            let v = col[ch] as f64;
            let v = if ch == m + 1 {
                v * a as f64 / PI / 8.0
            } else if ch == m + 2 {
                v / extent
            } else {
                v
            };
            out.data[ch * a + bin] = S::of(v);
        }
    }
    out
}

/// Precomputed splat weights from (column, depth bin) to BEV cells.
///
/// Every (column, bin) pair spreads unit mass: sub-samples that would leave
/// the grid are pulled back to the last in-grid point along their ray.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftTable {
    pub azimuth_bins: usize,
    pub depth_bins: usize,
    pub range_max: f64,
    offsets: Vec<usize>,
    cells: Vec<u32>,
    weights: Vec<f64>,
}

impl LiftTable {
    pub fn new(world: &WorldSpec, grid: &BevGridSpec, depth_bins: usize) -> Self {
        let a_bins = world.azimuth_bins;
        let range_max = world.extent * 2f64.sqrt();
        let dr = range_max / depth_bins as f64;
        let da = PI / a_bins as f64;
        let (x0, x1) = (grid.origin.0, grid.origin.0 + grid.width as f64 * grid.cell_size);
        let y1 = grid.origin.1 + grid.height as f64 * grid.cell_size;
        let share = 1.0 / (AZIMUTH_SUBSAMPLES * RANGE_SUBSAMPLES) as f64;
        let mut offsets = vec![0];
        let (mut cells, mut weights) = (Vec::new(), Vec::new());
        for a in 0..a_bins {
            for k in 0..depth_bins {
                let mut acc: Vec<(u32, f64)> = Vec::new();
                for j in 0..AZIMUTH_SUBSAMPLES {
                    let theta = (a as f64 + (j as f64 + 0.5) / AZIMUTH_SUBSAMPLES as f64) * da;
                    let (s, c) = theta.sin_cos();
                    let mut exit = y1 / s;
                    if c > 0.0 {
                        exit = exit.min(x1 / c);
                    } else if c < 0.0 {
                        exit = exit.min(x0 / c);
                    }
                    let exit = exit * (1.0 - 1e-9);
                    for i in 0..RANGE_SUBSAMPLES {
                        let r = ((k as f64 + (i as f64 + 0.5) / RANGE_SUBSAMPLES as f64) * dr).min(exit);
                        let (row, col) = grid.cell_of(r * c, r * s).expect("clamped inside the grid");
                        let cell = grid.index(row, col) as u32;
                        match acc.iter_mut().find(|e| e.0 == cell) {
                            Some(e) => e.1 += share,
                            None => acc.push((cell, share)),
                        }
                    }
                }
                acc.sort_by_key(|e| e.0);
                for (cell, w) in acc {
                    cells.push(cell);
                    weights.push(w);
                }
                offsets.push(cells.len());
            }
        }
        Self { azimuth_bins: a_bins, depth_bins, range_max, offsets, cells, weights }
    }

    pub fn entries(&self, a: usize, k: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let i = a * self.depth_bins + k;
        let r = self.offsets[i]..self.offsets[i + 1];
        self.cells[r.clone()].iter().zip(&self.weights[r]).map(|(&c, &w)| (c as usize, w))
    }

    /// Depth bin holding range `r`, clamped to the last bin.
    pub fn depth_bin(&self, r: f64) -> usize {
        ((r / self.range_max * self.depth_bins as f64).floor().max(0.0) as usize).min(self.depth_bins - 1)
    }

    /// `out[c, n, cell] = sum_k p[k, n, a] * w(a, k, cell) * feat[c, n, a]`.
    pub fn splat<S: Scalar>(&self, feat: &Tensor<S>, probs: &Tensor<S>, grid: &BevGridSpec) -> Tensor<S> {
        let (ch, n, a_bins) = (feat.c, feat.n, feat.w);
        let hw = grid.cells();
        let mut out = Tensor::zeros(ch, n, grid.height, grid.width);
        for s in 0..n {
            for a in 0..a_bins {
                for k in 0..self.depth_bins {
                    let p = probs.data[(k * n + s) * a_bins + a];
                    for (cell, w) in self.entries(a, k) {
                        let coef = p * S::of(w);
                        for c in 0..ch {
                            out.data[(c * n + s) * hw + cell] += coef * feat.data[(c * n + s) * a_bins + a];
                        }
                    }
                }
            }
        }
        out
    }

    /// Gradients of [`LiftTable::splat`] with respect to `feat` and `probs`.
    pub fn splat_backward<S: Scalar>(
        &self,
        feat: &Tensor<S>,
        probs: &Tensor<S>,
        grad: &Tensor<S>,
    ) -> (Tensor<S>, Tensor<S>) {
        let (ch, n, a_bins) = (feat.c, feat.n, feat.w);
        let hw = grad.h * grad.w;
        let mut dfeat = Tensor::zeros_like(feat);
        let mut dprobs = Tensor::zeros_like(probs);
        let mut g = vec![S::zero(); ch];
        for s in 0..n {
            for a in 0..a_bins {
                for k in 0..self.depth_bins {
                    g.iter_mut().for_each(|v| *v = S::zero());
                    for (cell, w) in self.entries(a, k) {
                        let w = S::of(w);
                        for (c, gv) in g.iter_mut().enumerate() {
                            *gv += w * grad.data[(c * n + s) * hw + cell];
                        }
                    }
                    let pi = (k * n + s) * a_bins + a;
                    let p = probs.data[pi];
                    let mut dp = S::zero();
                    for (c, &gv) in g.iter().enumerate() {
                        let fi = (c * n + s) * a_bins + a;
                        dfeat.data[fi] += p * gv;
                        dp += feat.data[fi] * gv;
                    }
                    dprobs.data[pi] = dp;
                }
            }
        }
        (dfeat, dprobs)
    }
}

/// Softmax over channels at every position.
pub fn softmax_channels<S: Scalar>(logits: &Tensor<S>) -> Tensor<S> {
    let p = logits.plane();
    let mut out = Tensor::zeros_like(logits);
    for i in 0..p {
        let mx = (0..logits.c).map(|k| logits.data[k * p + i]).fold(S::neg_infinity(), S::max);
        let mut z = S::zero();
        for k in 0..logits.c {
            let e = (logits.data[k * p + i] - mx).exp();
            out.data[k * p + i] = e;
            z += e;
        }
        for k in 0..logits.c {
            out.data[k * p + i] /= z;
        }
    }
    out
}

fn softmax_backward<S: Scalar>(probs: &Tensor<S>, dprobs: &Tensor<S>) -> Tensor<S> {
    let p = probs.plane();
    let mut out = Tensor::zeros_like(probs);
    for i in 0..p {
        let dot: S = (0..probs.c).map(|k| probs.data[k * p + i] * dprobs.data[k * p + i]).sum();
        for k in 0..probs.c {
            out.data[k * p + i] = probs.data[k * p + i] * (dprobs.data[k * p + i] - dot);
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct StudentOutput<S> {
    /// `F_image`, `[C_S, n, H, W]`.
    pub features: Tensor<S>,
    pub maps: DetectionMaps<S>,
    /// Per-column depth logits, `[D, n, 1, A]`.
    pub depth_logits: Tensor<S>,
    pub depth: Tensor<S>,
}

#[derive(Clone, Debug)]
struct LiftCache<S> {
    feat: Tensor<S>,
    probs: Tensor<S>,
}

/// Camera detector: per-column encoder with a categorical depth head,
/// lift-splat into BEV, a BEV conv encoder and a center head, plus the
/// adaptation modules used for feature distillation.
#[derive(Clone, Debug)]
pub struct Student<S> {
    pub config: StudentConfig,
    pub grid: BevGridSpec,
    pub column: Seq<S>,
    pub bev: Seq<S>,
    pub head: Head<S>,
    pub adapt_lidar: Option<Adapter<S>>,
    pub adapt_label: Option<Adapter<S>>,
    /// Channels of `F_image` each adapter reads.
    pub lidar_range: Range<usize>,
    pub label_range: Range<usize>,
    pub lift: LiftTable,
    cache: Option<LiftCache<S>>,
}

composite_module!(Student { column, bev, head, adapt_lidar, adapt_label });

/// How the adapters attach to the student feature.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSpec {
    pub teacher_channels: usize,
    pub layers: usize,
    pub zero_init: bool,
    pub lidar_range: Option<Range<usize>>,
    pub label_range: Option<Range<usize>>,
}

impl<S: Scalar> Student<S> {
    pub fn new(
        config: StudentConfig,
        world: &WorldSpec,
        grid: &BevGridSpec,
        adapters: &AdapterSpec,
        rng: &mut impl Rng,
    ) -> Self {
        let cc = config.column_channels;
        let mut column = Seq::conv_stack(&[config.panorama_channels, cc, cc], true, true, rng);
        column.layers.push(Layer::Conv(Conv2d::new(cc, config.lift_channels + config.depth_bins, 1, rng)));
        let bev = Seq::conv_stack(&[config.lift_channels, config.channels, config.channels], true, true, rng);
        let head = Head::new(config.channels, config.head_channels, config.num_classes, rng);
        let mut make = |r: &Option<Range<usize>>| {
            r.as_ref().map(|r| Adapter::new(r.len(), adapters.teacher_channels, adapters.layers, adapters.zero_init, rng))
        };
        let adapt_lidar = make(&adapters.lidar_range);
        let adapt_label = make(&adapters.label_range);
        Self {
            config,
            grid: *grid,
            column,
            bev,
            head,
            adapt_lidar,
            adapt_label,
            lidar_range: adapters.lidar_range.clone().unwrap_or(0..0),
            label_range: adapters.label_range.clone().unwrap_or(0..0),
            lift: LiftTable::new(world, grid, config.depth_bins),
            cache: None,
        }
    }

    /// `input` is a batch of [`panorama_input`] tensors.
    pub fn forward(&mut self, input: &Tensor<S>, pass: Pass) -> StudentOutput<S> {
        let cols = self.column.forward(input, pass);
        let lc = self.config.lift_channels;
        let feat = cols.slice_channels(0..lc);
        let depth_logits = cols.slice_channels(lc..lc + self.config.depth_bins);
        let depth = softmax_channels(&depth_logits);
        let lifted = self.lift.splat(&feat, &depth, &self.grid);
        let features = self.bev.forward(&lifted, pass);
        let maps = self.head.forward(&features, pass);
        self.cache = pass.record.then(|| LiftCache { feat, probs: depth.clone() });
        StudentOutput { features, maps, depth_logits, depth }
    }

    /// Backpropagates head-output gradients plus optional direct gradients
    /// on `F_image` (from the adapters) and on the depth logits.
    pub fn backward(&mut self, grad_maps: &MapsGrad<S>, grad_features: Option<&Tensor<S>>, grad_depth: Option<&Tensor<S>>) {
        let mut g = self.head.backward(grad_maps);
        if let Some(extra) = grad_features {
            g.add_assign(extra);
        }
        let g_lift = self.bev.backward(&g);
        let cache = self.cache.take().expect("student backward without recorded forward");
        let (dfeat, dprobs) = self.lift.splat_backward(&cache.feat, &cache.probs, &g_lift);
        let mut dlogits = softmax_backward(&cache.probs, &dprobs);
        if let Some(gd) = grad_depth {
            dlogits.add_assign(gd);
        }
        self.column.backward(&Tensor::concat_channels(&[&dfeat, &dlogits]));
    }

    fn adapter(&mut self, which: AdaptTarget) -> Result<(&mut Adapter<S>, Range<usize>), DetectorError> {
        let (a, r) = match which {
            AdaptTarget::Lidar => (self.adapt_lidar.as_mut(), self.lidar_range.clone()),
            AdaptTarget::Label => (self.adapt_label.as_mut(), self.label_range.clone()),
        };
        a.map(|a| (a, r)).ok_or(DetectorError::MissingAdapter(which))
    }

    /// Runs the named adapter on its channel group of `features`.
    pub fn adapt(&mut self, which: AdaptTarget, features: &Tensor<S>, pass: Pass) -> Result<Tensor<S>, DetectorError> {
        let (adapter, range) = self.adapter(which)?;
        if range.end > features.c {
            return Err(DetectorError::ChannelMismatch { expected: range.end, found: features.c });
        }
        adapter.forward(&features.slice_channels(range), pass)
    }

    /// Gradient with respect to the whole `F_image`; channels outside the
    /// adapter's group receive exactly zero.
    pub fn adapt_backward(&mut self, which: AdaptTarget, grad: &Tensor<S>) -> Result<Tensor<S>, DetectorError> {
        let channels = self.config.channels;
        let (adapter, range) = self.adapter(which)?;
        let g = adapter.backward(grad);
        let mut out = Tensor::zeros(channels, g.n, g.h, g.w);
        let p = g.plane();
        out.data[range.start * p..range.end * p].copy_from_slice(&g.data);
        Ok(out)
    }
}
