use rand::Rng;
use serde::{Deserialize, Serialize};

use super::head::{DetectionMaps, Head, MapsGrad};
use crate::bevgrid::BevGridSpec;
use crate::nn::{composite_module, Pass, Seq, Tensor};
use crate::scalar::Scalar;

/// Per-cell point statistics fed to the teacher encoder.
pub const LIDAR_INPUT_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub channels: usize,
    pub head_channels: usize,
    pub num_classes: usize,
}

/// Scatters points into `[log1p(count), mean dx, mean dy]` per cell, offsets
/// in cell units from the cell center. Sums run over points sorted by
/// coordinate so the result does not depend on input order.
pub fn lidar_bev<S: Scalar>(points: &[[f32; 2]], grid: &BevGridSpec) -> Tensor<S> {
    let mut sorted: Vec<[f32; 2]> = points.to_vec();
    sorted.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    let cells = grid.cells();
    let mut count = vec![0u32; cells];
    let mut sx = vec![0.0f64; cells];
    let mut sy = vec![0.0f64; cells];
    for p in &sorted {
        let (x, y) = (p[0] as f64, p[1] as f64);
        if let Some((row, col)) = grid.cell_of(x, y) {
            let i = grid.index(row, col);
            let (cx, cy) = grid.cell_center(row, col);
            count[i] += 1;
            sx[i] += (x - cx) / grid.cell_size;
            sy[i] += (y - cy) / grid.cell_size;
        }
    }
    let mut out = Tensor::zeros(LIDAR_INPUT_CHANNELS, 1, grid.height, grid.width);
    for i in 0..cells {
        if count[i] > 0 {
            let k = count[i] as f64;
            out.data[i] = S::of(k.ln_1p());
            out.data[cells + i] = S::of(sx[i] / k);
            out.data[2 * cells + i] = S::of(sy[i] / k);
        }
    }
    out
}

/// Point-cloud detector: BEV point statistics, a conv encoder producing
/// `F_lidar`, and a center head.
#[derive(Clone, Debug)]
pub struct Teacher<S> {
    pub config: TeacherConfig,
    pub encoder: Seq<S>,
    pub head: Head<S>,
}

composite_module!(Teacher { encoder, head });

#[derive(Clone, Debug)]
pub struct TeacherOutput<S> {
    pub features: Tensor<S>,
    pub maps: DetectionMaps<S>,
}

impl<S: Scalar> Teacher<S> {
    pub fn new(config: TeacherConfig, rng: &mut impl Rng) -> Self {
        let c = config.channels;
        let encoder = Seq::conv_stack(&[LIDAR_INPUT_CHANNELS, c, c, c], true, true, rng);
        let head = Head::new(c, config.head_channels, config.num_classes, rng);
        Self { config, encoder, head }
    }

    /// `input` is a batch of [`lidar_bev`] grids.
    pub fn forward(&mut self, input: &Tensor<S>, pass: Pass) -> TeacherOutput<S> {
        let features = self.encoder.forward(input, pass);
        let maps = self.head.forward(&features, pass);
        TeacherOutput { features, maps }
    }

    pub fn backward(&mut self, grad: &MapsGrad<S>) {
        let g = self.head.backward(grad);
        self.encoder.backward(&g);
    }

    pub fn freeze(&mut self) {
        self.encoder.frozen = true;
        self.head.net.frozen = true;
    }
}
