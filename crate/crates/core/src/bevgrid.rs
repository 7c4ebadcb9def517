//! BEV grid geometry, ground-truth heatmaps, foreground masks, box
//! footprints and the label-to-BEV mapping.

use serde::{Deserialize, Serialize};

use crate::nn::Tensor;
use crate::scalar::Scalar;
use crate::synthworld::{BoxLabel, WorldSpec};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum BevError {
    #[error("box {index} center ({x}, {y}) lies outside the BEV grid")]
    OutsideGrid { index: usize, x: f32, y: f32 },
    #[error("expected one vector per box: {vectors} vectors for {boxes} boxes")]
    CountMismatch { vectors: usize, boxes: usize },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevGridSpec {
    pub height: usize,
    pub width: usize,
    pub cell_size: f64,
    /// World coordinates of the outer corner of cell `(0, 0)`.
    pub origin: (f64, f64),
}

impl BevGridSpec {
    /// Square grid exactly covering the world: rows run along `+y`,
    /// columns along `+x`.
    pub fn for_world(world: &WorldSpec, cells: usize) -> Self {
        Self {
            height: cells,
            width: cells,
            cell_size: world.extent / cells as f64,
            origin: (-world.extent / 2.0, 0.0),
        }
    }

    pub fn validate(&self, world: &WorldSpec) -> Result<(), BevError> {
        if !(self.cell_size > 0.0) || self.height == 0 || self.width == 0 {
            return Err(BevError::InvalidGrid("cell size and dimensions must be positive".into()));
        }
        let (x0, x1) = world.x_range();
        let tol = 1e-9 * world.extent;
        let covers = self.origin.0 <= x0 + tol
            && self.origin.1 <= tol
            && self.origin.0 + self.width as f64 * self.cell_size >= x1 - tol
            && self.origin.1 + self.height as f64 * self.cell_size >= world.extent - tol;
        if !covers {
            return Err(BevError::InvalidGrid("grid does not cover the world extent".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// `(row, col)` of the cell containing the point; the far grid edges
    /// belong to the last row/column.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fx = (x - self.origin.0) / self.cell_size;
        let fy = (y - self.origin.1) / self.cell_size;
        if !(fx >= 0.0 && fy >= 0.0 && fx <= self.width as f64 && fy <= self.height as f64) {
            return None;
        }
        let col = (fx.floor() as usize).min(self.width - 1);
        let row = (fy.floor() as usize).min(self.height - 1);
        Some((row, col))
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin.0 + (col as f64 + 0.5) * self.cell_size,
            self.origin.1 + (row as f64 + 0.5) * self.cell_size,
        )
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }
}

/// Batched `C x N x H x W` features tied to a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<S> {
    pub grid: BevGridSpec,
    pub data: Tensor<S>,
}

impl<S: Scalar> FeatureMap<S> {
    pub fn new(grid: BevGridSpec, data: Tensor<S>) -> Self {
        assert_eq!((data.h, data.w), (grid.height, grid.width), "feature map does not match grid");
        Self { grid, data }
    }

    pub fn channels(&self) -> usize {
        self.data.c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapParams {
    /// Radius as a fraction of the shorter box side.
    pub beta: f64,
    /// Minimum radius in cells.
    pub r_min: f64,
}

impl Default for HeatmapParams {
    fn default() -> Self {
        Self { beta: 0.5, r_min: 2.0 }
    }
}

/// Splat radius (cells) and Gaussian std-dev (cells) for one box.
pub fn splat_shape(b: &BoxLabel, grid: &BevGridSpec, params: &HeatmapParams) -> (f64, f64) {
    let r = params.r_min.max(params.beta * (b.w.min(b.l) as f64) / grid.cell_size);
    (r, (2.0 * r + 1.0) / 6.0)
}

/// Per-class Gaussian center heatmap, `m x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub grid: BevGridSpec,
    pub num_classes: usize,
    pub data: Vec<f64>,
}

impl Heatmap {
    pub fn at(&self, class: usize, row: usize, col: usize) -> f64 {
        self.data[(class * self.grid.height + row) * self.grid.width + col]
    }

    /// Maximum over classes at each cell.
    pub fn class_max(&self) -> Vec<f64> {
        let cells = self.grid.cells();
        (0..cells)
            .map(|i| (0..self.num_classes).map(|c| self.data[c * cells + i]).fold(0.0, f64::max))
            .collect()
    }
}

pub fn gt_heatmap(
    boxes: &[BoxLabel],
    num_classes: usize,
    grid: &BevGridSpec,
    params: &HeatmapParams,
) -> Result<Heatmap, BevError> {
    let cells = grid.cells();
    let mut data = vec![0.0; num_classes * cells];
    for (index, b) in boxes.iter().enumerate() {
        let (row, col) = grid
            .cell_of(b.x as f64, b.y as f64)
            .ok_or(BevError::OutsideGrid { index, x: b.x, y: b.y })?;
        let (r, sigma) = splat_shape(b, grid, params);
        let reach = r.floor() as isize;
        let plane = &mut data[b.class_id as usize * cells..][..cells];
        for dr in -reach..=reach {
            for dc in -reach..=reach {
                let (rr, cc) = (row as isize + dr, col as isize + dc);
                if rr < 0 || cc < 0 || rr >= grid.height as isize || cc >= grid.width as isize {
                    continue;
                }
                let v = (-((dr * dr + dc * dc) as f64) / (2.0 * sigma * sigma)).exp();
                let slot = &mut plane[grid.index(rr as usize, cc as usize)];
                *slot = f64::max(*slot, v);
            }
        }
    }
    Ok(Heatmap { grid: *grid, num_classes, data })
}

/// Foreground cells of a heatmap: `M` and `N_p` of the feature losses.
#[derive(Clone, Debug, PartialEq)]
pub struct ForegroundMask {
    pub grid: BevGridSpec,
    pub mask: Vec<bool>,
    /// Loss weight per cell: 1 on foreground for a binary mask, the heatmap
    /// value for a soft mask; 0 on background either way.
    pub weights: Vec<f64>,
    pub n_p: usize,
}

impl ForegroundMask {
    pub fn empty(grid: BevGridSpec) -> Self {
        Self { grid, mask: vec![false; grid.cells()], weights: vec![0.0; grid.cells()], n_p: 0 }
    }
}

/// Binary mask where the class-max heatmap reaches `tau`.
pub fn foreground_mask(heatmap: &Heatmap, tau: f64) -> ForegroundMask {
    build_mask(heatmap, tau, false)
}

/// Same support as [`foreground_mask`] but weighted by the heatmap value.
pub fn soft_foreground_mask(heatmap: &Heatmap, tau: f64) -> ForegroundMask {
    build_mask(heatmap, tau, true)
}

fn build_mask(heatmap: &Heatmap, tau: f64, soft: bool) -> ForegroundMask {
    let peak = heatmap.class_max();
    let mask: Vec<bool> = peak.iter().map(|&v| v >= tau).collect();
    let weights = mask
        .iter()
        .zip(&peak)
        .map(|(&m, &v)| if !m { 0.0 } else if soft { v } else { 1.0 })
        .collect();
    let n_p = mask.iter().filter(|&&m| m).count();
    ForegroundMask { grid: heatmap.grid, mask, weights, n_p }
}

/// Cells whose centers lie inside the rotated box; falls back to the cell
/// holding the box center so the result is never empty for in-grid boxes.
pub fn box_footprint(b: &BoxLabel, grid: &BevGridSpec) -> Vec<usize> {
    let corners = b.corners();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in corners {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let to_col = |x: f64| (x - grid.origin.0) / grid.cell_size - 0.5;
    let to_row = |y: f64| (y - grid.origin.1) / grid.cell_size - 0.5;
    let c0 = to_col(x0).ceil().max(0.0) as usize;
    let c1 = to_col(x1).floor().min(grid.width as f64 - 1.0);
    let r0 = to_row(y0).ceil().max(0.0) as usize;
    let r1 = to_row(y1).floor().min(grid.height as f64 - 1.0);
    let mut cells = Vec::new();
    if c1 >= 0.0 && r1 >= 0.0 {
        for row in r0..=r1 as usize {
            for col in c0..=c1 as usize {
                let (cx, cy) = grid.cell_center(row, col);
                if b.contains_point(cx, cy) {
                    cells.push(grid.index(row, col));
                }
            }
        }
    }
    if cells.is_empty() {
        if let Some((row, col)) = grid.cell_of(b.x as f64, b.y as f64) {
            cells.push(grid.index(row, col));
        }
    }
    cells
}

/// Which box (if any) writes each cell under the mapping function: boxes
/// are drawn in decreasing footprint size, later boxes overwriting earlier
/// ones, so small objects survive overlaps with large ones.
#[derive(Clone, Debug, PartialEq)]
pub struct Placement {
    pub owner: Vec<Option<usize>>,
}

impl Placement {
    pub fn new(boxes: &[BoxLabel], grid: &BevGridSpec) -> Self {
        let footprints: Vec<Vec<usize>> = boxes.iter().map(|b| box_footprint(b, grid)).collect();
        let mut order: Vec<usize> = (0..boxes.len()).collect();
        order.sort_by(|&a, &b| footprints[b].len().cmp(&footprints[a].len()).then(a.cmp(&b)));
        let mut owner = vec![None; grid.cells()];
        for i in order {
            for &cell in &footprints[i] {
                owner[cell] = Some(i);
            }
        }
        Self { owner }
    }
}

/// The mapping function `q`: fills every footprint cell with its box's
/// vector. `vectors` is `d x n_boxes x 1 x 1`; the result is `d x 1 x H x W`.
pub fn map_to_bev<S: Scalar>(
    vectors: &Tensor<S>,
    boxes: &[BoxLabel],
    grid: &BevGridSpec,
) -> Result<FeatureMap<S>, BevError> {
    if vectors.n != boxes.len() {
        return Err(BevError::CountMismatch { vectors: vectors.n, boxes: boxes.len() });
    }
    let placement = Placement::new(boxes, grid);
    let mut out = Tensor::zeros(vectors.c, 1, grid.height, grid.width);
    scatter_owned(vectors, 0, &placement, &mut out, 0);
    Ok(FeatureMap::new(*grid, out))
}

/// Writes `vectors[:, first + owner]` into sample `sample` of `out`.
pub(crate) fn scatter_owned<S: Scalar>(
    vectors: &Tensor<S>,
    first: usize,
    placement: &Placement,
    out: &mut Tensor<S>,
    sample: usize,
) {
    let cells = out.h * out.w;
    for (cell, owner) in placement.owner.iter().enumerate() {
        if let Some(o) = owner {
            for d in 0..vectors.c {
                out.data[(d * out.n + sample) * cells + cell] = vectors.data[d * vectors.n + first + o];
            }
        }
    }
}

/// Adjoint of [`scatter_owned`]: accumulates cell gradients into the
/// owning box's vector gradient.
pub(crate) fn gather_owned<S: Scalar>(
    grad_map: &Tensor<S>,
    sample: usize,
    placement: &Placement,
    grad_vectors: &mut Tensor<S>,
    first: usize,
) {
    let cells = grad_map.h * grad_map.w;
    for (cell, owner) in placement.owner.iter().enumerate() {
        if let Some(o) = owner {
            for d in 0..grad_vectors.c {
                grad_vectors.data[d * grad_vectors.n + first + o] +=
                    grad_map.data[(d * grad_map.n + sample) * cells + cell];
            }
        }
    }
}
