//! Region-level refinement of a part-level constraint.
//!
//! Two strategies:
//!
//! * **geometric**: crop the mask, resize it onto a fixed canvas, cut the
//!   canvas into a labelled grid of dense cells, let the reasoner pick cells,
//!   and map the chosen cell centroids back to source pixels and 3D.
//! * **positional**: lift the mask's boundary pixels to 3D, keep the points
//!   around the dominant height (Gaussian KDE peak, or the maximum height),
//!   and place the constraint at the 3D midpoint of the boundary pair whose
//!   2D midpoint best matches the part centroid.
//!
//! The canvas map is `x̄ = (x - l)·α_x + Δ_x`, `ȳ = (y - t)·α_y + Δ_y` with
//! `α = resize / crop` and `Δ = (target - resize) / 2`, so the resized crop is
//! centred on the canvas and the inverse divides by `α`.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    deproject, BinaryMask, CameraModel, Constraint3D, DepthLookup, GeometryError, Vec2, Vec3,
};
use crate::reasoner::ReasonerError;

pub const REFINE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefineError {
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("canvas {canvas:?} is not divisible into a {grid:?} grid")]
    IndivisibleGrid {
        canvas: (usize, usize),
        grid: (usize, usize),
    },
    #[error("point ({x:.3}, {y:.3}) lies outside the crop bounds")]
    OutsideCrop { x: f64, y: f64 },
    #[error("point maps into unlabeled cell ({row}, {col})")]
    UnlabeledCell { row: usize, col: usize },
    #[error("label {0} is not in the grid")]
    UnknownLabel(u32),
    #[error("no edge pixel has valid depth")]
    NoValidDepth,
    #[error("{0} points survive height filtering; need at least 2")]
    DegenerateDistribution(usize),
    #[error("unknown refinement strategy {0:?}")]
    UnknownStrategy(String),
    #[error("invalid refine config: {0}")]
    InvalidConfig(String),
    #[error("reasoner: {0}")]
    Reasoner(#[from] ReasonerError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    Silverman,
}

/// KDE bandwidth in meters, or a rule of thumb.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bandwidth {
    Fixed(f64),
    Rule(BandwidthRule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeakMode {
    /// Peak of the Gaussian KDE over heights.
    Kde,
    /// Use the highest point instead of the density peak (raised ridges, switches).
    MaxHeight,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    /// Canvas `(height, width)`.
    pub target_res: (usize, usize),
    /// Resized crop `(height, width)`.
    pub resize_res: (usize, usize),
    /// Grid `(rows, cols)`.
    pub grid: (usize, usize),
    /// Minimum cell density for a label.
    pub tau: f64,
    pub kde_bandwidth: Bandwidth,
    /// Half-width of the height window around the peak, meters.
    pub delta: f64,
    /// Window below the maximum surviving height, meters.
    pub eta: f64,
    pub peak_mode: PeakMode,
    pub kde_lattice: usize,
    pub max_pair_points: usize,
    pub pair_seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            target_res: (480, 480),
            resize_res: (360, 360),
            grid: (12, 12),
            tau: 0.25,
            kde_bandwidth: Bandwidth::Rule(BandwidthRule::Silverman),
            delta: 0.03,
            eta: 0.01,
            peak_mode: PeakMode::Kde,
            kde_lattice: 512,
            max_pair_points: 4000,
            pair_seed: 0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        let (ht, wt) = self.target_res;
        let (hr, wr) = self.resize_res;
        let bad = |m: &str| Err(RefineError::InvalidConfig(m.to_string()));
        if ht == 0 || wt == 0 || hr == 0 || wr == 0 {
            return bad("resolutions must be positive");
        }
        if hr > ht || wr > wt {
            return bad("resize resolution must not exceed the canvas");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return bad("grid must be non-empty");
        }
        if !(self.delta >= 0.0 && self.eta >= 0.0) {
            return bad("delta and eta must be non-negative");
        }
        if let Bandwidth::Fixed(h) = self.kde_bandwidth {
            if !(h > 0.0) {
                return bad("fixed bandwidth must be positive");
            }
        }
        if self.kde_lattice < 2 || self.max_pair_points < 2 {
            return bad("kde_lattice and max_pair_points must be >= 2");
        }
        Ok(())
    }
}

/// Inclusive tight bounding box of a mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBounds {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl CropBounds {
    pub fn width(&self) -> usize {
        self.right - self.left + 1
    }

    pub fn height(&self) -> usize {
        self.bottom - self.top + 1
    }
}

/// A mask cropped, rescaled and centred on the standard canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedMask {
    pub canvas: BinaryMask,
    pub crop: CropBounds,
    /// `(α_x, α_y)`.
    pub scale: (f64, f64),
    /// `(Δ_x, Δ_y)`.
    pub offset: (f64, f64),
}

impl NormalizedMask {
    /// Source pixel coordinate to canvas coordinate.
    pub fn forward(&self, p: Vec2) -> Vec2 {
        Vec2::new(
            (p.x - self.crop.left as f64) * self.scale.0 + self.offset.0,
            (p.y - self.crop.top as f64) * self.scale.1 + self.offset.1,
        )
    }

    /// Canvas coordinate back to source pixel coordinate.
    pub fn inverse(&self, q: Vec2) -> Vec2 {
        Vec2::new(
            (q.x - self.offset.0) / self.scale.0 + self.crop.left as f64,
            (q.y - self.offset.1) / self.scale.1 + self.crop.top as f64,
        )
    }

    pub fn contains_source(&self, p: Vec2) -> bool {
        let (l, t) = (self.crop.left as f64, self.crop.top as f64);
        p.x >= l
            && p.x <= l + self.crop.width() as f64
            && p.y >= t
            && p.y <= t + self.crop.height() as f64
    }
}

pub fn normalize_mask(mask: &BinaryMask, cfg: &RefineConfig) -> Result<NormalizedMask, RefineError> {
    let (l, t, r, b) = mask.bounding_box().ok_or(RefineError::EmptyMask)?;
    let crop = CropBounds {
        top: t,
        bottom: b,
        left: l,
        right: r,
    };
    let (wc, hc) = (crop.width(), crop.height());
    let (ht, wt) = cfg.target_res;
    let (hr, wr) = cfg.resize_res;
    let scale = (wr as f64 / wc as f64, hr as f64 / hc as f64);
    let (dx, dy) = ((wt - wr) / 2, (ht - hr) / 2);

    // Nearest neighbour: canvas pixel centre -> source pixel.
    let src_x: Vec<usize> = (0..wr)
        .map(|xr| l + (((xr as f64 + 0.5) / scale.0) as usize).min(wc - 1))
        .collect();
    let src_y: Vec<usize> = (0..hr)
        .map(|yr| t + (((yr as f64 + 0.5) / scale.1) as usize).min(hc - 1))
        .collect();
    let mut canvas = BinaryMask::empty(wt, ht);
    for (yr, &sy) in src_y.iter().enumerate() {
        for (xr, &sx) in src_x.iter().enumerate() {
            if mask.get(sx, sy) {
                canvas.set(xr + dx, yr + dy, true);
            }
        }
    }
    Ok(NormalizedMask {
        canvas,
        crop,
        scale,
        offset: (dx as f64, dy as f64),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub row: usize,
    pub col: usize,
    pub count: usize,
    pub density: f64,
    /// Mean foreground canvas pixel; `None` for empty cells.
    pub centroid: Option<[f64; 2]>,
    pub label: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticGrid {
    pub rows: usize,
    pub cols: usize,
    /// `(w_c, h_c)` in canvas pixels.
    pub cell_size: (usize, usize),
    /// Row-major.
    pub cells: Vec<GridCell>,
}

impl SemanticGrid {
    pub fn cell(&self, row: usize, col: usize) -> &GridCell {
        &self.cells[row * self.cols + col]
    }

    pub fn cell_for_label(&self, label: u32) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.label == Some(label))
    }

    pub fn labels(&self) -> impl Iterator<Item = u32> + '_ {
        self.cells.iter().filter_map(|c| c.label)
    }

    pub fn labeled_count(&self) -> usize {
        self.labels().count()
    }

    /// `(row, col)` of the cell covering a canvas point.
    pub fn locate(&self, q: Vec2) -> Option<(usize, usize)> {
        let (wt, ht) = (
            (self.cols * self.cell_size.0) as f64,
            (self.rows * self.cell_size.1) as f64,
        );
        if !(q.x >= 0.0 && q.y >= 0.0 && q.x <= wt && q.y <= ht) {
            return None;
        }
        let col = ((q.x / self.cell_size.0 as f64) as usize).min(self.cols - 1);
        let row = ((q.y / self.cell_size.1 as f64) as usize).min(self.rows - 1);
        Some((row, col))
    }

    pub fn densities(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.density).collect()
    }
}

pub fn build_grid(nm: &NormalizedMask, cfg: &RefineConfig) -> Result<SemanticGrid, RefineError> {
    let (ht, wt) = (nm.canvas.height(), nm.canvas.width());
    let (rows, cols) = cfg.grid;
    if rows == 0 || cols == 0 || ht % rows != 0 || wt % cols != 0 {
        return Err(RefineError::IndivisibleGrid {
            canvas: (ht, wt),
            grid: (rows, cols),
        });
    }
    let (wc, hc) = (wt / cols, ht / rows);
    let mut counts = vec![0usize; rows * cols];
    let mut sums = vec![(0.0f64, 0.0f64); rows * cols];
    for (x, y) in nm.canvas.foreground() {
        let i = (y / hc) * cols + x / wc;
        counts[i] += 1;
        sums[i].0 += x as f64;
        sums[i].1 += y as f64;
    }
    let area = (wc * hc) as f64;
    let mut next = 0u32;
    let cells = (0..rows * cols)
        .map(|i| {
            let count = counts[i];
            let density = count as f64 / area;
            let label = (count > 0 && density >= cfg.tau).then(|| {
                next += 1;
                next - 1
            });
            GridCell {
                row: i / cols,
                col: i % cols,
                count,
                density,
                centroid: (count > 0)
                    .then(|| [sums[i].0 / count as f64, sums[i].1 / count as f64]),
                label,
            }
        })
        .collect();
    Ok(SemanticGrid {
        rows,
        cols,
        cell_size: (wc, hc),
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanvasMapping {
    pub canvas: [f64; 2],
    pub row: usize,
    pub col: usize,
    pub label: u32,
}

/// Maps a part centroid onto the canvas and finds its labelled cell.
pub fn map_centroid_to_canvas(
    c: Vec2,
    nm: &NormalizedMask,
    grid: &SemanticGrid,
) -> Result<CanvasMapping, RefineError> {
    if !nm.contains_source(c) {
        return Err(RefineError::OutsideCrop { x: c.x, y: c.y });
    }
    let q = nm.forward(c);
    let (row, col) = grid
        .locate(q)
        .ok_or(RefineError::OutsideCrop { x: c.x, y: c.y })?;
    let label = grid
        .cell(row, col)
        .label
        .ok_or(RefineError::UnlabeledCell { row, col })?;
    Ok(CanvasMapping {
        canvas: [q.x, q.y],
        row,
        col,
        label,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedLabel {
    pub label: u32,
    pub source_pixel: [f64; 2],
    pub constraint: Constraint3D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedLabel {
    pub label: u32,
    pub source_pixel: [f64; 2],
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResolvedLabels {
    pub resolved: Vec<ResolvedLabel>,
    pub dropped: Vec<DroppedLabel>,
}

impl ResolvedLabels {
    pub fn constraints(&self) -> Vec<Constraint3D> {
        self.resolved.iter().map(|r| r.constraint.clone()).collect()
    }
}

/// Canvas centroid of a labelled cell mapped back to source pixels.
pub fn label_source_pixel(
    label: u32,
    grid: &SemanticGrid,
    nm: &NormalizedMask,
) -> Result<Vec2, RefineError> {
    let cell = grid
        .cell_for_label(label)
        .ok_or(RefineError::UnknownLabel(label))?;
    // Labelled cells always have foreground, hence a centroid.
    let c = cell.centroid.ok_or(RefineError::UnknownLabel(label))?;
    // Canvas pixel i samples source pixel floor((i + 0.5) / scale), so
    // map pixel centres rather than pixel corners.
    let half = Vec2::new(0.5, 0.5);
    Ok(nm.inverse(Vec2::new(c[0], c[1]) + half) - half)
}

/// Maps chosen grid labels back to 3D constraints. Labels landing on
/// invalid depth are reported in `dropped`.
pub fn resolve_refined_labels(
    labels: &[u32],
    grid: &SemanticGrid,
    nm: &NormalizedMask,
    depth: &dyn DepthLookup,
    cam: &CameraModel,
    source_label: &str,
) -> Result<ResolvedLabels, RefineError> {
    let mut out = ResolvedLabels::default();
    for &label in labels {
        let px = label_source_pixel(label, grid, nm)?;
        let source_pixel = [px.x, px.y];
        let lifted = depth
            .depth_at(px)
            .ok_or(GeometryError::InvalidDepth(0.0))
            .and_then(|d| deproject(px, d, cam));
        match lifted {
            Ok(p) => out.resolved.push(ResolvedLabel {
                label,
                source_pixel,
                constraint: Constraint3D::at(p, format!("{source_label}/cell{label}")),
            }),
            Err(e) => out.dropped.push(DroppedLabel {
                label,
                source_pixel,
                reason: e.to_string(),
            }),
        }
    }
    Ok(out)
}

/// Boundary pixels with their 3D lifts, index-aligned.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EdgePointSet {
    pub pixels_2d: Vec<Vec2>,
    pub points_3d: Vec<Vec3>,
}

impl EdgePointSet {
    pub fn len(&self) -> usize {
        self.pixels_2d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels_2d.is_empty()
    }

    fn retain_indices(&self, keep: &[usize]) -> EdgePointSet {
        EdgePointSet {
            pixels_2d: keep.iter().map(|&i| self.pixels_2d[i]).collect(),
            points_3d: keep.iter().map(|&i| self.points_3d[i]).collect(),
        }
    }
}

/// Foreground pixels with at least one background 4-neighbour; pixels
/// outside the image count as background. Row-major order.
pub fn edge_pixels(mask: &BinaryMask) -> Vec<(usize, usize)> {
    mask.foreground()
        .filter(|&(x, y)| {
            let (x, y) = (x as i64, y as i64);
            [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)]
                .iter()
                .any(|&(nx, ny)| !mask.get_signed(nx, ny))
        })
        .collect()
}

pub fn extract_edge_points(
    mask: &BinaryMask,
    depth: &dyn DepthLookup,
    cam: &CameraModel,
) -> Result<EdgePointSet, RefineError> {
    let edges = edge_pixels(mask);
    if edges.is_empty() {
        return Err(RefineError::EmptyMask);
    }
    let mut out = EdgePointSet::default();
    for (x, y) in edges {
        let px = Vec2::new(x as f64, y as f64);
        if let Some(d) = depth.depth_at(px) {
            out.points_3d.push(deproject(px, d, cam)?);
            out.pixels_2d.push(px);
        }
    }
    if out.is_empty() {
        return Err(RefineError::NoValidDepth);
    }
    Ok(out)
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Silverman's rule `0.9 · min(σ, IQR/1.34) · n^(-1/5)`; falls back to σ
/// when the IQR is zero. Returns 0 for a constant sample.
pub fn silverman_bandwidth(sorted: &[f64]) -> f64 {
    let n = sorted.len() as f64;
    if sorted.len() < 2 {
        return 0.0;
    }
    let mean = sorted.iter().sum::<f64>() / n;
    let var = sorted.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    let iqr = quantile_sorted(sorted, 0.75) - quantile_sorted(sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * n.powf(-0.2)
}

/// Gaussian KDE `f̂(z) = 1/(N h) Σ K((z - z_i)/h)`.
pub fn kde_density(samples: &[f64], h: f64, z: f64) -> f64 {
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    norm * samples
        .iter()
        .map(|zi| (-0.5 * ((z - zi) / h).powi(2)).exp())
        .sum::<f64>()
}

/// Argmax of the KDE over `lattice` evenly spaced points on `[min, max]`.
/// Ties resolve to the lowest height. Input must be sorted.
pub fn kde_peak(sorted: &[f64], h: f64, lattice: usize) -> f64 {
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    if hi <= lo || h <= 0.0 {
        return lo;
    }
    let step = (hi - lo) / (lattice - 1) as f64;
    let mut best = (lo, f64::NEG_INFINITY);
    for i in 0..lattice {
        let z = lo + step * i as f64;
        let f = kde_density(sorted, h, z);
        if f > best.1 {
            best = (z, f);
        }
    }
    best.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakSummary {
    /// Height the `delta` window is centred on.
    pub peak: f64,
    /// Bandwidth used; 0 in max-height mode or for a constant sample.
    pub bandwidth: f64,
    pub z_max: f64,
    pub input_count: usize,
    pub retained_count: usize,
}

/// Keeps edge points near the dominant height, then the band within `eta`
/// of the highest survivor. Output preserves input order.
pub fn kde_peak_filter(
    points: &EdgePointSet,
    cfg: &RefineConfig,
) -> Result<(EdgePointSet, PeakSummary), RefineError> {
    if points.len() < 2 {
        return Err(RefineError::DegenerateDistribution(points.len()));
    }
    let zs: Vec<f64> = points.points_3d.iter().map(|p| p.z).collect();
    let mut sorted = zs.clone();
    sorted.sort_by(f64::total_cmp);

    let (peak, bandwidth) = match cfg.peak_mode {
        PeakMode::MaxHeight => (sorted[sorted.len() - 1], 0.0),
        PeakMode::Kde => {
            let h = match cfg.kde_bandwidth {
                Bandwidth::Fixed(h) => h,
                Bandwidth::Rule(BandwidthRule::Silverman) => silverman_bandwidth(&sorted),
            };
            (kde_peak(&sorted, h, cfg.kde_lattice), h)
        }
    };

    let window: Vec<usize> = (0..zs.len())
        .filter(|&i| (zs[i] - peak).abs() <= cfg.delta)
        .collect();
    let z_max = window
        .iter()
        .map(|&i| zs[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let keep: Vec<usize> = window
        .into_iter()
        .filter(|&i| zs[i] >= z_max - cfg.eta)
        .collect();
    if keep.len() < 2 {
        return Err(RefineError::DegenerateDistribution(keep.len()));
    }
    let summary = PeakSummary {
        peak,
        bandwidth,
        z_max,
        input_count: points.len(),
        retained_count: keep.len(),
    };
    Ok((points.retain_indices(&keep), summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairChoice {
    pub pixel_a: [f64; 2],
    pub pixel_b: [f64; 2],
    pub midpoint_2d: [f64; 2],
    /// Distance from the 2D midpoint to the part centroid, pixels.
    pub residual: f64,
    pub constraint: Constraint3D,
}

fn lex_key(p: &Vec2) -> (f64, f64) {
    (p.x, p.y)
}

fn lex_lt(a: &Vec2, b: &Vec2) -> bool {
    lex_key(a).partial_cmp(&lex_key(b)) == Some(std::cmp::Ordering::Less)
}

/// Boundary pair whose 2D midpoint is closest to `centroid`; the constraint
/// is the 3D midpoint of that pair.
///
/// Ties prefer the wider pair, then the lexicographically smallest
/// `(first, second)` pixel pair, so the result does not depend on input
/// order. Above `max_pair_points` a seeded uniform subsample is searched.
pub fn symmetric_pair_constraint(
    points: &EdgePointSet,
    centroid: Vec2,
    cfg: &RefineConfig,
    source_label: &str,
) -> Result<PairChoice, RefineError> {
    if points.len() < 2 {
        return Err(RefineError::DegenerateDistribution(points.len()));
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        lex_key(&points.pixels_2d[a])
            .partial_cmp(&lex_key(&points.pixels_2d[b]))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    if order.len() > cfg.max_pair_points {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.pair_seed ^ order.len() as u64);
        let mut picked = sample(&mut rng, order.len(), cfg.max_pair_points).into_vec();
        picked.sort_unstable();
        order = picked.into_iter().map(|i| order[i]).collect();
    }

    let px = &points.pixels_2d;
    let mut best: Option<(f64, f64, usize, usize)> = None;
    for (ii, &a) in order.iter().enumerate() {
        for &b in &order[ii + 1..] {
            // `order` is sorted, so (a, b) is already in lexicographic order.
            let mid = (px[a] + px[b]) * 0.5;
            let score = (mid - centroid).norm();
            let sep = (px[a] - px[b]).norm();
            let better = match best {
                None => true,
                Some((bs, bsep, ba, bb)) => {
                    score < bs
                        || (score == bs && sep > bsep)
                        || (score == bs
                            && sep == bsep
                            && (lex_lt(&px[a], &px[ba])
                                || (px[a] == px[ba] && lex_lt(&px[b], &px[bb]))))
                }
            };
            if better {
                best = Some((score, sep, a, b));
            }
        }
    }
    let (residual, _, a, b) = best.expect("at least one pair");
    let mid2 = (px[a] + px[b]) * 0.5;
    let mid3 = (points.points_3d[a] + points.points_3d[b]) * 0.5;
    Ok(PairChoice {
        pixel_a: [px[a].x, px[a].y],
        pixel_b: [px[b].x, px[b].y],
        midpoint_2d: [mid2.x, mid2.y],
        residual,
        constraint: Constraint3D::at(mid3, format!("{source_label}/pair")),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Geometric,
    Positional,
}

impl FromStr for Strategy {
    type Err = RefineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "geometric" => Ok(Strategy::Geometric),
            "positional" => Ok(Strategy::Positional),
            other => Err(RefineError::UnknownStrategy(other.to_string())),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Geometric => "geometric",
            Strategy::Positional => "positional",
        })
    }
}

/// Summary of one labelled cell, as shown to the reasoner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub label: u32,
    pub row: usize,
    pub col: usize,
    pub density: f64,
    pub centroid: [f64; 2],
}

/// Everything the reasoner sees when choosing refined cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellContext {
    pub instruction: String,
    pub part_label: u32,
    /// Label of the cell the part centroid falls in, if that cell is labelled.
    pub centroid_cell: Option<u32>,
    pub canvas: (usize, usize),
    pub grid: (usize, usize),
    pub cells: Vec<CellSummary>,
}

impl CellContext {
    pub fn new(
        instruction: &str,
        part_label: u32,
        centroid_cell: Option<u32>,
        nm: &NormalizedMask,
        grid: &SemanticGrid,
    ) -> Self {
        Self {
            instruction: instruction.to_string(),
            part_label,
            centroid_cell,
            canvas: (nm.canvas.width(), nm.canvas.height()),
            grid: (grid.rows, grid.cols),
            cells: grid
                .cells
                .iter()
                .filter_map(|c| {
                    Some(CellSummary {
                        label: c.label?,
                        row: c.row,
                        col: c.col,
                        density: c.density,
                        centroid: c.centroid?,
                    })
                })
                .collect(),
        }
    }
}

/// The reasoner capability the geometric path needs.
pub trait CellSelector {
    fn select_refined_cells(&self, ctx: &CellContext) -> Result<Vec<u32>, ReasonerError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineStage {
    Normalize,
    Grid,
    Reason,
    Resolve,
    Edges,
    Peak,
    Pair,
}

impl fmt::Display for RefineStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("refinement failed at {stage}: {error}")]
pub struct RefineFailure {
    pub stage: RefineStage,
    pub error: RefineError,
}

trait AtStage<T> {
    fn at(self, stage: RefineStage) -> Result<T, RefineFailure>;
}

impl<T, E: Into<RefineError>> AtStage<T> for Result<T, E> {
    fn at(self, stage: RefineStage) -> Result<T, RefineFailure> {
        self.map_err(|e| RefineFailure {
            stage,
            error: e.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometricArtifacts {
    pub crop: CropBounds,
    pub scale: (f64, f64),
    pub offset: (f64, f64),
    pub grid: (usize, usize),
    pub densities: Vec<f64>,
    pub labeled_cells: usize,
    pub centroid_canvas: [f64; 2],
    pub centroid_cell: Option<u32>,
    pub selected: Vec<u32>,
    pub resolution: ResolvedLabels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionalArtifacts {
    pub edge_count: usize,
    pub peak: PeakSummary,
    pub pair: PairChoice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub schema_version: u32,
    pub strategy: Strategy,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub geometric: Option<GeometricArtifacts>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub positional: Option<PositionalArtifacts>,
    pub constraints: Vec<Constraint3D>,
}

/// Inputs shared by both strategies.
pub struct RefineInput<'a> {
    pub mask: &'a BinaryMask,
    pub part_label: u32,
    pub centroid: Vec2,
    pub depth: &'a dyn DepthLookup,
    pub camera: &'a CameraModel,
    pub instruction: &'a str,
}

pub fn refine(
    strategy: Strategy,
    input: &RefineInput<'_>,
    cfg: &RefineConfig,
    selector: &dyn CellSelector,
) -> Result<RefineReport, RefineFailure> {
    cfg.validate().at(RefineStage::Normalize)?;
    let source_label = format!("part{}", input.part_label);
    match strategy {
        Strategy::Geometric => {
            let nm = normalize_mask(input.mask, cfg).at(RefineStage::Normalize)?;
            let grid = build_grid(&nm, cfg).at(RefineStage::Grid)?;
            let centroid_canvas = nm.forward(input.centroid);
            let centroid_cell = match map_centroid_to_canvas(input.centroid, &nm, &grid) {
                Ok(m) => Some(m.label),
                Err(RefineError::UnlabeledCell { .. }) => None,
                Err(e) => return Err(e).at(RefineStage::Grid),
            };
            let ctx = CellContext::new(input.instruction, input.part_label, centroid_cell, &nm, &grid);
            let selected = selector.select_refined_cells(&ctx).at(RefineStage::Reason)?;
            let resolution = resolve_refined_labels(
                &selected,
                &grid,
                &nm,
                input.depth,
                input.camera,
                &source_label,
            )
            .at(RefineStage::Resolve)?;
            if resolution.resolved.is_empty() {
                return Err(RefineError::NoValidDepth).at(RefineStage::Resolve);
            }
            Ok(RefineReport {
                schema_version: REFINE_SCHEMA_VERSION,
                strategy,
                constraints: resolution.constraints(),
                geometric: Some(GeometricArtifacts {
                    crop: nm.crop,
                    scale: nm.scale,
                    offset: nm.offset,
                    grid: (grid.rows, grid.cols),
                    densities: grid.densities(),
                    labeled_cells: grid.labeled_count(),
                    centroid_canvas: [centroid_canvas.x, centroid_canvas.y],
                    centroid_cell,
                    selected,
                    resolution,
                }),
                positional: None,
            })
        }
        Strategy::Positional => {
            let edges = extract_edge_points(input.mask, input.depth, input.camera)
                .at(RefineStage::Edges)?;
            let (kept, peak) = kde_peak_filter(&edges, cfg).at(RefineStage::Peak)?;
            let pair = symmetric_pair_constraint(&kept, input.centroid, cfg, &source_label)
                .at(RefineStage::Pair)?;
            Ok(RefineReport {
                schema_version: REFINE_SCHEMA_VERSION,
                strategy,
                constraints: vec![pair.constraint.clone()],
                geometric: None,
                positional: Some(PositionalArtifacts {
                    edge_count: edges.len(),
                    peak,
                    pair,
                }),
            })
        }
    }
}

/// Canvas render with labelled cell centroids marked, for inspection.
pub fn render_grid_debug(nm: &NormalizedMask, grid: &SemanticGrid) -> Vec<u8> {
    let (w, h) = (nm.canvas.width(), nm.canvas.height());
    let mut img: Vec<u8> = nm.canvas.bits().iter().map(|&b| if b != 0 { 120 } else { 0 }).collect();
    for y in 0..h {
        for x in 0..w {
            if x % grid.cell_size.0 == 0 || y % grid.cell_size.1 == 0 {
                img[y * w + x] = img[y * w + x].max(40);
            }
        }
    }
    for c in grid.cells.iter().filter(|c| c.label.is_some()) {
        if let Some([cx, cy]) = c.centroid {
            let (cx, cy) = (cx.round() as i64, cy.round() as i64);
            for d in -2i64..=2 {
                for (x, y) in [(cx + d, cy), (cx, cy + d)] {
                    if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                        img[y as usize * w + x as usize] = 255;
                    }
                }
            }
        }
    }
    img
}
