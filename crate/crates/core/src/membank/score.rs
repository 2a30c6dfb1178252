use serde::{Deserialize, Serialize};

use super::bank::MemoryBank;
use super::features::{Backbone, FeatureGrid};
use super::knn::knn_exact;
use super::MembankError;
use crate::imagecore::{gaussian_blur, Image};

pub const DEFAULT_K: usize = 3;
pub const MAP_SIGMA: f64 = 4.0;
pub const THRESHOLD_MARGIN: f64 = 1.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyResult {
    pub width: usize,
    pub height: usize,
    /// Per-pixel score, row-major.
    pub map: Vec<f64>,
    /// Mean k-NN distance per grid cell, before upsampling.
    pub grid_scores: Vec<f64>,
    /// `max(map)`.
    pub image_score: f64,
    pub decision: Option<bool>,
}

/// Per output pixel along one axis: the two bracketing cell indices and the
/// weight of the second. Pixels outside the first and last center clamp.
fn axis_weights(centers: &[f64], pixels: usize) -> Vec<(usize, usize, f64)> {
    (0..pixels)
        .map(|p| {
            let x = p as f64;
            let last = centers.len() - 1;
            if x <= centers[0] {
                return (0, 0, 0.0);
            }
            if x >= centers[last] {
                return (last, last, 0.0);
            }
            let i = centers.partition_point(|c| *c <= x) - 1;
            let t = (x - centers[i]) / (centers[i + 1] - centers[i]);
            (i, i + 1, t)
        })
        .collect()
}

/// Bilinear interpolation of grid values through the receptive-bbox centers.
pub fn upsample_grid(grid: &FeatureGrid, values: &[f64]) -> Vec<f64> {
    let xs: Vec<f64> = (0..grid.gw).map(|gx| grid.center(gx).0).collect();
    let ys: Vec<f64> = (0..grid.gh).map(|gy| grid.center(gy * grid.gw).1).collect();
    let wx = axis_weights(&xs, grid.image_width);
    let wy = axis_weights(&ys, grid.image_height);
    let mut out = Vec::with_capacity(grid.image_width * grid.image_height);
    for (y0, y1, ty) in &wy {
        for (x0, x1, tx) in &wx {
            let v = |gx: usize, gy: usize| values[gy * grid.gw + gx];
            let top = v(*x0, *y0) * (1.0 - tx) + v(*x1, *y0) * tx;
            let bottom = v(*x0, *y1) * (1.0 - tx) + v(*x1, *y1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Scores a precomputed feature grid against the bank.
pub fn score_grid(bank: &MemoryBank, grid: &FeatureGrid, k: usize, sigma: f64) -> Result<AnomalyResult, MembankError> {
    if bank.is_empty() {
        return Err(MembankError::EmptyBank);
    }
    if k == 0 || k > bank.search_len() {
        return Err(MembankError::TooFewVectors {
            k,
            size: bank.search_len(),
        });
    }
    if grid.dim != bank.dim() {
        return Err(MembankError::DimMismatch {
            expected: bank.dim(),
            found: grid.dim,
        });
    }
    let candidates = bank.search_indices();
    let grid_scores: Vec<f64> = (0..grid.cells())
        .map(|cell| {
            let nn = knn_exact(bank.vectors(), bank.dim(), &candidates, grid.vector(cell), k);
            nn.iter().map(|n| n.distance).sum::<f64>() / k as f64
        })
        .collect();
    let up = upsample_grid(grid, &grid_scores);
    let map = gaussian_blur(&up, grid.image_width, grid.image_height, sigma);
    let map: Vec<f64> = map.into_iter().map(|v| v.max(0.0)).collect();
    let image_score = map.iter().cloned().fold(0.0, f64::max);
    Ok(AnomalyResult {
        width: grid.image_width,
        height: grid.image_height,
        map,
        grid_scores,
        image_score,
        decision: None,
    })
}

/// Anomaly map of `candidate`: mean distance to the `k` nearest bank
/// vectors per cell, upsampled and smoothed with a Gaussian of [`MAP_SIGMA`].
pub fn score(
    bank: &MemoryBank,
    backbone: &Backbone,
    candidate: &Image,
    k: usize,
) -> Result<AnomalyResult, MembankError> {
    let grid = backbone.extract(candidate)?;
    score_grid(bank, &grid, k, MAP_SIGMA)
}

/// Defective iff `image_score > threshold`.
pub fn classify(result: &AnomalyResult, threshold: f64) -> Result<bool, MembankError> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(MembankError::InvalidArgument(format!(
            "threshold {threshold} must be >= 0"
        )));
    }
    Ok(result.image_score > threshold)
}

/// `max(nominal scores) · margin`.
pub fn nominal_threshold(nominal_scores: &[f64], margin: f64) -> Result<f64, MembankError> {
    let max = nominal_scores
        .iter()
        .cloned()
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
        .ok_or_else(|| MembankError::InvalidArgument("no nominal validation scores".into()))?;
    if !(margin >= 1.0 && margin.is_finite()) {
        return Err(MembankError::InvalidArgument(format!(
            "threshold margin {margin} must be >= 1"
        )));
    }
    Ok(max * margin)
}
