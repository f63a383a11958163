//! Attention heatmaps, overlays and recall against known motif cells.

use std::fmt::Write as _;
use std::sync::OnceLock;

use crate::bags::{Bag, SourceImage, TilingSpec};
use crate::error::{Error, Result};
use crate::model::AttentionOutput;
use crate::tensor::Real;

/// Tolerance on the sum of raw weights.
pub const SUM_TOLERANCE: f64 = 1e-6;

pub const DEFAULT_ALPHA: f64 = 0.4;

/// Per-patch weights on the tiling grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    /// Raw weights; they sum to one.
    pub weights: Vec<f64>,
    /// Min-max normalized copy of `weights` in `[0, 1]`.
    pub normalized: Vec<f64>,
    pub min: f64,
    pub max: f64,
    pub spec: TilingSpec,
    pub origins: Vec<(usize, usize)>,
}

impl Heatmap {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.cols + col]
    }

    /// Cell of the largest weight, first on ties.
    pub fn argmax(&self) -> usize {
        top_k(&self.weights, 1)[0]
    }
}

/// Place weight `p` on grid cell `p` of `bag`.
pub fn attention_to_heatmap<T: Real>(attention: &AttentionOutput<T>, bag: &Bag) -> Result<Heatmap> {
    let weights: Vec<f64> = attention.weights.iter().map(|w| w.as_f64()).collect();
    weights_to_heatmap(&weights, bag)
}

pub fn weights_to_heatmap(weights: &[f64], bag: &Bag) -> Result<Heatmap> {
    if weights.len() != bag.len() || bag.len() != bag.rows * bag.cols {
        return Err(Error::Contract(format!(
            "{} weights for a bag of {} patches on a {}x{} grid",
            weights.len(),
            bag.len(),
            bag.rows,
            bag.cols
        )));
    }
    let sum: f64 = weights.iter().sum();
    if !((sum - 1.0).abs() <= SUM_TOLERANCE) {
        return Err(Error::Contract(format!("weights sum to {sum}, not 1")));
    }
    let min = weights.iter().copied().fold(f64::INFINITY, f64::min);
    let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let normalized = if max > min {
        weights.iter().map(|w| (w - min) / (max - min)).collect()
    } else {
        vec![0.5; weights.len()]
    };
    Ok(Heatmap {
        rows: bag.rows,
        cols: bag.cols,
        weights: weights.to_vec(),
        normalized,
        min,
        max,
        spec: bag.spec,
        origins: bag.origins.clone(),
    })
}

/// Turn arbitrary per-instance scores into weights with a softmax. Order is
/// preserved, so top-k sets are unchanged.
pub fn scores_to_weights(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// 256-entry blue to red lookup table.
pub fn colormap() -> &'static [[u8; 3]; 256] {
    static LUT: OnceLock<[[u8; 3]; 256]> = OnceLock::new();
    LUT.get_or_init(|| {
        let text = include_str!("../data/colormap.csv");
        let mut lut = [[0u8; 3]; 256];
        let mut n = 0;
        for (entry, line) in lut.iter_mut().zip(text.lines()) {
            for (c, v) in entry.iter_mut().zip(line.split(',')) {
                *c = v.trim().parse().expect("colormap entries are bytes");
            }
            n += 1;
        }
        assert_eq!(n, 256, "colormap must have 256 entries");
        lut
    })
}

pub fn colormap_at(normalized: f64) -> [u8; 3] {
    let idx = (normalized.clamp(0.0, 1.0) * 255.0).round() as usize;
    colormap()[idx]
}

pub fn blend(pixel: u8, color: u8, alpha: f64) -> u8 {
    ((1.0 - alpha) * pixel as f64 + alpha * color as f64).round().clamp(0.0, 255.0) as u8
}

/// Alpha-blend the colorized heatmap over `image`. Pixels outside the tiled
/// grid are copied unchanged. Where patches overlap the later one wins.
pub fn render_overlay(image: &SourceImage, heatmap: &Heatmap, alpha: f64) -> Result<SourceImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Contract(format!("alpha must be in [0, 1], got {alpha}")));
    }
    let grid = heatmap.spec.grid(image.width, image.height)?;
    if grid != (heatmap.rows, heatmap.cols) || heatmap.origins.len() != heatmap.len() {
        return Err(Error::Contract(format!(
            "a {}x{} heatmap does not fit a {}x{} image tiled at {}/{}",
            heatmap.rows, heatmap.cols, image.width, image.height, heatmap.spec.patch_size, heatmap.spec.stride
        )));
    }
    let s = heatmap.spec.patch_size;
    let mut cell_of = vec![usize::MAX; image.width * image.height];
    for (p, &(x0, y0)) in heatmap.origins.iter().enumerate() {
        for y in y0..y0 + s {
            cell_of[y * image.width + x0..y * image.width + x0 + s].fill(p);
        }
    }
    let mut out = image.clone();
    for (px, &cell) in out.data.chunks_exact_mut(3).zip(&cell_of) {
        if cell == usize::MAX {
            continue;
        }
        let color = colormap_at(heatmap.normalized[cell]);
        for (v, c) in px.iter_mut().zip(color) {
            *v = blend(*v, c, alpha);
        }
    }
    Ok(out)
}

/// Indices of the `k` largest values; ties go to the lower index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Recall@k of the heatmap's top cells against the true motif cells.
pub fn localization_score(heatmap: &Heatmap, truth_cells: &[usize], k: usize) -> Result<f64> {
    if truth_cells.is_empty() {
        return Err(Error::Contract("localization needs at least one truth cell".into()));
    }
    if k == 0 || k > heatmap.len() {
        return Err(Error::Contract(format!("k = {k} outside 1..={}", heatmap.len())));
    }
    if let Some(&c) = truth_cells.iter().find(|&&c| c >= heatmap.len()) {
        return Err(Error::Contract(format!("truth cell {c} outside a grid of {}", heatmap.len())));
    }
    let mut truth = truth_cells.to_vec();
    truth.sort_unstable();
    truth.dedup();
    let hits = top_k(&heatmap.weights, k)
        .into_iter()
        .filter(|c| truth.binary_search(c).is_ok())
        .count();
    Ok(hits as f64 / k.min(truth.len()) as f64)
}

/// Raw weights as a `rows` line by `cols` column CSV grid.
pub fn heatmap_csv(heatmap: &Heatmap) -> String {
    let mut out = String::new();
    for row in heatmap.weights.chunks(heatmap.cols) {
        let cells: Vec<String> = row.iter().map(|w| format!("{w:e}")).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}
