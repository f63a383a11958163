#![allow(dead_code)]

use amil_core::bags::{SourceImage, TilingSpec};
use amil_core::model::{ModelConfig, PoolingMode};
use amil_core::tensor::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Same layer structure as the default model at a fraction of the width.
pub fn narrow_config(pooling: PoolingMode) -> ModelConfig {
    ModelConfig {
        conv1_channels: 3,
        conv2_channels: 4,
        feature_dim: 12,
        attention_dim: 6,
        pooling,
        ..ModelConfig::default()
    }
}

pub fn random_tensor<T: Real>(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.gen_range(lo..hi))).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn random_patches<T: Real>(m: usize, side: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor<T>> {
    (0..m).map(|_| random_tensor(&[3, side, side], 0.0, 1.0, rng)).collect()
}

pub fn random_image(width: usize, height: usize, rng: &mut ChaCha8Rng) -> SourceImage {
    let data = (0..width * height * 3).map(|_| rng.gen()).collect();
    SourceImage::new(width, height, data, false, "random").unwrap()
}

pub fn spec28() -> TilingSpec {
    TilingSpec::default()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Attention weights written out scalar by scalar: `aₚ ∝ exp(Σ_d w_d tanh(Σ_l V_dl h_pl))`.
pub fn attention_loop(h: &Tensor<f64>, v: &Tensor<f64>, w: &Tensor<f64>) -> Vec<f64> {
    let (m, l) = (h.shape()[0], h.shape()[1]);
    let d = v.shape()[0];
    let mut logits = vec![0.0; m];
    for p in 0..m {
        for r in 0..d {
            let mut inner = 0.0;
            for c in 0..l {
                inner += v.at(&[r, c]) * h.at(&[p, c]);
            }
            logits[p] += w.data()[r] * inner.tanh();
        }
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for &s in &logits {
        denom += (s - max).exp();
    }
    logits.iter().map(|&s| (s - max).exp() / denom).collect()
}

/// `z_l = Σₚ aₚ h_pl` as a double loop.
pub fn aggregate_loop(h: &Tensor<f64>, a: &[f64]) -> Vec<f64> {
    let (m, l) = (h.shape()[0], h.shape()[1]);
    let mut z = vec![0.0; l];
    for p in 0..m {
        for c in 0..l {
            z[c] += a[p] * h.at(&[p, c]);
        }
    }
    z
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
