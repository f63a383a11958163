//! Synthetic motif bags with known instance labels.
//!
//! Every image is a grid of `rows × cols` cells of `patch_size` pixels over a
//! smooth, pink-ish background. Positive images carry a dark disc in at least
//! one cell; negative images carry none.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SourceImage;
use crate::error::{Error, Result};
use crate::model::bag_label;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_bags: usize,
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
    pub positive_fraction: f64,
    /// Per-cell probability of a motif in a positive image.
    pub motif_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_bags: 200,
            rows: 5,
            cols: 5,
            patch_size: 28,
            positive_fraction: 0.5,
            motif_rate: 0.15,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub image: SourceImage,
    /// Row-major indices of cells holding a motif, ascending.
    pub motif_cells: Vec<usize>,
}

const BACKGROUND: [f64; 3] = [225.0, 175.0, 205.0];
const MOTIF: [f64; 3] = [75.0, 35.0, 105.0];

/// Bilinearly interpolated lattice noise in roughly `[-1, 1]`.
struct ValueNoise {
    lattice: Vec<f64>,
    nx: usize,
    spacing: f64,
}

impl ValueNoise {
    fn new(width: usize, height: usize, spacing: usize, rng: &mut ChaCha8Rng) -> Self {
        let nx = width / spacing + 2;
        let ny = height / spacing + 2;
        ValueNoise {
            lattice: (0..nx * ny).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            nx,
            spacing: spacing as f64,
        }
    }

    fn at(&self, x: usize, y: usize) -> f64 {
        let (fx, fy) = (x as f64 / self.spacing, y as f64 / self.spacing);
        let (ix, iy) = (fx as usize, fy as usize);
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (smooth(fx - ix as f64), smooth(fy - iy as f64));
        let v = |i: usize, j: usize| self.lattice[j * self.nx + i];
        let top = v(ix, iy) * (1.0 - tx) + v(ix + 1, iy) * tx;
        let bottom = v(ix, iy + 1) * (1.0 - tx) + v(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn render(config: &SynthConfig, motif_cells: &[usize], rng: &mut ChaCha8Rng) -> Vec<u8> {
    let s = config.patch_size;
    let (width, height) = (config.cols * s, config.rows * s);
    let spacing = (s / 2).max(1);
    let noise: Vec<ValueNoise> = (0..3).map(|_| ValueNoise::new(width, height, spacing, rng)).collect();
    let mut data = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for x in 0..width {
            for (ch, n) in noise.iter().enumerate() {
                let v = BACKGROUND[ch] + 22.0 * n.at(x, y) + rng.gen_range(-5.0..5.0);
                data.push(to_u8(v));
            }
        }
    }

    for &cell in motif_cells {
        let (r, c) = (cell / config.cols, cell % config.cols);
        let radius = rng.gen_range(0.22..0.32) * s as f64;
        let slack = (s as f64 / 2.0 - radius - 1.0).max(0.0);
        let cx = (c * s) as f64 + s as f64 / 2.0 + rng.gen_range(-slack..=slack);
        let cy = (r * s) as f64 + s as f64 / 2.0 + rng.gen_range(-slack..=slack);
        for y in r * s..(r + 1) * s {
            for x in c * s..(c + 1) * s {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= radius * radius {
                    for (ch, &base) in MOTIF.iter().enumerate() {
                        data[(y * width + x) * 3 + ch] = to_u8(base + rng.gen_range(-8.0..8.0));
                    }
                }
            }
        }
    }
    data
}

/// Generate `n_bags` labelled images together with their motif cells.
///
/// Exactly `round(n_bags · positive_fraction)` images are positive. Each image
/// draws from its own stream of the seeded generator, so the output depends
/// only on the config.
pub fn synth_generate(config: &SynthConfig) -> Result<Vec<SynthSample>> {
    if !(config.motif_rate > 0.0 && config.motif_rate <= 1.0) {
        return Err(Error::Contract(format!("motif_rate must be in (0, 1], got {}", config.motif_rate)));
    }
    if !(0.0..=1.0).contains(&config.positive_fraction) {
        return Err(Error::Contract(format!(
            "positive_fraction must be in [0, 1], got {}",
            config.positive_fraction
        )));
    }
    if config.rows == 0 || config.cols == 0 || config.patch_size == 0 {
        return Err(Error::Geometry("synthetic grid and patch size must be positive".into()));
    }

    let n_pos = (config.n_bags as f64 * config.positive_fraction).round() as usize;
    let mut positive = vec![false; config.n_bags];
    positive[..n_pos].fill(true);
    positive.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));

    let cells = config.rows * config.cols;
    let mut samples = Vec::with_capacity(config.n_bags);
    for (i, &is_pos) in positive.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(i as u64 + 1);
        let mut flags = vec![false; cells];
        if is_pos {
            while !flags.contains(&true) {
                for f in flags.iter_mut() {
                    *f = rng.gen_bool(config.motif_rate);
                }
            }
        }
        let motif_cells: Vec<usize> = (0..cells).filter(|&c| flags[c]).collect();
        let data = render(config, &motif_cells, &mut rng);
        let image = SourceImage::new(
            config.cols * config.patch_size,
            config.rows * config.patch_size,
            data,
            bag_label(&flags)?,
            format!("bag_{i:04}"),
        )?;
        samples.push(SynthSample { image, motif_cells });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> SynthConfig {
        SynthConfig {
            n_bags: n,
            rows: 3,
            cols: 4,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn all_negative_when_fraction_zero() {
        let cfg = SynthConfig {
            positive_fraction: 0.0,
            ..small(12)
        };
        let out = synth_generate(&cfg).unwrap();
        assert!(out.iter().all(|s| !s.image.label && s.motif_cells.is_empty()));
    }

    #[test]
    fn positives_have_motifs_and_exact_count() {
        let out = synth_generate(&small(20)).unwrap();
        assert_eq!(out.iter().filter(|s| s.image.label).count(), 10);
        for s in &out {
            assert_eq!(s.image.label, !s.motif_cells.is_empty());
            assert_eq!((s.image.width, s.image.height), (4 * 28, 3 * 28));
        }
    }

    #[test]
    fn motif_darkens_its_cell() {
        let cfg = SynthConfig {
            positive_fraction: 1.0,
            motif_rate: 1.0,
            ..small(1)
        };
        let s = &synth_generate(&cfg).unwrap()[0];
        assert_eq!(s.motif_cells.len(), 12);
        // a disc of radius ≥ 0.22·28 covers well over 80 pixels of the cell
        let dark = (0..28)
            .flat_map(|y| (0..28).map(move |x| (x, y)))
            .filter(|&(x, y)| s.image.pixel(x, y)[0] < 120)
            .count();
        assert!(dark > 80, "{dark}");
    }

    #[test]
    fn rejects_bad_rates() {
        let cfg = SynthConfig {
            motif_rate: 0.0,
            ..small(2)
        };
        assert!(synth_generate(&cfg).is_err());
    }
}
