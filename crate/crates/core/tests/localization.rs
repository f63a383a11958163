mod common;

use amil_core::bags::{tile, Bag, TilingSpec};
use amil_core::localization::{
    attention_to_heatmap, blend, colormap, heatmap_csv, localization_score, render_overlay, top_k,
    weights_to_heatmap, Heatmap,
};
use amil_core::model::AttentionOutput;
use amil_core::Error;
use common::*;
use proptest::prelude::*;
use rand::Rng;

fn bag_of(width: usize, height: usize, seed: u64) -> (amil_core::bags::SourceImage, Bag) {
    let image = random_image(width, height, &mut rng(seed));
    let bag = tile(&image, spec28()).unwrap();
    (image, bag)
}

fn one_hot(m: usize, hot: usize) -> Vec<f64> {
    let mut w = vec![0.0; m];
    w[hot] = 1.0;
    w
}

fn random_weights(m: usize, r: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..m).map(|_| r.gen_range(0.0..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|x| x / total).collect()
}

#[test]
fn one_hot_attention_normalizes_to_a_single_cell() {
    let (_, bag) = bag_of(5 * 28, 4 * 28, 1);
    let att = AttentionOutput {
        weights: one_hot(20, 13).into_iter().map(|w| w as f32).collect(),
        bag_feature: vec![],
    };
    let h = attention_to_heatmap(&att, &bag).unwrap();
    assert_eq!((h.rows, h.cols), (4, 5));
    assert_eq!(h.at(2, 3), 1.0);
    assert_eq!(h.normalized.iter().filter(|&&v| v == 1.0).count(), 1);
    assert_eq!(h.normalized.iter().filter(|&&v| v == 0.0).count(), 19);
    assert_eq!((h.min, h.max), (0.0, 1.0));
}

#[test]
fn uniform_attention_displays_at_one_half() {
    let (_, bag) = bag_of(700, 460, 2);
    let h = weights_to_heatmap(&vec![1.0 / 400.0; 400], &bag).unwrap();
    assert!(h.normalized.iter().all(|&v| v == 0.5));
}

#[test]
fn argmax_maps_through_row_major_order() {
    let mut r = rng(3);
    let (_, bag) = bag_of(7 * 28, 3 * 28, 4);
    for _ in 0..50 {
        let w = random_weights(21, &mut r);
        let h = weights_to_heatmap(&w, &bag).unwrap();
        let best = (0..21).fold(0, |b, i| if w[i] > w[b] { i } else { b });
        assert_eq!(h.argmax(), best);
        assert_eq!(h.at(best / 7, best % 7), w[best]);
        assert_eq!(h.normalized[best], 1.0);
        assert_eq!(bag.origins[best], ((best % 7) * 28, (best / 7) * 28));
    }
}

#[test]
fn heatmap_contract_errors() {
    let (_, bag) = bag_of(56, 56, 5);
    assert!(matches!(weights_to_heatmap(&[0.5, 0.5], &bag), Err(Error::Contract(_))));
    assert!(matches!(weights_to_heatmap(&[0.5, 0.5, 0.5, 0.5], &bag), Err(Error::Contract(_))));
}

#[test]
fn zero_alpha_leaves_the_image_untouched() {
    let (image, bag) = bag_of(100, 70, 6);
    let h = weights_to_heatmap(&random_weights(bag.len(), &mut rng(7)), &bag).unwrap();
    let out = render_overlay(&image, &h, 0.0).unwrap();
    assert_eq!(out, image);
}

#[test]
fn full_alpha_one_hot_paints_a_single_hot_patch() {
    let (image, bag) = bag_of(100, 70, 8);
    assert_eq!((bag.rows, bag.cols), (2, 3));
    let h = weights_to_heatmap(&one_hot(6, 4), &bag).unwrap();
    let out = render_overlay(&image, &h, 1.0).unwrap();
    assert_eq!((out.width, out.height), (100, 70));
    let lut = colormap();
    for y in 0..70 {
        for x in 0..100 {
            let px = out.pixel(x, y);
            if x >= 84 || y >= 56 {
                assert_eq!(px, image.pixel(x, y), "untiled pixel {x},{y}");
            } else if (x / 28, y / 28) == (1, 1) {
                assert_eq!(px, lut[255]);
            } else {
                assert_eq!(px, lut[0]);
            }
        }
    }
}

#[test]
fn blend_matches_scalar_formula() {
    let mut r = rng(9);
    let (image, bag) = bag_of(56, 28, 10);
    for _ in 0..50 {
        let alpha: f64 = r.gen_range(0.0..=1.0);
        let w = random_weights(2, &mut r);
        let h = weights_to_heatmap(&w, &bag).unwrap();
        let out = render_overlay(&image, &h, alpha).unwrap();
        let (x, y) = (r.gen_range(0..56), r.gen_range(0..28));
        let cell = x / 28;
        let color = colormap()[(h.normalized[cell] * 255.0).round() as usize];
        for c in 0..3 {
            let expect = (1.0 - alpha) * image.pixel(x, y)[c] as f64 + alpha * color[c] as f64;
            assert!((out.pixel(x, y)[c] as f64 - expect).abs() <= 1.0);
        }
    }
    assert_eq!(blend(100, 200, 0.25), 125);
}

#[test]
fn overlay_rejects_foreign_geometry_and_bad_alpha() {
    let (image, bag) = bag_of(84, 56, 11);
    let h = weights_to_heatmap(&vec![1.0 / 6.0; 6], &bag).unwrap();
    let (other, _) = bag_of(56, 56, 12);
    assert!(matches!(render_overlay(&other, &h, 0.4), Err(Error::Contract(_))));
    assert!(render_overlay(&image, &h, 1.5).is_err());
    let mut h2 = h.clone();
    h2.spec = TilingSpec::non_overlapping(14).unwrap();
    assert!(render_overlay(&image, &h2, 0.4).is_err());
}

fn grid_heatmap(weights: Vec<f64>, cols: usize) -> Heatmap {
    let n = weights.len();
    let image = random_image(cols * 28, n / cols * 28, &mut rng(0));
    let bag = tile(&image, spec28()).unwrap();
    weights_to_heatmap(&weights, &bag).unwrap()
}

#[test]
fn score_examples() {
    let h = grid_heatmap(one_hot(9, 4), 3);
    assert_eq!(localization_score(&h, &[4], 1).unwrap(), 1.0);
    assert_eq!(localization_score(&h, &[0, 8], 1).unwrap(), 0.0);
    // ties: everything equal picks cells 0 and 1
    let flat = grid_heatmap(vec![1.0 / 9.0; 9], 3);
    assert_eq!(localization_score(&flat, &[1, 5], 2).unwrap(), 0.5);
    assert!(localization_score(&h, &[], 1).is_err());
    assert!(localization_score(&h, &[1], 0).is_err());
    assert!(localization_score(&h, &[1], 10).is_err());
}

/// Cell `i` is in the top k when fewer than k cells beat it, counting a tie
/// at a lower index as a win.
fn brute_force_recall(w: &[f64], truth: &[usize], k: usize) -> f64 {
    let selected: Vec<usize> = (0..w.len())
        .filter(|&i| (0..w.len()).filter(|&j| w[j] > w[i] || (w[j] == w[i] && j < i)).count() < k)
        .collect();
    let hits = selected.iter().filter(|i| truth.contains(i)).count();
    hits as f64 / k.min(truth.len()) as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn score_matches_brute_force(seed in any::<u64>(), k in 1usize..=16, coarse in any::<bool>()) {
        let mut r = rng(seed);
        let mut raw: Vec<f64> = (0..16).map(|_| r.gen_range(0.0..1.0)).collect();
        if coarse {
            for v in raw.iter_mut() {
                *v = (*v * 4.0).floor() + 1.0;
            }
        }
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let truth: Vec<usize> = (0..16).filter(|_| r.gen_bool(0.3)).collect();
        prop_assume!(!truth.is_empty());
        let h = grid_heatmap(w.clone(), 4);
        let score = localization_score(&h, &truth, k).unwrap();
        prop_assert_eq!(score, brute_force_recall(&h.weights, &truth, k));
        prop_assert_eq!(top_k(&h.weights, k), top_k(&h.normalized, k));
    }
}

#[test]
fn csv_grid_round_trips_raw_weights() {
    let w = random_weights(12, &mut rng(13));
    let h = grid_heatmap(w.clone(), 4);
    let text = heatmap_csv(&h);
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.len() == 4));
    let flat: Vec<f64> = rows.concat();
    assert_eq!(flat, w);
    assert!((flat.iter().sum::<f64>() - 1.0).abs() < 1e-6);
}
