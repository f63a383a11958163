mod common;

use amil_core::bags::{synth_generate, tile, Bag, SourceImage, SynthConfig};
use amil_core::model::{AmilModel, ModelConfig, PoolingMode};
use amil_core::tensor::Tensor;
use amil_core::training::{
    compute_gradients, evaluate, fit, fit_from, metrics_csv, train_step, Optimizer, OptimizerKind, TrainConfig,
    Trainer,
};
use amil_core::Error;
use common::*;
use rand::Rng;

fn small_synth(n: usize, seed: u64) -> Vec<SourceImage> {
    let config = SynthConfig {
        n_bags: n,
        rows: 2,
        cols: 2,
        motif_rate: 0.4,
        seed,
        ..SynthConfig::default()
    };
    synth_generate(&config).unwrap().into_iter().map(|s| s.image).collect()
}

fn bags(images: &[SourceImage]) -> Vec<Bag> {
    images.iter().map(|i| tile(i, spec28()).unwrap()).collect()
}

fn quick_config(epochs: usize, optimizer: OptimizerKind, augment: bool) -> TrainConfig {
    TrainConfig {
        epochs,
        seed: 3,
        optimizer,
        augment,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let bag = &bags(&small_synth(2, 1))[0];
    for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        let mut model = AmilModel::<f32>::new(ModelConfig::default(), 2).unwrap();
        let before = model.clone();
        let mut opt = Optimizer::new(kind, &model, 0.0);
        train_step(&mut model, bag, bag.label, &mut opt, 0.0).unwrap();
        assert_eq!(model, before, "{kind}");
    }
}

#[test]
fn sgd_step_moves_by_learning_rate_times_gradient() {
    let bag = &bags(&small_synth(2, 2))[1];
    let mut model = AmilModel::<f32>::new(ModelConfig::default(), 3).unwrap();
    let grads = compute_gradients(&model, &bag.patches, bag.label).unwrap().grads;
    let lr = 0.05f64;
    let expected: Vec<f32> = model
        .flatten()
        .iter()
        .zip(grads.concat())
        .map(|(&p, g)| p - lr as f32 * g)
        .collect();
    let mut opt = Optimizer::new(OptimizerKind::Sgd, &model, 0.0);
    train_step(&mut model, bag, bag.label, &mut opt, lr).unwrap();
    assert_eq!(model.flatten(), expected);
}

#[test]
fn loss_decreases_on_a_separable_bag() {
    let images = small_synth(4, 3);
    let bag = bags(&images).into_iter().find(|b| b.label).unwrap();
    // f32 losses bottom out near 1e-7 within a few Adam steps, so use f64
    let mut model = AmilModel::<f64>::new(ModelConfig::default(), 4).unwrap();
    let mut opt = Optimizer::new(OptimizerKind::Sgd, &model, 0.0);
    let losses: Vec<f64> = (0..11)
        .map(|_| train_step(&mut model, &bag, true, &mut opt, 0.01).unwrap().loss)
        .collect();
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn recorded_loss_matches_independent_cross_entropy() {
    let mut r = rng(5);
    let patches = random_patches::<f32>(3, 28, &mut r);
    let bag = Bag {
        patches,
        rows: 1,
        cols: 3,
        origins: vec![(0, 0), (28, 0), (56, 0)],
        spec: spec28(),
        label: true,
        source: "r".into(),
    };
    for label in [false, true] {
        let mut model = AmilModel::<f64>::new(ModelConfig::default(), 6).unwrap();
        let p = model.forward_bag(&bag).unwrap().probability;
        let expected = if label { -p.ln() } else { -(1.0 - p).ln() };
        let mut opt = Optimizer::new(OptimizerKind::Adam, &model, 0.0);
        let out = train_step(&mut model, &bag, label, &mut opt, 0.001).unwrap();
        assert!((out.loss - expected).abs() < 1e-9);
        assert_eq!(out.probability, p);
    }
}

#[test]
fn non_finite_loss_reports_gradient_norms() {
    let bag = &bags(&small_synth(1, 4))[0];
    let mut model = AmilModel::<f32>::new(ModelConfig::default(), 7).unwrap();
    model.head.bias = Tensor::new([1], vec![f32::NAN]).unwrap();
    let before = model.clone().flatten();
    let mut opt = Optimizer::new(OptimizerKind::Sgd, &model, 0.0);
    match train_step(&mut model, bag, true, &mut opt, 0.1) {
        Err(Error::Training { grad_norms, .. }) => assert!(grad_norms.contains("head.bias=")),
        other => panic!("{other:?}"),
    }
    let after = model.flatten();
    assert!(after.iter().zip(&before).all(|(a, b)| a == b || (a.is_nan() && b.is_nan())));
}

#[test]
fn evaluate_examples() {
    let images = small_synth(10, 5);
    let all = bags(&images);
    let mut model = AmilModel::<f32>::new(ModelConfig::default(), 8).unwrap();
    model.head.weight = Tensor::zeros(model.head.weight.shape().to_vec());
    let negatives = all.iter().filter(|b| !b.label).count() as f64 / all.len() as f64;
    assert_eq!(evaluate(&model, &all).unwrap(), negatives);
    assert!(matches!(evaluate(&model, &[]), Err(Error::Contract(_))));
}

#[test]
fn evaluate_matches_counting_loop() {
    let mut r = rng(9);
    let model = AmilModel::<f32>::new(ModelConfig::default(), 10).unwrap();
    let bags: Vec<Bag> = (0..20)
        .map(|_| {
            let mut image = random_image(56, 28, &mut r);
            image.label = r.gen_bool(0.5);
            tile(&image, spec28()).unwrap()
        })
        .collect();
    let mut correct = 0;
    for bag in &bags {
        let p = model.forward_bag(bag).unwrap().probability;
        if (p > 0.5) == bag.label {
            correct += 1;
        }
    }
    assert_eq!(evaluate(&model, &bags).unwrap(), correct as f64 / 20.0);
}

#[test]
fn one_epoch_gives_one_metrics_row() {
    let images = small_synth(6, 6);
    let out = fit(&images[..4], &images[4..], &quick_config(1, OptimizerKind::Adam, false)).unwrap();
    assert_eq!(out.history.len(), 1);
    let m = &out.history[0];
    assert_eq!(m.epoch, 1);
    assert!((0.0..=1.0).contains(&m.train_accuracy) && (0.0..=1.0).contains(&m.val_accuracy));
    assert!(fit(&images[..4], &images[4..], &quick_config(0, OptimizerKind::Adam, false)).is_err());
    assert!(fit(&images[..4], &[], &quick_config(1, OptimizerKind::Adam, false)).is_err());
}

#[test]
fn best_model_is_the_first_best_validation_epoch() {
    let images = small_synth(8, 7);
    let out = fit(&images[..6], &images[6..], &quick_config(3, OptimizerKind::Adam, true)).unwrap();
    let best_acc = out.history.iter().map(|m| m.val_accuracy).fold(0.0, f64::max);
    let first = out.history.iter().find(|m| m.val_accuracy == best_acc).unwrap();
    assert_eq!(out.best.epoch, first.epoch);
    assert_eq!(out.best.val_accuracy, best_acc);
    let val = bags(&images[6..]);
    assert_eq!(evaluate(&out.best.model, &val).unwrap(), best_acc);
}

#[test]
fn training_is_deterministic() {
    let images = small_synth(8, 8);
    let config = quick_config(2, OptimizerKind::Adam, true);
    let a = fit(&images[..6], &images[6..], &config).unwrap();
    let b = fit(&images[..6], &images[6..], &config).unwrap();
    assert_eq!(metrics_csv(&a.history, false), metrics_csv(&b.history, false));
    assert_eq!(a.trainer.model, b.trainer.model);
    let other = fit(&images[..6], &images[6..], &TrainConfig { seed: 4, ..config }).unwrap();
    assert_ne!(other.trainer.model, a.trainer.model);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let images = small_synth(8, 9);
    let (train, val) = (&images[..6], &images[6..]);
    for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        let config = quick_config(3, kind, true);
        let full = fit(train, val, &config).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("state");
        let first = fit(train, val, &TrainConfig { epochs: 1, ..config.clone() }).unwrap();
        first.trainer.save(&prefix).unwrap();
        let resumed = Trainer::load(config.clone(), &prefix).unwrap();
        assert_eq!(resumed.epoch, 1);
        let rest = fit_from(resumed, train, val).unwrap();

        assert_eq!(rest.trainer.model, full.trainer.model, "{kind}");
        assert_eq!(rest.trainer.optimizer, full.trainer.optimizer, "{kind}");
        assert_eq!(rest.best, full.best, "{kind}");
        let joined: Vec<_> = first.history.iter().chain(&rest.history).cloned().collect();
        assert_eq!(metrics_csv(&joined, false), metrics_csv(&full.history, false));
    }
}

#[test]
fn resume_rejects_a_different_architecture() {
    let images = small_synth(4, 10);
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("state");
    let out = fit(&images[..3], &images[3..], &quick_config(1, OptimizerKind::Adam, false)).unwrap();
    out.trainer.save(&prefix).unwrap();
    let other = TrainConfig {
        pooling: PoolingMode::Mean,
        ..quick_config(2, OptimizerKind::Adam, false)
    };
    assert!(matches!(Trainer::load(other, &prefix), Err(Error::Checkpoint(_))));
    let sgd = quick_config(2, OptimizerKind::Sgd, false);
    assert!(matches!(Trainer::load(sgd, &prefix), Err(Error::Checkpoint(_))));
}

#[test]
fn model_checkpoint_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("model");
    for mode in [PoolingMode::Attention, PoolingMode::Max] {
        let model = AmilModel::<f32>::new(ModelConfig { pooling: mode, ..ModelConfig::default() }, 11).unwrap();
        model.save(&prefix).unwrap();
        let back = AmilModel::<f32>::load(&prefix).unwrap();
        assert_eq!(back, model);
        let bits = |m: &AmilModel<f32>| m.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&model));
    }
}
