//! Per-bag training (batch size one), evaluation and resumable checkpoints.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::bags::{augment, tile, Bag, SourceImage, TilingSpec, Transform};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{AmilModel, ModelConfig, PoolingMode, PARAM_NAMES};
use crate::rng;
use crate::tensor::{Real, Tape, Tensor};

/// Probability above which a bag is predicted positive.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other:?} (expected sgd or adam)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub pooling: PoolingMode,
    pub augment: bool,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub tiling: TilingSpec,
    pub attention_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            epochs: 20,
            seed: 0,
            pooling: PoolingMode::Attention,
            augment: false,
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.0,
            tiling: TilingSpec::default(),
            attention_dim: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay must be non-negative, got {}", self.weight_decay)));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            patch_size: self.tiling.patch_size,
            attention_dim: self.attention_dim,
            pooling: self.pooling,
            ..ModelConfig::default()
        }
    }
}

/// SGD or Adam (β₁ = 0.9, β₂ = 0.999, ε = 1e-8) with optional L2 weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T: Real = f32> {
    pub kind: OptimizerKind,
    pub weight_decay: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    pub step: u64,
    /// First and second moment estimates, one buffer per parameter (Adam only).
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, model: &AmilModel<T>, weight_decay: f64) -> Self {
        let zeros = || -> Vec<Vec<T>> {
            match kind {
                OptimizerKind::Adam => model.params().iter().map(|p| vec![T::zero(); p.len()]).collect(),
                OptimizerKind::Sgd => Vec::new(),
            }
        };
        Optimizer {
            kind,
            weight_decay: T::from_f64(weight_decay),
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            epsilon: T::from_f64(1e-8),
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }

    /// Apply one update from per-parameter gradients.
    pub fn update(&mut self, model: &mut AmilModel<T>, grads: &[Vec<T>], learning_rate: f64) {
        self.step += 1;
        let lr = T::from_f64(learning_rate);
        let wd = self.weight_decay;
        match self.kind {
            OptimizerKind::Sgd => {
                for (param, g) in model.params_mut().into_iter().zip(grads) {
                    for (p, &gv) in param.data_mut().iter_mut().zip(g) {
                        *p = *p - lr * (gv + wd * *p);
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (self.beta1, self.beta2);
                let t = self.step as i32;
                let c1 = T::one() - b1.powi(t);
                let c2 = T::one() - b2.powi(t);
                let params = model.params_mut();
                for (((param, g), m), v) in params
                    .into_iter()
                    .zip(grads)
                    .zip(&mut self.first_moment)
                    .zip(&mut self.second_moment)
                {
                    for (((p, &gv), mv), vv) in param.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let gv = gv + wd * *p;
                        *mv = b1 * *mv + (T::one() - b1) * gv;
                        *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                        let m_hat = *mv / c1;
                        let v_hat = *vv / c2;
                        *p = *p - lr * m_hat / (v_hat.sqrt() + self.epsilon);
                    }
                }
            }
        }
    }
}

/// Loss and probability of one bag with gradients for every parameter, in
/// [`PARAM_NAMES`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct BagGradients<T = f32> {
    pub loss: T,
    pub probability: T,
    pub grads: Vec<Vec<T>>,
}

pub fn compute_gradients<T: Real, P: Real>(
    model: &AmilModel<T>,
    patches: &[Tensor<P>],
    label: bool,
) -> Result<BagGradients<T>> {
    if patches.is_empty() {
        return Err(Error::Contract("cannot train on an empty bag".into()));
    }
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let inputs: Vec<_> = patches.iter().map(|p| tape.constant(p.cast())).collect();
    let graph = model.forward_graph(&mut tape, &vars, &inputs)?;
    let target = if label { T::one() } else { T::zero() };
    let loss = tape.bce(graph.probability, target)?;
    tape.backward(loss)?;
    let grads = vars
        .all()
        .iter()
        .map(|&v| tape.grad(v).expect("parameters always receive gradients").to_vec())
        .collect();
    Ok(BagGradients {
        loss: tape.value(loss).item()?,
        probability: tape.value(graph.probability).item()?,
        grads,
    })
}

/// Result of one optimisation step; values are from before the update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub probability: f64,
}

/// One forward, one backward and one update on a single bag.
pub fn train_step<T: Real>(
    model: &mut AmilModel<T>,
    bag: &Bag,
    label: bool,
    optimizer: &mut Optimizer<T>,
    learning_rate: f64,
) -> Result<StepOutcome> {
    let out = compute_gradients(model, &bag.patches, label)?;
    let norms: Vec<f64> = out
        .grads
        .iter()
        .map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt())
        .collect();
    if !out.loss.is_finite() || norms.iter().any(|n| !n.is_finite()) {
        let mut detail = String::new();
        for (name, n) in PARAM_NAMES.iter().zip(&norms) {
            let _ = write!(detail, "{name}={n:.3e} ");
        }
        return Err(Error::Training {
            loss: out.loss.as_f64(),
            grad_norms: detail.trim_end().to_string(),
        });
    }
    optimizer.update(model, &out.grads, learning_rate);
    Ok(StepOutcome {
        loss: out.loss.as_f64(),
        probability: out.probability.as_f64(),
    })
}

pub fn predict_label(probability: f64) -> bool {
    probability > DECISION_THRESHOLD
}

/// Fraction of bags whose thresholded prediction equals the label.
pub fn evaluate<T: Real>(model: &AmilModel<T>, bags: &[Bag]) -> Result<f64> {
    if bags.is_empty() {
        return Err(Error::Contract("cannot evaluate on zero bags".into()));
    }
    let mut correct = 0usize;
    for bag in bags {
        let p = model.forward_bag(bag)?.probability.as_f64();
        if predict_label(p) == bag.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / bags.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,val_acc,seconds";

/// Render metrics as CSV. Without `with_time` the `seconds` column is
/// written as zero so the file depends only on the training inputs.
pub fn metrics_csv(history: &[Metrics], with_time: bool) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in history {
        let secs = if with_time { m.seconds } else { 0.0 };
        let _ = writeln!(
            out,
            "{},{:.6},{:.4},{:.4},{:.3}",
            m.epoch, m.train_loss, m.train_accuracy, m.val_accuracy, secs
        );
    }
    out
}

/// Training state that survives a checkpoint round trip.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: AmilModel<f32>,
    pub optimizer: Optimizer<f32>,
    /// Number of completed epochs.
    pub epoch: usize,
    pub best: Option<BestModel>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestModel {
    pub epoch: usize,
    pub val_accuracy: f64,
    pub model: AmilModel<f32>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = AmilModel::new(config.model_config(), config.seed)?;
        let optimizer = Optimizer::new(config.optimizer, &model, config.weight_decay);
        Ok(Trainer {
            config,
            model,
            optimizer,
            epoch: 0,
            best: None,
        })
    }

    /// Training bags for epoch `epoch` (0-based), in visiting order.
    fn epoch_bags(&self, train: &[SourceImage], epoch: usize) -> Result<Vec<Bag>> {
        let mut aug_rng = rng::stream(self.config.seed, rng::AUGMENT + epoch as u64);
        let transforms: Vec<Transform> = train
            .iter()
            .map(|_| Transform::ALL[aug_rng.gen_range(0..Transform::ALL.len())])
            .collect();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(self.config.seed, rng::SHUFFLE + epoch as u64));
        order
            .into_iter()
            .map(|i| {
                if self.config.augment {
                    tile(&augment(&train[i], transforms[i]), self.config.tiling)
                } else {
                    tile(&train[i], self.config.tiling)
                }
            })
            .collect()
    }

    /// One pass over `train` followed by validation.
    pub fn run_epoch(&mut self, train: &[SourceImage], val: &[Bag]) -> Result<Metrics> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Contract("training and validation sets must be non-empty".into()));
        }
        let start = Instant::now();
        let bags = self.epoch_bags(train, self.epoch)?;
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for bag in &bags {
            let out = train_step(&mut self.model, bag, bag.label, &mut self.optimizer, self.config.learning_rate)?;
            loss_sum += out.loss;
            if predict_label(out.probability) == bag.label {
                correct += 1;
            }
        }
        let val_accuracy = evaluate(&self.model, val)?;
        self.epoch += 1;
        if self.best.as_ref().is_none_or(|b| val_accuracy > b.val_accuracy) {
            self.best = Some(BestModel {
                epoch: self.epoch,
                val_accuracy,
                model: self.model.clone(),
            });
        }
        Ok(Metrics {
            epoch: self.epoch,
            train_loss: loss_sum / bags.len() as f64,
            train_accuracy: correct as f64 / bags.len() as f64,
            val_accuracy,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Full state: current model, optimizer moments, epoch counter and the
    /// best-validation model.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new();
        ckpt.put_model("", &self.model)?;
        ckpt.set_meta("stride", self.config.tiling.stride)?;
        ckpt.set_meta("epoch", self.epoch)?;
        ckpt.set_meta("optimizer", self.optimizer.kind)?;
        ckpt.set_meta("optimizer_step", self.optimizer.step)?;
        for (name, (m, v)) in PARAM_NAMES
            .iter()
            .zip(self.optimizer.first_moment.iter().zip(&self.optimizer.second_moment))
        {
            ckpt.push_tensor(&format!("optim.m.{name}"), &Tensor::new([m.len()], m.clone())?)?;
            ckpt.push_tensor(&format!("optim.v.{name}"), &Tensor::new([v.len()], v.clone())?)?;
        }
        if let Some(best) = &self.best {
            ckpt.set_meta("best_epoch", best.epoch)?;
            // exact text form of an f64 so the comparison survives a reload
            ckpt.set_meta("best_val_accuracy", best.val_accuracy)?;
            ckpt.put_model("best.", &best.model)?;
        }
        Ok(ckpt)
    }

    pub fn save(&self, prefix: &Path) -> Result<()> {
        self.to_checkpoint()?.save(prefix)
    }

    /// Resume from a checkpoint written by [`Trainer::save`]. Architecture,
    /// tiling and optimizer must agree with `config`.
    pub fn from_checkpoint(config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        config.validate()?;
        let model: AmilModel<f32> = ckpt.get_model("")?;
        if model.config != config.model_config() {
            return Err(Error::Checkpoint(format!(
                "checkpoint architecture {:?} does not match the configured {:?}",
                model.config,
                config.model_config()
            )));
        }
        let kind: OptimizerKind = ckpt.meta_parse("optimizer")?;
        let stride: usize = ckpt.meta_parse("stride")?;
        if kind != config.optimizer || stride != config.tiling.stride {
            return Err(Error::Checkpoint("optimizer or tiling differs from the checkpoint".into()));
        }
        let mut optimizer = Optimizer::new(kind, &model, config.weight_decay);
        optimizer.step = ckpt.meta_parse("optimizer_step")?;
        if kind == OptimizerKind::Adam {
            for (i, name) in PARAM_NAMES.iter().enumerate() {
                optimizer.first_moment[i] = ckpt.require_tensor(&format!("optim.m.{name}"))?.data().to_vec();
                optimizer.second_moment[i] = ckpt.require_tensor(&format!("optim.v.{name}"))?.data().to_vec();
                if optimizer.first_moment[i].len() != model.params()[i].len()
                    || optimizer.second_moment[i].len() != model.params()[i].len()
                {
                    return Err(Error::Checkpoint(format!("optimizer state for {name} has the wrong size")));
                }
            }
        }
        let best = match ckpt.meta("best_epoch") {
            Some(_) => Some(BestModel {
                epoch: ckpt.meta_parse("best_epoch")?,
                val_accuracy: ckpt.meta_parse("best_val_accuracy")?,
                model: ckpt.get_model("best.")?,
            }),
            None => None,
        };
        Ok(Trainer {
            config,
            model,
            optimizer,
            epoch: ckpt.meta_parse("epoch")?,
            best,
        })
    }

    pub fn load(config: TrainConfig, prefix: &Path) -> Result<Self> {
        Self::from_checkpoint(config, &Checkpoint::load(prefix)?)
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// Model with the best validation accuracy (earliest on ties).
    pub best: BestModel,
    /// State after the final epoch.
    pub trainer: Trainer,
    pub history: Vec<Metrics>,
}

/// Train for `config.epochs` passes over `train`, validating on `val`
/// after each pass.
pub fn fit(train: &[SourceImage], val: &[SourceImage], config: &TrainConfig) -> Result<FitOutcome> {
    let trainer = Trainer::new(config.clone())?;
    fit_from(trainer, train, val)
}

/// Continue a (possibly resumed) trainer up to `trainer.config.epochs`.
pub fn fit_from(mut trainer: Trainer, train: &[SourceImage], val: &[SourceImage]) -> Result<FitOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Contract("training and validation sets must be non-empty".into()));
    }
    let val_bags = val
        .iter()
        .map(|img| tile(img, trainer.config.tiling))
        .collect::<Result<Vec<_>>>()?;
    let mut history = Vec::new();
    while trainer.epoch < trainer.config.epochs {
        history.push(trainer.run_epoch(train, &val_bags)?);
    }
    let best = trainer
        .best
        .clone()
        .ok_or_else(|| Error::Contract("no epochs left to run".into()))?;
    Ok(FitOutcome {
        best,
        trainer,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                tiling: TilingSpec::new(30, 30).unwrap(),
                ..TrainConfig::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn metrics_csv_format() {
        let m = Metrics {
            epoch: 1,
            train_loss: 0.5,
            train_accuracy: 0.75,
            val_accuracy: 1.0,
            seconds: 2.5,
        };
        assert_eq!(
            metrics_csv(&[m.clone()], true),
            "epoch,train_loss,train_acc,val_acc,seconds\n1,0.500000,0.7500,1.0000,2.500\n"
        );
        assert!(metrics_csv(&[m], false).ends_with(",0.000\n"));
    }

    #[test]
    fn optimizer_names() {
        assert_eq!("adam".parse::<OptimizerKind>().unwrap(), OptimizerKind::Adam);
        assert_eq!("sgd".parse::<OptimizerKind>().unwrap(), OptimizerKind::Sgd);
        assert!("rmsprop".parse::<OptimizerKind>().is_err());
    }
}
