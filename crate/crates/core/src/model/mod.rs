//! The A-MIL network: a per-patch convolutional feature extractor, an
//! instance pooling operator and a single-logit bag classifier.
//!
//! ```text
//! 3×28×28 ─conv5─ 20×24×24 ─pool─ 20×12×12 ─conv5─ 50×8×8 ─pool─ 50×4×4
//!         ─flatten─ 800 ─fc─ 500 = hₚ
//! aₚ = softmax_p( wᵀ tanh(V hₚᵀ) ),   z = Σₚ aₚ hₚ,   P(y=1) = σ(head(z))
//! ```

pub mod graph;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bags::Bag;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

pub use graph::ModelVars;

/// How instance features are reduced to one bag feature.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum PoolingMode {
    #[default]
    Attention,
    Max,
    Mean,
}

impl PoolingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolingMode::Attention => "attention",
            PoolingMode::Max => "max",
            PoolingMode::Mean => "mean",
        }
    }
}

impl fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoolingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(PoolingMode::Attention),
            "max" => Ok(PoolingMode::Max),
            "mean" => Ok(PoolingMode::Mean),
            other => Err(Error::Config(format!(
                "unknown pooling mode {other:?} (expected attention, max or mean)"
            ))),
        }
    }
}

/// Architecture hyper-parameters. The defaults reproduce the reference
/// extractor for 28×28 RGB patches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub kernel: usize,
    pub pool: usize,
    /// Instance feature length L.
    pub feature_dim: usize,
    /// Attention hidden size D.
    pub attention_dim: usize,
    pub pooling: PoolingMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch_size: 28,
            conv1_channels: 20,
            conv2_channels: 50,
            kernel: 5,
            pool: 2,
            feature_dim: 500,
            attention_dim: 128,
            pooling: PoolingMode::Attention,
        }
    }
}

impl ModelConfig {
    /// Side length after conv → pool → conv → pool, if every step is integral.
    fn trunk_side(&self) -> Result<usize> {
        let step = |side: usize, what: &str| -> Result<usize> {
            if side < self.kernel || !(side - self.kernel + 1).is_multiple_of(self.pool) {
                return Err(Error::Geometry(format!(
                    "patch size {} does not fit the extractor at {what}: \
                     side {side}, kernel {}, pool {}",
                    self.patch_size, self.kernel, self.pool
                )));
            }
            Ok((side - self.kernel + 1) / self.pool)
        };
        let side = step(self.patch_size, "conv1")?;
        step(side, "conv2")
    }

    /// Length of the flattened trunk output fed to the FC layer.
    pub fn flat_features(&self) -> Result<usize> {
        let side = self.trunk_side()?;
        Ok(self.conv2_channels * side * side)
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.conv1_channels,
            self.conv2_channels,
            self.kernel,
            self.pool,
            self.feature_dim,
            self.attention_dim,
        ];
        if sizes.contains(&0) {
            return Err(Error::Config(format!("model sizes must be positive: {self:?}")));
        }
        self.flat_features().map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractorParams<T: Real = f32> {
    pub conv1_weight: Tensor<T>,
    pub conv1_bias: Tensor<T>,
    pub conv2_weight: Tensor<T>,
    pub conv2_bias: Tensor<T>,
    pub fc_weight: Tensor<T>,
    pub fc_bias: Tensor<T>,
}

/// `v` is D×L, `w` is D×1.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T: Real = f32> {
    pub v: Tensor<T>,
    pub w: Tensor<T>,
}

/// Single linear layer L → 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams<T: Real = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Attention weights of one bag and the bag feature they produce.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput<T = f32> {
    pub weights: Vec<T>,
    pub bag_feature: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BagPrediction<T = f32> {
    pub probability: T,
    pub logit: T,
    /// Present iff the model pools with attention.
    pub attention: Option<AttentionOutput<T>>,
}

/// Graph handles produced by [`AmilModel::forward_graph`].
#[derive(Clone, Debug)]
pub struct BagGraph {
    pub features: Var,
    pub attention: Option<Var>,
    pub bag_feature: Var,
    pub logit: Var,
    pub probability: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AmilModel<T: Real = f32> {
    pub config: ModelConfig,
    pub extractor: FeatureExtractorParams<T>,
    pub attention: AttentionParams<T>,
    pub head: ClassifierParams<T>,
}

pub const PARAM_NAMES: [&str; 10] = [
    "extractor.conv1.weight",
    "extractor.conv1.bias",
    "extractor.conv2.weight",
    "extractor.conv2.bias",
    "extractor.fc.weight",
    "extractor.fc.bias",
    "attention.v",
    "attention.w",
    "head.weight",
    "head.bias",
];

impl<T: Real> AmilModel<T> {
    /// Expected shape of every parameter, in [`PARAM_NAMES`] order.
    pub fn param_shapes(config: &ModelConfig) -> Result<Vec<Vec<usize>>> {
        config.validate()?;
        let c = config;
        Ok(vec![
            vec![c.conv1_channels, 3, c.kernel, c.kernel],
            vec![c.conv1_channels],
            vec![c.conv2_channels, c.conv1_channels, c.kernel, c.kernel],
            vec![c.conv2_channels],
            vec![c.feature_dim, c.flat_features()?],
            vec![c.feature_dim],
            vec![c.attention_dim, c.feature_dim],
            vec![c.attention_dim, 1],
            vec![1, c.feature_dim],
            vec![1],
        ])
    }

    /// Assemble a model from tensors in [`PARAM_NAMES`] order.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        let shapes = Self::param_shapes(&config)?;
        if params.len() != shapes.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((name, shape), t) in PARAM_NAMES.iter().zip(&shapes).zip(&params) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Contract(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        let mut it = params.into_iter().map(|t| t.with_requires_grad(true));
        let mut next = || it.next().expect("length checked");
        Ok(AmilModel {
            config,
            extractor: FeatureExtractorParams {
                conv1_weight: next(),
                conv1_bias: next(),
                conv2_weight: next(),
                conv2_bias: next(),
                fc_weight: next(),
                fc_bias: next(),
            },
            attention: AttentionParams { v: next(), w: next() },
            head: ClassifierParams {
                weight: next(),
                bias: next(),
            },
        })
    }

    /// Glorot-uniform weights, zero biases, reproducible per seed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let shapes = Self::param_shapes(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = shapes
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    return Tensor::zeros(shape);
                }
                let receptive: usize = shape[2..].iter().product();
                let fan_in = shape[1] * receptive;
                let fan_out = shape[0] * receptive;
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| T::from_f64(rng.gen_range(-limit..=limit)))
                    .collect();
                Tensor::new(shape, data).expect("shape matches data")
            })
            .collect();
        Self::from_params(config, params)
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let params = Self::param_shapes(&config)?
            .into_iter()
            .map(Tensor::zeros)
            .collect();
        Self::from_params(config, params)
    }

    pub fn params(&self) -> [&Tensor<T>; 10] {
        let e = &self.extractor;
        [
            &e.conv1_weight,
            &e.conv1_bias,
            &e.conv2_weight,
            &e.conv2_bias,
            &e.fc_weight,
            &e.fc_bias,
            &self.attention.v,
            &self.attention.w,
            &self.head.weight,
            &self.head.bias,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor<T>; 10] {
        let e = &mut self.extractor;
        [
            &mut e.conv1_weight,
            &mut e.conv1_bias,
            &mut e.conv2_weight,
            &mut e.conv2_bias,
            &mut e.fc_weight,
            &mut e.fc_bias,
            &mut self.attention.v,
            &mut self.attention.w,
            &mut self.head.weight,
            &mut self.head.bias,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> AmilModel<U> {
        let params = self.params().iter().map(|t| t.cast()).collect();
        AmilModel::from_params(self.config.clone(), params).expect("same config, same shapes")
    }

    /// All parameters concatenated in [`PARAM_NAMES`] order.
    pub fn flatten(&self) -> Vec<T> {
        self.params().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Inverse of [`AmilModel::flatten`].
    pub fn with_flat(&self, flat: &[T]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::dimension("with_flat", &[self.num_params()], &[flat.len()]));
        }
        let mut offset = 0;
        let params = self
            .params()
            .iter()
            .map(|t| {
                let chunk = flat[offset..offset + t.len()].to_vec();
                offset += t.len();
                Tensor::new(t.shape().to_vec(), chunk)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_params(self.config.clone(), params)
    }

    /// Record every parameter on `tape` as a trainable leaf.
    pub fn register(&self, tape: &mut Tape<T>) -> ModelVars {
        ModelVars::from_array(self.params().map(|t| tape.param(t.clone())))
    }

    /// Bind parameters as slices of one flat vector laid out like
    /// [`AmilModel::flatten`].
    pub fn bind_flat(config: &ModelConfig, tape: &mut Tape<T>, flat: Var) -> Result<ModelVars> {
        let shapes = Self::param_shapes(config)?;
        let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if tape.value(flat).len() != total {
            return Err(Error::dimension("bind_flat", tape.shape(flat), &[total]));
        }
        let mut vars = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for shape in shapes {
            let len: usize = shape.iter().product();
            vars.push(tape.slice(flat, offset, shape)?);
            offset += len;
        }
        let vars: [Var; 10] = vars.try_into().expect("ten parameter tensors");
        Ok(ModelVars::from_array(vars))
    }

    /// Record a full bag pass: features, pooling, head and sigmoid.
    pub fn forward_graph(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        patches: &[Var],
    ) -> Result<BagGraph> {
        let features = graph::instance_features(tape, patches, vars, &self.config)?;
        let (attention, bag_feature) = match self.config.pooling {
            PoolingMode::Attention => {
                let a = graph::attention_weights(tape, features, vars.attention_v, vars.attention_w)?;
                (Some(a), graph::aggregate(tape, features, a)?)
            }
            PoolingMode::Max => (None, graph::pool_max(tape, features)?),
            PoolingMode::Mean => (None, graph::pool_mean(tape, features)?),
        };
        let logit = graph::classify(tape, bag_feature, vars)?;
        let probability = tape.sigmoid(logit);
        Ok(BagGraph {
            features,
            attention,
            bag_feature,
            logit,
            probability,
        })
    }

    fn record_patches<P: Real>(tape: &mut Tape<T>, patches: &[Tensor<P>]) -> Vec<Var> {
        patches.iter().map(|p| tape.constant(p.cast())).collect()
    }

    /// Forward pass over raw patch tensors (each `3×s×s`).
    pub fn predict<P: Real>(&self, patches: &[Tensor<P>]) -> Result<BagPrediction<T>> {
        if patches.is_empty() {
            return Err(Error::Contract("cannot evaluate an empty bag".into()));
        }
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let inputs = Self::record_patches(&mut tape, patches);
        let g = self.forward_graph(&mut tape, &vars, &inputs)?;
        let attention = g.attention.map(|a| AttentionOutput {
            weights: tape.value(a).data().to_vec(),
            bag_feature: tape.value(g.bag_feature).data().to_vec(),
        });
        Ok(BagPrediction {
            probability: tape.value(g.probability).item()?,
            logit: tape.value(g.logit).item()?,
            attention,
        })
    }

    pub fn forward_bag(&self, bag: &Bag) -> Result<BagPrediction<T>> {
        self.predict(&bag.patches)
    }

    /// Instance embeddings `H` (m × L).
    pub fn instance_features<P: Real>(&self, patches: &[Tensor<P>]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let inputs = Self::record_patches(&mut tape, patches);
        let h = graph::instance_features(&mut tape, &inputs, &vars, &self.config)?;
        Ok(tape.value(h).clone().with_requires_grad(false))
    }

    /// The classifier head applied to each instance feature on its own.
    pub fn instance_logits<P: Real>(&self, patches: &[Tensor<P>]) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let inputs = Self::record_patches(&mut tape, patches);
        let h = graph::instance_features(&mut tape, &inputs, &vars, &self.config)?;
        let logits = tape.linear(h, vars.head_weight, Some(vars.head_bias))?;
        Ok(tape.value(logits).data().to_vec())
    }
}

/// 500-dimensional embedding of a single `3×s×s` patch.
pub fn extract_features<T: Real>(patch: &Tensor<T>, model: &AmilModel<T>) -> Result<Tensor<T>> {
    let h = model.instance_features(std::slice::from_ref(patch))?;
    let l = h.len();
    h.reshape([l])
}

/// Softmax attention weights of the rows of `h` (m × L).
pub fn attention_weights<T: Real>(h: &Tensor<T>, params: &AttentionParams<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let v = tape.constant(params.v.clone());
    let w = tape.constant(params.w.clone());
    let a = graph::attention_weights(&mut tape, hv, v, w)?;
    Ok(tape.value(a).clone())
}

/// `z = Σₚ aₚ hₚ`.
pub fn aggregate<T: Real>(h: &Tensor<T>, a: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let av = tape.constant(a.clone());
    let z = graph::aggregate(&mut tape, hv, av)?;
    Ok(tape.value(z).clone())
}

pub fn pool_max<T: Real>(h: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let z = graph::pool_max(&mut tape, hv)?;
    Ok(tape.value(z).clone())
}

pub fn pool_mean<T: Real>(h: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let z = graph::pool_mean(&mut tape, hv)?;
    Ok(tape.value(z).clone())
}

/// A bag is positive iff at least one of its instances is positive.
pub fn bag_label(instance_labels: &[bool]) -> Result<bool> {
    if instance_labels.is_empty() {
        return Err(Error::Contract("bag_label of an empty bag".into()));
    }
    Ok(instance_labels.iter().any(|&y| y))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry_matches_reference_extractor() {
        let c = ModelConfig::default();
        assert_eq!(c.flat_features().unwrap(), 800);
        let shapes = AmilModel::<f32>::param_shapes(&c).unwrap();
        assert_eq!(shapes[0], vec![20, 3, 5, 5]);
        assert_eq!(shapes[2], vec![50, 20, 5, 5]);
        assert_eq!(shapes[4], vec![500, 800]);
        assert_eq!(shapes[6], vec![128, 500]);
    }

    #[test]
    fn larger_patches_change_only_fc_width() {
        let c = ModelConfig {
            patch_size: 124,
            ..ModelConfig::default()
        };
        // 124 → 120 → 60 → 56 → 28
        assert_eq!(c.flat_features().unwrap(), 50 * 28 * 28);
        let bad = ModelConfig {
            patch_size: 27,
            ..ModelConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Geometry(_))));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let c = ModelConfig::default();
        let a = AmilModel::<f32>::new(c.clone(), 3).unwrap();
        let b = AmilModel::<f32>::new(c.clone(), 3).unwrap();
        let other = AmilModel::<f32>::new(c, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, other);
        let limit = (6.0f32 / (800.0 + 500.0)).sqrt();
        assert!(a.extractor.fc_weight.data().iter().all(|v| v.abs() <= limit));
        assert!(a.extractor.fc_bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flatten_roundtrip() {
        let c = ModelConfig {
            conv1_channels: 2,
            conv2_channels: 3,
            feature_dim: 4,
            attention_dim: 3,
            ..ModelConfig::default()
        };
        let m = AmilModel::<f64>::new(c, 1).unwrap();
        let flat = m.flatten();
        assert_eq!(flat.len(), m.num_params());
        assert_eq!(m.with_flat(&flat).unwrap(), m);
        assert!(m.with_flat(&flat[1..]).is_err());
    }

    #[test]
    fn pooling_mode_parses() {
        for mode in [PoolingMode::Attention, PoolingMode::Max, PoolingMode::Mean] {
            assert_eq!(mode.as_str().parse::<PoolingMode>().unwrap(), mode);
        }
        assert!("gated".parse::<PoolingMode>().is_err());
    }
}
