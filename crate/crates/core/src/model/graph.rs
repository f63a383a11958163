//! Tape-level building blocks of the A-MIL network.
//!
//! Each function records its computation on a caller-owned [`Tape`] so the
//! whole bag pass stays differentiable end to end.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

use super::ModelConfig;

/// Tape handles of every model parameter, in [`super::AmilModel::params`] order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub conv1_weight: Var,
    pub conv1_bias: Var,
    pub conv2_weight: Var,
    pub conv2_bias: Var,
    pub fc_weight: Var,
    pub fc_bias: Var,
    pub attention_v: Var,
    pub attention_w: Var,
    pub head_weight: Var,
    pub head_bias: Var,
}

impl ModelVars {
    pub fn from_array(vars: [Var; 10]) -> Self {
        let [c1w, c1b, c2w, c2b, fcw, fcb, v, w, hw, hb] = vars;
        ModelVars {
            conv1_weight: c1w,
            conv1_bias: c1b,
            conv2_weight: c2w,
            conv2_bias: c2b,
            fc_weight: fcw,
            fc_bias: fcb,
            attention_v: v,
            attention_w: w,
            head_weight: hw,
            head_bias: hb,
        }
    }

    pub fn all(&self) -> [Var; 10] {
        [
            self.conv1_weight,
            self.conv1_bias,
            self.conv2_weight,
            self.conv2_bias,
            self.fc_weight,
            self.fc_bias,
            self.attention_v,
            self.attention_w,
            self.head_weight,
            self.head_bias,
        ]
    }
}

/// Conv → ReLU → max-pool, twice, then flatten one `3×s×s` patch.
pub fn patch_trunk<T: Real>(
    tape: &mut Tape<T>,
    patch: Var,
    vars: &ModelVars,
    config: &ModelConfig,
) -> Result<Var> {
    let expected = [3, config.patch_size, config.patch_size];
    if tape.shape(patch) != expected {
        return Err(Error::Geometry(format!(
            "patch shape {:?} does not match the extractor input {expected:?}",
            tape.shape(patch)
        )));
    }
    let c1 = tape.conv2d(patch, vars.conv1_weight, vars.conv1_bias, 1)?;
    let r1 = tape.relu(c1);
    let p1 = tape.maxpool2d(r1, config.pool)?;
    let c2 = tape.conv2d(p1, vars.conv2_weight, vars.conv2_bias, 1)?;
    let r2 = tape.relu(c2);
    let p2 = tape.maxpool2d(r2, config.pool)?;
    let flat = tape.value(p2).len();
    tape.reshape(p2, [flat])
}

/// Instance embeddings `H` (m × L) for a bag of patches.
pub fn instance_features<T: Real>(
    tape: &mut Tape<T>,
    patches: &[Var],
    vars: &ModelVars,
    config: &ModelConfig,
) -> Result<Var> {
    if patches.is_empty() {
        return Err(Error::Contract("bag has no instances".into()));
    }
    let flats = patches
        .iter()
        .map(|&p| patch_trunk(tape, p, vars, config))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.stack_rows(&flats)?;
    let fc = tape.linear(stacked, vars.fc_weight, Some(vars.fc_bias))?;
    Ok(tape.relu(fc))
}

/// Raw attention scores `w · tanh(V hₚ)` for every row of `h`, shape `[m]`.
pub fn attention_logits<T: Real>(tape: &mut Tape<T>, h: Var, v: Var, w: Var) -> Result<Var> {
    let hidden = tape.linear(h, v, None)?;
    let act = tape.tanh(hidden);
    let scores = tape.matmul(act, w)?;
    let m = tape.shape(scores)[0];
    tape.reshape(scores, [m])
}

/// Softmax attention over the instances of `h` (m × L); returns `[m]`.
pub fn attention_weights<T: Real>(tape: &mut Tape<T>, h: Var, v: Var, w: Var) -> Result<Var> {
    let logits = attention_logits(tape, h, v, w)?;
    tape.softmax(logits)
}

/// Weighted sum of instance rows: `z = Σₚ aₚ hₚ`.
pub fn aggregate<T: Real>(tape: &mut Tape<T>, h: Var, a: Var) -> Result<Var> {
    let (m, l) = match *tape.shape(h) {
        [m, l] => (m, l),
        ref s => return Err(Error::Contract(format!("aggregate: H must be a matrix, got {s:?}"))),
    };
    if tape.value(a).len() != m {
        return Err(Error::dimension("aggregate", tape.shape(h), tape.shape(a)));
    }
    let row = tape.reshape(a, [1, m])?;
    let z = tape.matmul(row, h)?;
    tape.reshape(z, [l])
}

pub fn pool_max<T: Real>(tape: &mut Tape<T>, h: Var) -> Result<Var> {
    tape.max_rows(h)
}

/// Mean pooling, expressed as aggregation with uniform weights `1/m`.
pub fn pool_mean<T: Real>(tape: &mut Tape<T>, h: Var) -> Result<Var> {
    let m = match *tape.shape(h) {
        [m, _] => m,
        ref s => return Err(Error::Contract(format!("pool_mean: H must be a matrix, got {s:?}"))),
    };
    let uniform = tape.constant(Tensor::full([m], T::one() / T::from_f64(m as f64)));
    aggregate(tape, h, uniform)
}

/// Bag-level logit from a bag feature `z` (length L).
pub fn classify<T: Real>(tape: &mut Tape<T>, z: Var, vars: &ModelVars) -> Result<Var> {
    let l = tape.value(z).len();
    let row = tape.reshape(z, [1, l])?;
    let logit = tape.linear(row, vars.head_weight, Some(vars.head_bias))?;
    tape.reshape(logit, [1])
}
