use super::kernels::{self, ConvGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking logarithms.
pub const BCE_EPSILON: f64 = 1e-7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        x: Var,
        kernels: Var,
        bias: Var,
        geom: ConvGeom,
        out_channels: usize,
        cols: Vec<T>,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    Bce {
        p: Var,
        label: T,
    },
    Sum(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Reshape(Var),
    Slice {
        x: Var,
        offset: usize,
    },
    StackRows(Vec<Var>),
    MaxRows {
        x: Var,
        argmax: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Wengert list of executed operations.
///
/// Every operation appends one node; [`Tape::backward`] walks the nodes in
/// reverse, so each recorded operation is visited exactly once and adjoints
/// of values with several consumers accumulate additively.
#[derive(Debug)]
pub struct Tape<T: Real = f64> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every branch taken by a non-smooth op: ReLU input signs, max-pool and
    /// row-max winners, and whether the BCE clamp is active. Two evaluations
    /// with equal signatures lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> Vec<usize> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                &Op::Relu(x) => sig.extend(self.data(x).iter().map(|&v| (v > T::zero()) as usize)),
                Op::MaxPool2d { argmax, .. } | Op::MaxRows { argmax, .. } => sig.extend_from_slice(argmax),
                &Op::Bce { p, .. } => {
                    let prob = self.data(p)[0];
                    let eps = T::from_f64(BCE_EPSILON);
                    sig.push(if prob < eps {
                        0
                    } else if prob > T::one() - eps {
                        2
                    } else {
                        1
                    });
                }
                _ => {}
            }
        }
        sig
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record an input. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a trainable input.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::Contract(format!("{op}: expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dimension("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            (self.data(a), k as isize, 1),
            (self.data(b), n as isize, 1),
            T::zero(),
            (&mut out, n as isize, 1),
        );
        let value = Tensor::new([m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// `x · wᵀ + b` for `x: rows×in`, `w: out×in`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (rows, inputs) = self.matrix_dims(x, "linear")?;
        let (outputs, w_in) = self.matrix_dims(w, "linear")?;
        if inputs != w_in {
            return Err(Error::dimension("linear", self.shape(x), self.shape(w)));
        }
        if let Some(b) = b {
            if self.value(b).len() != outputs {
                return Err(Error::dimension("linear bias", self.shape(w), self.shape(b)));
            }
        }
        let mut out = vec![T::zero(); rows * outputs];
        T::gemm(
            rows,
            inputs,
            outputs,
            T::one(),
            (self.data(x), inputs as isize, 1),
            (self.data(w), 1, inputs as isize),
            T::zero(),
            (&mut out, outputs as isize, 1),
        );
        if let Some(b) = b {
            let bias = self.data(b);
            for row in out.chunks_exact_mut(outputs) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o = *o + bv;
                }
            }
        }
        let value = Tensor::new([rows, outputs], out)?;
        let mut inputs_list = vec![x, w];
        inputs_list.extend(b);
        Ok(self.push(
            value,
            Op::Linear {
                x,
                w,
                b,
                rows,
                inputs,
                outputs,
            },
            &inputs_list,
        ))
    }

    /// Valid cross-correlation of `x: C×H×W` with `kernels: O×C×k×k` plus a
    /// per-channel bias.
    pub fn conv2d(&mut self, x: Var, kernels: Var, bias: Var, stride: usize) -> Result<Var> {
        let (channels, height, width) = match *self.shape(x) {
            [c, h, w] => (c, h, w),
            ref s => {
                return Err(Error::Contract(format!(
                    "conv2d: input must be C×H×W, got {s:?}"
                )))
            }
        };
        let (out_channels, kernel) = match *self.shape(kernels) {
            [o, c, kh, kw] if c == channels && kh == kw => (o, kh),
            _ => return Err(Error::dimension("conv2d", self.shape(x), self.shape(kernels))),
        };
        if self.value(bias).len() != out_channels {
            return Err(Error::dimension("conv2d bias", self.shape(kernels), self.shape(bias)));
        }
        let extent = |input| kernels::valid_extent(input, kernel, stride);
        let (out_h, out_w) = match (extent(height), extent(width)) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(Error::Geometry(format!(
                    "conv2d: {height}×{width} input with kernel {kernel} and stride {stride} \
                     has no integral output extent"
                )))
            }
        };
        let geom = ConvGeom {
            channels,
            height,
            width,
            kernel,
            stride,
            out_h,
            out_w,
        };
        let cols = kernels::im2col(self.data(x), &geom);
        let (plen, positions) = (geom.patch_len(), geom.positions());
        let mut out = vec![T::zero(); out_channels * positions];
        for (row, &b) in out.chunks_exact_mut(positions).zip(self.data(bias)) {
            row.fill(b);
        }
        T::gemm(
            out_channels,
            plen,
            positions,
            T::one(),
            (self.data(kernels), plen as isize, 1),
            (&cols, positions as isize, 1),
            T::one(),
            (&mut out, positions as isize, 1),
        );
        let value = Tensor::new([out_channels, out_h, out_w], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                kernels,
                bias,
                geom,
                out_channels,
                cols,
            },
            &[x, kernels, bias],
        ))
    }

    pub fn maxpool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let (c, h, w) = match *self.shape(x) {
            [c, h, w] => (c, h, w),
            ref s => {
                return Err(Error::Contract(format!(
                    "maxpool2d: input must be C×H×W, got {s:?}"
                )))
            }
        };
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(Error::Geometry(format!(
                "maxpool2d: {h}×{w} is not divisible by window {window}"
            )));
        }
        let (values, argmax) = kernels::maxpool(self.data(x), c, h, w, window);
        let value = Tensor::new([c, h / window, w / window], values)?;
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, &[x]))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let src = self.value(x);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect())
            .expect("elementwise map preserves shape");
        self.push(value, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        self.map(x, |v| v * factor, Op::Scale(x, factor))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::dimension("reshape", self.shape(x), &shape));
        }
        let value = Tensor::new(shape, self.data(x).to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// A contiguous run of `x`'s flat data starting at `offset`, as a tensor
    /// of `shape`.
    pub fn slice(&mut self, x: Var, offset: usize, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        let data = self
            .data(x)
            .get(offset..offset + len)
            .ok_or_else(|| Error::dimension("slice", self.shape(x), &shape))?
            .to_vec();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Slice { x, offset }, &[x]))
    }

    /// Softmax over a vector, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 1 {
            return Err(Error::Contract(format!(
                "softmax: expected a vector, got shape {:?}",
                self.shape(x)
            )));
        }
        let value = Tensor::new(self.shape(x).to_vec(), softmax(self.data(x)))?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// Binary cross-entropy of a probability against a 0/1 label, with the
    /// probability clamped to `[ε, 1 − ε]`.
    pub fn bce(&mut self, p: Var, label: T) -> Result<Var> {
        let prob = self.value(p).item()?;
        let value = Tensor::scalar(bce(prob, label));
        Ok(self.push(value, Op::Bce { p, label }, &[p]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dimension(name, self.shape(a), self.shape(b)));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Stack equally sized values as the rows of an `m × len` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = *rows
            .first()
            .ok_or_else(|| Error::Contract("stack_rows: no rows".into()))?;
        let len = self.value(first).len();
        let mut data = Vec::with_capacity(len * rows.len());
        for &r in rows {
            if self.value(r).len() != len {
                return Err(Error::dimension("stack_rows", self.shape(first), self.shape(r)));
            }
            data.extend_from_slice(self.data(r));
        }
        let value = Tensor::new([rows.len(), len], data)?;
        Ok(self.push(value, Op::StackRows(rows.to_vec()), rows))
    }

    /// Column-wise maximum of a matrix; ties resolve to the lowest row.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "max_rows")?;
        let data = self.data(x);
        let mut argmax: Vec<usize> = (0..n).collect();
        for r in 1..m {
            for (c, best) in argmax.iter_mut().enumerate() {
                if data[r * n + c] > data[*best] {
                    *best = r * n + c;
                }
            }
        }
        let value = Tensor::new([n], argmax.iter().map(|&i| data[i]).collect())?;
        Ok(self.push(value, Op::MaxRows { x, argmax }, &[x]))
    }

    /// Populate gradients of `loss` with respect to every tracked value.
    ///
    /// Leaves that require gradients but do not influence `loss` receive
    /// zero gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if self.nodes[idx].needs_grad {
                propagate(&self.nodes, idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            match g {
                Some(g) if node.needs_grad => node.value.set_grad(g),
                None if node.value.requires_grad() => {
                    let zeros = vec![T::zero(); node.value.len()];
                    node.value.set_grad(zeros);
                }
                _ => node.value.clear_grad(),
            }
        }
        Ok(())
    }
}

fn slot<'a, T: Real>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
}

fn add_into<T: Real>(dst: &mut [T], src: impl IntoIterator<Item = T>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Push the adjoint `g` of node `idx` onto its inputs.
fn propagate<T: Real>(nodes: &[Node<T>], idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[idx];
    let data = |v: Var| nodes[v.0].value.data();
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            if let Some(da) = slot(nodes, grads, a) {
                // dA += dC · Bᵀ
                T::gemm(m, n, k, T::one(), (g, n as isize, 1), (data(b), 1, n as isize), T::one(), (da, k as isize, 1));
            }
            if let Some(db) = slot(nodes, grads, b) {
                // dB += Aᵀ · dC
                T::gemm(k, m, n, T::one(), (data(a), 1, k as isize), (g, n as isize, 1), T::one(), (db, n as isize, 1));
            }
        }
        &Op::Linear {
            x,
            w,
            b,
            rows,
            inputs,
            outputs,
        } => {
            if let Some(dx) = slot(nodes, grads, x) {
                T::gemm(rows, outputs, inputs, T::one(), (g, outputs as isize, 1), (data(w), inputs as isize, 1), T::one(), (dx, inputs as isize, 1));
            }
            if let Some(dw) = slot(nodes, grads, w) {
                T::gemm(outputs, rows, inputs, T::one(), (g, 1, outputs as isize), (data(x), inputs as isize, 1), T::one(), (dw, inputs as isize, 1));
            }
            if let Some(b) = b {
                if let Some(db) = slot(nodes, grads, b) {
                    for row in g.chunks_exact(outputs) {
                        add_into(db, row.iter().copied());
                    }
                }
            }
        }
        Op::Conv2d {
            x,
            kernels,
            bias,
            geom,
            out_channels,
            cols,
        } => {
            let (plen, positions) = (geom.patch_len(), geom.positions());
            if let Some(dk) = slot(nodes, grads, *kernels) {
                T::gemm(*out_channels, positions, plen, T::one(), (g, positions as isize, 1), (cols, 1, positions as isize), T::one(), (dk, plen as isize, 1));
            }
            if let Some(db) = slot(nodes, grads, *bias) {
                for (d, row) in db.iter_mut().zip(g.chunks_exact(positions)) {
                    *d = *d + row.iter().copied().sum();
                }
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                let mut dcols = vec![T::zero(); plen * positions];
                T::gemm(plen, *out_channels, positions, T::one(), (data(*kernels), 1, plen as isize), (g, positions as isize, 1), T::zero(), (&mut dcols, positions as isize, 1));
                kernels::col2im_add(&dcols, geom, dx);
            }
        }
        Op::MaxPool2d { x, argmax } | Op::MaxRows { x, argmax } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for (&i, &gv) in argmax.iter().zip(g) {
                    dx[i] = dx[i] + gv;
                }
            }
        }
        &Op::Relu(x) => {
            if let Some(dx) = slot(nodes, grads, x) {
                let xs = data(x);
                add_into(dx, g.iter().zip(xs).map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() }));
            }
        }
        &Op::Tanh(x) => {
            if let Some(dx) = slot(nodes, grads, x) {
                add_into(dx, g.iter().zip(out).map(|(&gv, &y)| gv * (T::one() - y * y)));
            }
        }
        &Op::Sigmoid(x) => {
            if let Some(dx) = slot(nodes, grads, x) {
                add_into(dx, g.iter().zip(out).map(|(&gv, &y)| gv * y * (T::one() - y)));
            }
        }
        &Op::Softmax(x) => {
            if let Some(dx) = slot(nodes, grads, x) {
                let dot: T = g.iter().zip(out).map(|(&gv, &y)| gv * y).sum();
                add_into(dx, g.iter().zip(out).map(|(&gv, &y)| y * (gv - dot)));
            }
        }
        &Op::Bce { p, label } => {
            if let Some(dp) = slot(nodes, grads, p) {
                let prob = data(p)[0];
                dp[0] = dp[0] + g[0] * bce_derivative(prob, label);
            }
        }
        &Op::Sum(x) => {
            if let Some(dx) = slot(nodes, grads, x) {
                add_into(dx, std::iter::repeat(g[0]));
            }
        }
        &Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(dv) = slot(nodes, grads, v) {
                    add_into(dv, g.iter().copied());
                }
            }
        }
        &Op::Mul(a, b) => {
            if let Some(da) = slot(nodes, grads, a) {
                add_into(da, g.iter().zip(data(b)).map(|(&gv, &bv)| gv * bv));
            }
            if let Some(db) = slot(nodes, grads, b) {
                add_into(db, g.iter().zip(data(a)).map(|(&gv, &av)| gv * av));
            }
        }
        &Op::Scale(x, factor) => {
            if let Some(dx) = slot(nodes, grads, x) {
                add_into(dx, g.iter().map(|&gv| gv * factor));
            }
        }
        &Op::Reshape(x) => {
            if let Some(dx) = slot(nodes, grads, x) {
                add_into(dx, g.iter().copied());
            }
        }
        &Op::Slice { x, offset } => {
            if let Some(dx) = slot(nodes, grads, x) {
                add_into(&mut dx[offset..], g.iter().copied());
            }
        }
        Op::StackRows(rows) => {
            let len = g.len() / rows.len();
            for (&r, chunk) in rows.iter().zip(g.chunks_exact(len)) {
                if let Some(dr) = slot(nodes, grads, r) {
                    add_into(dr, chunk.iter().copied());
                }
            }
        }
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax<T: Real>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn clamp_probability<T: Real>(p: T) -> T {
    let eps = T::from_f64(BCE_EPSILON);
    p.max(eps).min(T::one() - eps)
}

pub(crate) fn bce<T: Real>(p: T, label: T) -> T {
    let c = clamp_probability(p);
    -(label * c.ln() + (T::one() - label) * (T::one() - c).ln())
}

// The clamp is treated as the identity on the backward pass so that a
// saturated, wrong prediction still receives a gradient.
fn bce_derivative<T: Real>(p: T, label: T) -> T {
    let c = clamp_probability(p);
    -label / c + (T::one() - label) / (T::one() - c)
}
