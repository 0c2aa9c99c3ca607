//! Tape-based reverse-mode automatic differentiation.
//!
//! Trainable tensors live in a [`ParamStore`] and are referenced by stable
//! [`ParamId`]s. A forward pass records every primitive onto a [`Tape`];
//! [`Tape::backward`] replays the adjoints in reverse record order and
//! *accumulates* the result into each parameter's gradient. Gradients are
//! only cleared by [`ParamStore::zero_grad`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, ConvDims, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub id: ParamId,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Owner of all trainable tensors. Ids are indices and never reused.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, value: Tensor) -> ParamId {
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { id, value, grad });
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Multiplies every gradient by `factor`.
    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    /// matrix `[m×n]` plus row vector `[n]`
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Relu(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Var,
        dims: ConvDims,
    },
    MaxPool2 {
        x: Var,
        winners: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of primitive operations.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that only evaluates forward values; `backward` on it fails.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let op = if self.recording { op } else { Op::Constant };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let &[_, n] = xv.shape() else {
            return Err(Error::dim("add_bias", xv.shape(), bv.shape()));
        };
        if bv.shape() != [n] {
            return Err(Error::dim("add_bias", xv.shape(), bv.shape()));
        }
        let mut value = xv.clone();
        for row in value.data_mut().chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(value, Op::AddBias(x, bias)))
    }

    /// Dense layer: `x · weight + bias` with `weight: [in×out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let h = self.matmul(x, weight)?;
        self.add_bias(h, bias)
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(op, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("shape preserved");
        self.push(value, Op::Scale(x, factor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).relu();
        self.push(value, Op::Relu(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Collapses all but the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape();
        let rest: usize = shape[1..].iter().product();
        let flat = [shape[0], rest];
        self.reshape(x, &flat)
    }

    /// 3×3 cross-correlation, stride 1, zero padding 1, plus a per-filter bias.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (xv, kv, bv) = (self.value(x), self.value(kernel), self.value(bias));
        let dims = ConvDims::check(xv, kv, bv)?;
        let out = tensor::conv2d_forward(xv.data(), kv.data(), bv.data(), dims);
        let value = Tensor::new(vec![dims.batch, dims.out_ch, dims.height, dims.width], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                kernel,
                bias,
                dims,
            },
        ))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (value, winners) = tensor::maxpool2_forward(self.value(x))?;
        Ok(self.push(value, Op::MaxPool2 { x, winners }))
    }

    /// Batch mean of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy_mean(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = tensor::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Accumulates `∂loss/∂p` into the gradient of every parameter reachable from `loss`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.backward_scaled(loss, 1.0, store)
    }

    /// Like [`Tape::backward`] but seeds the output adjoint with `seed`, so the
    /// accumulated gradient is `seed · ∂loss/∂p`.
    pub fn backward_scaled(&self, loss: Var, seed: f64, store: &mut ParamStore) -> Result<()> {
        if !self.recording {
            return Err(Error::Argument("backward on an inference tape".into()));
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::full(lv.shape(), seed));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let p = store.get_mut(*id);
                    for (dst, &src) in p.grad.data_mut().iter_mut().zip(g.data()) {
                        *dst += src;
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    let da = accum(&mut adj, *a, av.shape());
                    tensor::matmul_a_bt_into(g.data(), bv.data(), da, m, n, k);
                    let db = accum(&mut adj, *b, bv.shape());
                    tensor::matmul_at_b_into(av.data(), g.data(), db, m, k, n);
                }
                Op::AddBias(x, bias) => {
                    let n = self.value(*bias).len();
                    add_into(accum(&mut adj, *x, g.shape()), g.data());
                    let db = accum(&mut adj, *bias, &[n]);
                    for row in g.data().chunks(n) {
                        add_into(db, row);
                    }
                }
                Op::Add(a, b) => {
                    add_into(accum(&mut adj, *a, g.shape()), g.data());
                    add_into(accum(&mut adj, *b, g.shape()), g.data());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).clone(), self.value(*b).clone());
                    let da = accum(&mut adj, *a, g.shape());
                    for ((d, &gv), &y) in da.iter_mut().zip(g.data()).zip(bv.data()) {
                        *d += gv * y;
                    }
                    let db = accum(&mut adj, *b, g.shape());
                    for ((d, &gv), &x) in db.iter_mut().zip(g.data()).zip(av.data()) {
                        *d += gv * x;
                    }
                }
                Op::Scale(x, factor) => {
                    let dx = accum(&mut adj, *x, g.shape());
                    for (d, &gv) in dx.iter_mut().zip(g.data()) {
                        *d += gv * factor;
                    }
                }
                Op::Sum(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    let gv = g.item();
                    accum(&mut adj, *x, &shape).iter_mut().for_each(|d| *d += gv);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let shape = xv.shape().to_vec();
                    let mask: Vec<bool> = xv.data().iter().map(|&v| v > 0.0).collect();
                    let dx = accum(&mut adj, *x, &shape);
                    for ((d, &gv), keep) in dx.iter_mut().zip(g.data()).zip(mask) {
                        if keep {
                            *d += gv;
                        }
                    }
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    add_into(accum(&mut adj, *x, &shape), g.data());
                }
                Op::Conv2d {
                    x,
                    kernel,
                    bias,
                    dims,
                } => {
                    let (xv, kv) = (self.value(*x), self.value(*kernel));
                    let mut dx = vec![0.0; xv.len()];
                    let mut dk = vec![0.0; kv.len()];
                    let mut db = vec![0.0; dims.out_ch];
                    tensor::conv2d_backward(xv.data(), kv.data(), g.data(), *dims, &mut dx, &mut dk, &mut db);
                    let (xs, ks) = (xv.shape().to_vec(), kv.shape().to_vec());
                    add_into(accum(&mut adj, *x, &xs), &dx);
                    add_into(accum(&mut adj, *kernel, &ks), &dk);
                    add_into(accum(&mut adj, *bias, &[dims.out_ch]), &db);
                }
                Op::MaxPool2 { x, winners } => {
                    let shape = self.value(*x).shape().to_vec();
                    let dx = accum(&mut adj, *x, &shape);
                    for (&w, &gv) in winners.iter().zip(g.data()) {
                        dx[w] += gv;
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let shape = self.value(*logits).shape().to_vec();
                    let (batch, classes) = (shape[0], shape[1]);
                    let scale = g.item() / batch as f64;
                    let dx = accum(&mut adj, *logits, &shape);
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            dx[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn accum<'a>(adj: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut [f64] {
    adj[v.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
