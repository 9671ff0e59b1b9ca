use std::sync::Arc;

use crate::element::Element;
use crate::error::{invalid, mismatch, Result, TensorError};
use crate::kernels::{self, Conv2dParams, ConvTransposeParams, NormSaved};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    SqDiffMean(Var, Var),
    Reshape(Var),
    Gather {
        x: Var,
        indices: Arc<[usize]>,
    },
    BiasAdd {
        x: Var,
        bias: Var,
    },
    Scatter {
        base: Var,
        patch: Var,
        indices: Arc<[usize]>,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        params: Conv2dParams,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        params: ConvTransposeParams,
    },
    Affine {
        input: Var,
        weight: Var,
        bias: Var,
    },
    InstanceNorm {
        input: Var,
        scale: Var,
        shift: Var,
        saved: NormSaved<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
    op: Op<T>,
}

/// Wengert list of recorded operations.
///
/// Operations are appended in evaluation order, so every node's inputs have
/// smaller indices than the node itself; [`Tape::backward`] walks the list in
/// exact reverse order. A tape is single-owner; independent tapes may be
/// used from different threads at the same time.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Leaves with `requires_grad` receive a
    /// gradient on [`backward`](Self::backward); others never do.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) call, for leaves
    /// that require one.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(out, self.rg(&[a, b]), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(out, self.rg(&[a, b]), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(out, self.rg(&[a, b]), Op::Mul(a, b)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(T::zero()));
        Ok(self.push(out, self.rg(&[x]), Op::Relu(x)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        Ok(self.push(out, self.rg(&[x]), Op::Sum(x)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(invalid("mean", "empty tensor"));
        }
        let out = Tensor::scalar(t.sum() / T::from_usize(t.numel()).expect("count"));
        Ok(self.push(out, self.rg(&[x]), Op::Mean(x)))
    }

    /// Mean of `(a - b)^2` over all elements.
    pub fn sq_diff_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("sq_diff_mean", ta.shape(), tb.shape()));
        }
        if ta.numel() == 0 {
            return Err(invalid("sq_diff_mean", "empty tensor"));
        }
        let s: T = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let out = Tensor::scalar(s / T::from_usize(ta.numel()).expect("count"));
        Ok(self.push(out, self.rg(&[a, b]), Op::SqDiffMean(a, b)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, self.rg(&[x]), Op::Reshape(x)))
    }

    /// `out[j] = x[indices[j]]`, as a rank-1 tensor.
    pub fn gather(&mut self, x: Var, indices: Arc<[usize]>) -> Result<Var> {
        let tx = self.value(x);
        if indices.iter().any(|&i| i >= tx.numel()) {
            return Err(invalid("gather", format!("index out of range for {:?}", tx.shape())));
        }
        let out = Tensor::new([indices.len()], indices.iter().map(|&i| tx.data()[i]).collect())?;
        Ok(self.push(out, self.rg(&[x]), Op::Gather { x, indices }))
    }

    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = kernels::bias_add(self.value(x), self.value(bias))?;
        Ok(self.push(out, self.rg(&[x, bias]), Op::BiasAdd { x, bias }))
    }

    /// Copy of `base` with `out[indices[j]] = patch[j]`.
    pub fn scatter(&mut self, base: Var, patch: Var, indices: Arc<[usize]>) -> Result<Var> {
        let (tb, tp) = (self.value(base), self.value(patch));
        if tp.numel() != indices.len() || indices.iter().any(|&i| i >= tb.numel()) {
            return Err(mismatch("scatter", tb.shape(), tp.shape()));
        }
        let mut out = tb.clone();
        for (&i, &v) in indices.iter().zip(tp.data()) {
            out.data_mut()[i] = v;
        }
        Ok(self.push(out, self.rg(&[base, patch]), Op::Scatter { base, patch, indices }))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, params: Conv2dParams) -> Result<Var> {
        let out = kernels::conv2d(self.value(input), self.value(kernel), params)?;
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(out, rg, Op::Conv2d { input, kernel, params }))
    }

    pub fn conv_transpose2d(&mut self, input: Var, kernel: Var, params: ConvTransposeParams) -> Result<Var> {
        let out = kernels::conv_transpose2d(self.value(input), self.value(kernel), params)?;
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(out, rg, Op::ConvTranspose2d { input, kernel, params }))
    }

    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = kernels::affine(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(out, rg, Op::Affine { input, weight, bias }))
    }

    pub fn instance_norm(&mut self, input: Var, scale: Var, shift: Var, eps: T) -> Result<Var> {
        let rg = self.rg(&[input, scale, shift]);
        let (out, saved) = kernels::instance_norm(self.value(input), self.value(scale), self.value(shift), eps, rg)?;
        let op = match saved {
            Some(saved) => Op::InstanceNorm {
                input,
                scale,
                shift,
                saved,
            },
            // Nothing upstream needs a gradient; keep the node as a constant.
            None => Op::Leaf,
        };
        Ok(self.push(out, rg, op))
    }

    /// Reverse-mode sweep from a single-element `loss`.
    ///
    /// Leaves with `requires_grad` end up holding `d loss / d leaf`
    /// (replacing any gradient from an earlier call). Contributions from
    /// several uses of one value are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            for (var, contribution) in self.local_grads(idx, &g)? {
                accumulate(&mut grads[var.0], contribution);
            }
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                node.grad = Some(g.unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec())));
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `idx` to those inputs that need one.
    fn local_grads(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if need(v) {
                        out.push((v, g.clone()));
                    }
                }
            }
            Op::Sub(a, b) => {
                if need(*a) {
                    out.push((*a, g.clone()));
                }
                if need(*b) {
                    out.push((*b, g.map(|v| -v)));
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    out.push((*a, g.zip_map(self.value(*b), "mul", |x, y| x * y)?));
                }
                if need(*b) {
                    out.push((*b, g.zip_map(self.value(*a), "mul", |x, y| x * y)?));
                }
            }
            Op::Relu(x) => {
                if need(*x) {
                    out.push((*x, g.zip_map(&node.value, "relu", |gv, y| if y > T::zero() { gv } else { T::zero() })?));
                }
            }
            Op::Sum(x) => {
                if need(*x) {
                    let s = g.data()[0];
                    out.push((*x, Tensor::full(self.value(*x).shape().to_vec(), s)));
                }
            }
            Op::Mean(x) => {
                if need(*x) {
                    let t = self.value(*x);
                    let s = g.data()[0] / T::from_usize(t.numel()).expect("count");
                    out.push((*x, Tensor::full(t.shape().to_vec(), s)));
                }
            }
            Op::SqDiffMean(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let two = T::from_f64_lossy(2.0);
                let s = two * g.data()[0] / T::from_usize(ta.numel()).expect("count");
                let d = ta.zip_map(tb, "sq_diff_mean", |x, y| s * (x - y))?;
                if need(*b) {
                    out.push((*b, d.map(|v| -v)));
                }
                if need(*a) {
                    out.push((*a, d));
                }
            }
            Op::Reshape(x) => {
                if need(*x) {
                    out.push((*x, g.clone().reshape(self.value(*x).shape().to_vec())?));
                }
            }
            Op::Gather { x, indices } => {
                if need(*x) {
                    let mut d = Tensor::zeros(self.value(*x).shape().to_vec());
                    for (&i, &v) in indices.iter().zip(g.data()) {
                        d.data_mut()[i] = d.data()[i] + v;
                    }
                    out.push((*x, d));
                }
            }
            Op::BiasAdd { x, bias } => {
                if need(*x) {
                    out.push((*x, g.clone()));
                }
                if need(*bias) {
                    out.push((*bias, kernels::bias_add_backward(g)?));
                }
            }
            Op::Scatter { base, patch, indices } => {
                if need(*base) {
                    let mut d = g.clone();
                    for &i in indices.iter() {
                        d.data_mut()[i] = T::zero();
                    }
                    out.push((*base, d));
                }
                if need(*patch) {
                    let d: Vec<T> = indices.iter().map(|&i| g.data()[i]).collect();
                    out.push((*patch, Tensor::new(self.value(*patch).shape().to_vec(), d)?));
                }
            }
            Op::Conv2d { input, kernel, params } => {
                let (dx, dk) = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    *params,
                    g,
                    need(*input),
                    need(*kernel),
                )?;
                out.extend(dx.map(|d| (*input, d)));
                out.extend(dk.map(|d| (*kernel, d)));
            }
            Op::ConvTranspose2d { input, kernel, params } => {
                let (dx, dk) = kernels::conv_transpose2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    *params,
                    g,
                    need(*input),
                    need(*kernel),
                )?;
                out.extend(dx.map(|d| (*input, d)));
                out.extend(dk.map(|d| (*kernel, d)));
            }
            Op::Affine { input, weight, bias } => {
                let (dx, dw, db) = kernels::affine_backward(self.value(*input), self.value(*weight), self.value(*bias), g)?;
                for (v, d) in [(*input, dx), (*weight, dw), (*bias, db)] {
                    if need(v) {
                        out.push((v, d));
                    }
                }
            }
            Op::InstanceNorm { input, scale, shift, saved } => {
                let (dx, ds, db) = kernels::instance_norm_backward(node.value.shape(), self.value(*scale), saved, g)?;
                for (v, d) in [(*input, dx), (*scale, ds), (*shift, db)] {
                    if need(v) {
                        out.push((v, d));
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + v;
            }
        }
        None => *slot = Some(g),
    }
}
