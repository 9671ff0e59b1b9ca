use crate::element::Element;
use crate::error::Result;
use crate::kernels::{self, Conv2dParams, ConvTransposeParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// The operator set a layer stack needs, abstracted over whether values are
/// recorded for differentiation.
///
/// Network code written against `Exec` runs unchanged on [`Eager`]
/// (plain tensors, nothing recorded) and on [`Tape`] (handles into a
/// differentiable graph). Both dispatch to the same kernels.
pub trait Exec<T: Element> {
    type Value;

    fn conv2d(&mut self, x: &Self::Value, kernel: &Self::Value, p: Conv2dParams) -> Result<Self::Value>;
    fn conv_transpose2d(&mut self, x: &Self::Value, kernel: &Self::Value, p: ConvTransposeParams) -> Result<Self::Value>;
    fn instance_norm(&mut self, x: &Self::Value, scale: &Self::Value, shift: &Self::Value, eps: T) -> Result<Self::Value>;
    fn bias_add(&mut self, x: &Self::Value, bias: &Self::Value) -> Result<Self::Value>;
    fn relu(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
}

/// Immediate evaluation on owned tensors.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl<T: Element> Exec<T> for Eager {
    type Value = Tensor<T>;

    fn conv2d(&mut self, x: &Tensor<T>, kernel: &Tensor<T>, p: Conv2dParams) -> Result<Tensor<T>> {
        kernels::conv2d(x, kernel, p)
    }

    fn conv_transpose2d(&mut self, x: &Tensor<T>, kernel: &Tensor<T>, p: ConvTransposeParams) -> Result<Tensor<T>> {
        kernels::conv_transpose2d(x, kernel, p)
    }

    fn instance_norm(&mut self, x: &Tensor<T>, scale: &Tensor<T>, shift: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        kernels::instance_norm(x, scale, shift, eps, false).map(|(y, _)| y)
    }

    fn bias_add(&mut self, x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::bias_add(x, bias)
    }

    fn relu(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.map(|v| v.max(T::zero())))
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        a.zip_map(b, "add", |x, y| x + y)
    }
}

impl<T: Element> Exec<T> for Tape<T> {
    type Value = Var;

    fn conv2d(&mut self, x: &Var, kernel: &Var, p: Conv2dParams) -> Result<Var> {
        Tape::conv2d(self, *x, *kernel, p)
    }

    fn conv_transpose2d(&mut self, x: &Var, kernel: &Var, p: ConvTransposeParams) -> Result<Var> {
        Tape::conv_transpose2d(self, *x, *kernel, p)
    }

    fn instance_norm(&mut self, x: &Var, scale: &Var, shift: &Var, eps: T) -> Result<Var> {
        Tape::instance_norm(self, *x, *scale, *shift, eps)
    }

    fn bias_add(&mut self, x: &Var, bias: &Var) -> Result<Var> {
        Tape::bias_add(self, *x, *bias)
    }

    fn relu(&mut self, x: &Var) -> Result<Var> {
        Tape::relu(self, *x)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::add(self, *a, *b)
    }
}
