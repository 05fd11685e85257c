//! Gradient-free convenience wrappers around the graph ops, for callers that
//! only need a forward value.

use super::graph::Graph;
use super::kernels::Padding;
use super::{Real, Tensor};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

fn unary<T: Real>(
    x: &Tensor<T>,
    f: impl FnOnce(&mut Graph<T>, super::Var) -> Result<super::Var>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = f(&mut g, v)?;
    Ok(g.value(out).clone())
}

pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    dilation: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let w = g.constant(weight.clone());
    let b = bias.map(|b| g.constant(b.clone()));
    let out = g.conv2d(x, w, b, stride, dilation, padding)?;
    Ok(g.value(out).clone())
}

/// Stride-2 transposed convolution doubling the spatial extent.
pub fn conv_transpose2d<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (_, h, w, _) = input.nhwc("conv_transpose2d")?;
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let wv = g.constant(weight.clone());
    let b = bias.map(|b| g.constant(b.clone()));
    let out = g.conv_transpose2d(x, wv, b, 2, (2 * h, 2 * w))?;
    Ok(g.value(out).clone())
}

/// 2×2 window, stride 2.
pub fn pool2d<T: Real>(input: &Tensor<T>, kind: PoolKind) -> Result<Tensor<T>> {
    unary(input, |g, v| match kind {
        PoolKind::Avg => g.avg_pool2(v),
        PoolKind::Max => g.max_pool2(v),
    })
}

pub fn dense<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let w = g.constant(weight.clone());
    let b = bias.map(|b| g.constant(b.clone()));
    let out = g.dense(x, w, b)?;
    Ok(g.value(out).clone())
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v < T::zero() { T::zero() } else { v })
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Softmax over the last axis.
pub fn softmax<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    unary(x, |g, v| g.softmax(v))
}

pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    unary(x, |g, v| g.global_avg_pool(v))
}
