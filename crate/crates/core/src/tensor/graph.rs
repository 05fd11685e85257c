//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records coarse tensor operations (a whole convolution is one
//! node) as they are applied. [`Graph::backward`] walks the tape in reverse
//! and returns [`Gradients`] for every node that requires a gradient.
//! Parameters enter the tape through [`Graph::param`]; frozen parameters enter
//! as constants so no gradient is ever computed for them.

use std::sync::Arc;

use rand::Rng;

use super::kernels::{self, ConvGeometry, Padding};
use super::{Real, Tensor};
use crate::error::{Result, SmarcError};
use crate::params::{ParamId, ParamStore};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T: Real> {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        batch: usize,
        cout: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        batch: usize,
        cin: usize,
    },
    MaskMul {
        x: Var,
        mask: Arc<Vec<T>>,
        c: usize,
    },
    Renorm {
        x: Var,
        bias: Option<Var>,
        ratio: Arc<Vec<T>>,
        valid: Arc<Vec<T>>,
        c: usize,
    },
    AvgPool2 {
        x: Var,
        dims: [usize; 4],
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
        batch: usize,
        f: usize,
        u: usize,
    },
    GlobalAvgPool {
        x: Var,
        batch: usize,
        hw: usize,
        c: usize,
    },
    ChannelScale {
        x: Var,
        s: Var,
        batch: usize,
        hw: usize,
        c: usize,
    },
    Concat {
        a: Var,
        b: Var,
        ca: usize,
        cb: usize,
    },
    Dropout {
        x: Var,
        keep: Vec<T>,
    },
    Softmax {
        x: Var,
        k: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    SumSquares(Var),
    MaskedMae {
        pred: Var,
        target: Tensor<T>,
        pixel_w: Vec<T>,
        c: usize,
        denom: T,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<T>,
        sample_w: Vec<T>,
        k: usize,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    frozen: Option<Arc<Vec<bool>>>,
    checked: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            frozen: None,
            checked: false,
        }
    }

    /// Reject non-finite values produced by any op.
    pub fn checked(mut self, on: bool) -> Self {
        self.checked = on;
        self
    }

    /// Parameters flagged `true` enter the graph as constants.
    pub fn with_frozen(mut self, frozen: Arc<Vec<bool>>) -> Self {
        self.frozen = Some(frozen);
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if self.checked {
            value.check_finite(op_name(&op))?;
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Option<Var>]) -> bool {
        vars.iter().flatten().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable free input.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let frozen = self
            .frozen
            .as_ref()
            .is_some_and(|f| f.get(id.0).copied().unwrap_or(false));
        self.nodes.push(Node {
            value: store.get(id).tensor.clone(),
            op: Op::Param(id),
            requires_grad: !frozen,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        dilation: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (batch, h, wd, cin) = self.value(x).nhwc("conv2d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[2] != cin {
            return Err(SmarcError::shape("conv2d", self.shape(x), &ws));
        }
        let cout = ws[3];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(SmarcError::shape("conv2d bias", self.shape(b), &[cout]));
            }
        }
        let geom = ConvGeometry::new(h, wd, cin, ws[0], ws[1], stride, dilation, padding)?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            batch,
            &geom,
            self.value(w).data(),
            cout,
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::from_vec_unchecked(vec![batch, geom.out_h, geom.out_w, cout], out);
        let rg = self.rg(&[Some(x), Some(w), b]);
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
                cout,
            },
            rg,
        )
    }

    /// Stride-`stride` transposed convolution producing exactly
    /// `out_h × out_w`. `w` is `kh×kw×Cout×Cin`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        out_hw: (usize, usize),
    ) -> Result<Var> {
        let (batch, h, wd, cin) = self.value(x).nhwc("conv_transpose2d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[3] != cin {
            return Err(SmarcError::shape("conv_transpose2d", self.shape(x), &ws));
        }
        let cout = ws[2];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(SmarcError::shape("conv_transpose2d bias", self.shape(b), &[cout]));
            }
        }
        let geom = ConvGeometry::new(out_hw.0, out_hw.1, cout, ws[0], ws[1], stride, 1, Padding::Same)?;
        if geom.out_h != h || geom.out_w != wd {
            return Err(SmarcError::invalid(
                "conv_transpose2d",
                format!(
                    "target {}×{} is not reachable from {h}×{wd} at stride {stride}",
                    out_hw.0, out_hw.1
                ),
            ));
        }
        let out = kernels::conv_transpose2d_forward(
            self.value(x).data(),
            batch,
            &geom,
            self.value(w).data(),
            cin,
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::from_vec_unchecked(vec![batch, out_hw.0, out_hw.1, cout], out);
        let rg = self.rg(&[Some(x), Some(w), b]);
        self.push(
            value,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                geom,
                batch,
                cin,
            },
            rg,
        )
    }

    /// `x ⊙ mask`, with a 1-channel `mask` broadcast over the channels of `x`.
    pub fn mask_mul(&mut self, x: Var, mask: &Tensor<T>) -> Result<Var> {
        let (b, h, w, c) = self.value(x).nhwc("mask_mul")?;
        if mask.shape() != [b, h, w, 1] {
            return Err(SmarcError::shape("mask_mul", self.shape(x), mask.shape()));
        }
        let m = mask.data();
        let mut out = self.value(x).data().to_vec();
        for (row, &mv) in out.chunks_exact_mut(c).zip(m) {
            for v in row {
                *v *= mv;
            }
        }
        let value = Tensor::from_vec_unchecked(vec![b, h, w, c], out);
        let rg = self.rg(&[Some(x)]);
        self.push(
            value,
            Op::MaskMul {
                x,
                mask: Arc::new(m.to_vec()),
                c,
            },
            rg,
        )
    }

    /// `x · ratio + bias · valid` per pixel, the renormalisation step of a
    /// partial convolution. `ratio` and `valid` are per-pixel (`B·H·W`).
    pub fn renorm(&mut self, x: Var, bias: Option<Var>, ratio: Vec<T>, valid: Vec<T>) -> Result<Var> {
        let (b, h, w, c) = self.value(x).nhwc("renorm")?;
        if ratio.len() != b * h * w || valid.len() != b * h * w {
            return Err(SmarcError::shape("renorm", self.shape(x), &[ratio.len()]));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [c] {
                return Err(SmarcError::shape("renorm bias", self.shape(bv), &[c]));
            }
        }
        let mut out = self.value(x).data().to_vec();
        let bias_data = bias.map(|bv| self.value(bv).data().to_vec());
        for (p, row) in out.chunks_exact_mut(c).enumerate() {
            let r = ratio[p];
            for v in row.iter_mut() {
                *v *= r;
            }
            if let Some(bd) = &bias_data {
                let vp = valid[p];
                for (v, &bb) in row.iter_mut().zip(bd) {
                    *v += bb * vp;
                }
            }
        }
        let value = Tensor::from_vec_unchecked(vec![b, h, w, c], out);
        let rg = self.rg(&[Some(x), bias]);
        self.push(
            value,
            Op::Renorm {
                x,
                bias,
                ratio: Arc::new(ratio),
                valid: Arc::new(valid),
                c,
            },
            rg,
        )
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (b, h, w, c) = self.value(x).nhwc("avg_pool2d")?;
        let out = kernels::avg_pool2_forward(self.value(x).data(), b, h, w, c)?;
        let value = Tensor::from_vec_unchecked(vec![b, h / 2, w / 2, c], out);
        let rg = self.rg(&[Some(x)]);
        self.push(value, Op::AvgPool2 { x, dims: [b, h, w, c] }, rg)
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (b, h, w, c) = self.value(x).nhwc("max_pool2d")?;
        let (out, argmax) = kernels::max_pool2_forward(self.value(x).data(), b, h, w, c)?;
        let value = Tensor::from_vec_unchecked(vec![b, h / 2, w / 2, c], out);
        let rg = self.rg(&[Some(x)]);
        self.push(value, Op::MaxPool2 { x, argmax }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        // NaN passes through so checked mode can see it.
        let value = self.value(x).map(|v| if v < T::zero() { T::zero() } else { v });
        let rg = self.rg(&[Some(x)]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.rg(&[Some(x)]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(SmarcError::shape("dense", &xs, &ws));
        }
        let (batch, f, u) = (xs[0], xs[1], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [u] {
                return Err(SmarcError::shape("dense bias", self.shape(b), &[u]));
            }
        }
        let out = kernels::dense_forward(
            self.value(x).data(),
            batch,
            f,
            self.value(w).data(),
            u,
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::from_vec_unchecked(vec![batch, u], out);
        let rg = self.rg(&[Some(x), Some(w), b]);
        self.push(
            value,
            Op::Dense {
                x,
                w,
                b,
                batch,
                f,
                u,
            },
            rg,
        )
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (batch, h, w, c) = self.value(x).nhwc("global_avg_pool")?;
        let out = kernels::global_avg_pool_forward(self.value(x).data(), batch, h * w, c);
        let value = Tensor::from_vec_unchecked(vec![batch, c], out);
        let rg = self.rg(&[Some(x)]);
        self.push(
            value,
            Op::GlobalAvgPool {
                x,
                batch,
                hw: h * w,
                c,
            },
            rg,
        )
    }

    /// `x[b,h,w,c] · s[b,c]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (batch, h, w, c) = self.value(x).nhwc("channel_scale")?;
        if self.shape(s) != [batch, c] {
            return Err(SmarcError::shape("channel_scale", self.shape(x), self.shape(s)));
        }
        let hw = h * w;
        let sd = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        for n in 0..batch {
            let scale = &sd[n * c..][..c];
            for row in out[n * hw * c..][..hw * c].chunks_exact_mut(c) {
                for (v, &sv) in row.iter_mut().zip(scale) {
                    *v *= sv;
                }
            }
        }
        let value = Tensor::from_vec_unchecked(vec![batch, h, w, c], out);
        let rg = self.rg(&[Some(x), Some(s)]);
        self.push(value, Op::ChannelScale { x, s, batch, hw, c }, rg)
    }

    /// Channel-axis concatenation of two NHWC tensors (or two `[B, F]` rows).
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let r = sa.len();
        if r == 0 || sb.len() != r || sa[..r - 1] != sb[..r - 1] {
            return Err(SmarcError::shape("concat", &sa, &sb));
        }
        let (ca, cb) = (sa[r - 1], sb[r - 1]);
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = Vec::with_capacity(ad.len() + bd.len());
        for (ra, rb) in ad.chunks_exact(ca).zip(bd.chunks_exact(cb)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let mut shape = sa.clone();
        shape[r - 1] = ca + cb;
        let value = Tensor::from_vec_unchecked(shape, out);
        let rg = self.rg(&[Some(a), Some(b)]);
        self.push(value, Op::Concat { a, b, ca, cb }, rg)
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(SmarcError::invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        let scale = T::lit(1.0 / (1.0 - rate));
        let keep: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { scale })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| v * k)
            .collect();
        let value = Tensor::from_vec_unchecked(self.shape(x).to_vec(), data);
        let rg = self.rg(&[Some(x)]);
        self.push(value, Op::Dropout { x, keep }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let k = *s
            .last()
            .ok_or_else(|| SmarcError::invalid("softmax", "scalar input"))?;
        let value = Tensor::from_vec_unchecked(s, kernels::softmax_rows(self.value(x).data(), k));
        let rg = self.rg(&[Some(x)]);
        self.push(value, Op::Softmax { x, k }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(SmarcError::shape("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec_unchecked(self.shape(a).to_vec(), data);
        let rg = self.rg(&[Some(a), Some(b)]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(SmarcError::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_vec_unchecked(self.shape(a).to_vec(), data);
        let rg = self.rg(&[Some(a), Some(b)]);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(&[Some(x)]);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[Some(x)]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).data().iter().map(|&v| v * v).sum());
        let rg = self.rg(&[Some(x)]);
        self.push(value, Op::SumSquares(x), rg)
    }

    /// Weighted mean absolute error. `pixel_weight[p]` applies to every channel
    /// of pixel `p`; the result is normalised by the total weight.
    pub fn weighted_mae(&mut self, pred: Var, target: &Tensor<T>, pixel_weight: Vec<T>) -> Result<Var> {
        let ps = self.shape(pred).to_vec();
        if ps != target.shape() {
            return Err(SmarcError::shape("masked_mae", &ps, target.shape()));
        }
        let c = *ps.last().unwrap_or(&1);
        if pixel_weight.len() * c != target.numel() {
            return Err(SmarcError::shape("masked_mae weights", &ps, &[pixel_weight.len()]));
        }
        let total_w: T = pixel_weight.iter().copied().sum::<T>() * T::lit(c as f64);
        let mut acc = T::zero();
        for ((pr, tr), &w) in self
            .value(pred)
            .data()
            .chunks_exact(c)
            .zip(target.data().chunks_exact(c))
            .zip(&pixel_weight)
        {
            for (&p, &t) in pr.iter().zip(tr) {
                acc += w * (p - t).abs();
            }
        }
        let denom = if total_w > T::zero() { total_w } else { T::one() };
        let value = Tensor::scalar(acc / denom);
        let rg = self.rg(&[Some(pred)]);
        self.push(
            value,
            Op::MaskedMae {
                pred,
                target: target.clone(),
                pixel_w: pixel_weight,
                c,
                denom,
            },
            rg,
        )
    }

    /// Mean over the batch of `sample_weight[b] · (−Σ_k target[b,k] · log softmax(logits)[b,k])`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<T>, sample_weight: Vec<T>) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.len() != s[0] * s[1] || sample_weight.len() != s[0] {
            return Err(SmarcError::shape("cross_entropy", &s, &[targets.len(), sample_weight.len()]));
        }
        let (batch, k) = (s[0], s[1]);
        let logp = kernels::log_softmax_rows(self.value(logits).data(), k);
        let mut acc = T::zero();
        for n in 0..batch {
            let row: T = logp[n * k..][..k]
                .iter()
                .zip(&targets[n * k..][..k])
                .map(|(&lp, &t)| t * lp)
                .sum();
            acc -= sample_weight[n] * row;
        }
        let value = Tensor::scalar(acc / T::lit(batch as f64));
        let probs = logp.iter().map(|&v| v.exp()).collect();
        let rg = self.rg(&[Some(logits)]);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                sample_w: sample_weight,
                k,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(SmarcError::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .map(|n| match n.op {
                Op::Param(id) => Some(id),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
                cout,
            } => {
                let want = (self.wants(*x), self.wants(*w), b.is_some_and(|b| self.wants(b)));
                let r = kernels::conv2d_backward(val(*x), *batch, geom, val(*w), *cout, g, want);
                accumulate(grads, *x, r.input);
                accumulate(grads, *w, r.weight);
                if let Some(b) = b {
                    accumulate(grads, *b, r.bias);
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                geom,
                batch,
                cin,
            } => {
                let want = (self.wants(*x), self.wants(*w), b.is_some_and(|b| self.wants(b)));
                let r = kernels::conv_transpose2d_backward(val(*x), *batch, geom, val(*w), *cin, g, want);
                accumulate(grads, *x, r.input);
                accumulate(grads, *w, r.weight);
                if let Some(b) = b {
                    accumulate(grads, *b, r.bias);
                }
            }
            Op::MaskMul { x, mask, c } => {
                if self.wants(*x) {
                    let mut dx = g.to_vec();
                    for (row, &m) in dx.chunks_exact_mut(*c).zip(mask.iter()) {
                        for v in row {
                            *v *= m;
                        }
                    }
                    accumulate(grads, *x, Some(dx));
                }
            }
            Op::Renorm {
                x,
                bias,
                ratio,
                valid,
                c,
            } => {
                if self.wants(*x) {
                    let mut dx = g.to_vec();
                    for (row, &r) in dx.chunks_exact_mut(*c).zip(ratio.iter()) {
                        for v in row {
                            *v *= r;
                        }
                    }
                    accumulate(grads, *x, Some(dx));
                }
                if let Some(bv) = bias.filter(|bv| self.wants(*bv)) {
                    let mut db = vec![T::zero(); *c];
                    for (row, &vp) in g.chunks_exact(*c).zip(valid.iter()) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv * vp;
                        }
                    }
                    accumulate(grads, bv, Some(db));
                }
            }
            Op::AvgPool2 { x, dims } => {
                if self.wants(*x) {
                    let [b, h, w, c] = *dims;
                    accumulate(grads, *x, Some(kernels::avg_pool2_backward(g, b, h, w, c)));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if self.wants(*x) {
                    let n = self.nodes[x.0].value.numel();
                    accumulate(grads, *x, Some(kernels::max_pool2_backward(g, argmax, n)));
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let dx = g
                        .iter()
                        .zip(val(*x))
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    accumulate(grads, *x, Some(dx));
                }
            }
            Op::Sigmoid(x) => {
                if self.wants(*x) {
                    let dx = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gv, &y)| gv * y * (T::one() - y))
                        .collect();
                    accumulate(grads, *x, Some(dx));
                }
            }
            Op::Dense { x, w, b, batch, f, u } => {
                let want = (self.wants(*x), self.wants(*w), b.is_some_and(|b| self.wants(b)));
                let r = kernels::dense_backward(val(*x), *batch, *f, val(*w), *u, g, want);
                accumulate(grads, *x, r.input);
                accumulate(grads, *w, r.weight);
                if let Some(b) = b {
                    accumulate(grads, *b, r.bias);
                }
            }
            Op::GlobalAvgPool { x, batch, hw, c } => {
                if self.wants(*x) {
                    accumulate(grads, *x, Some(kernels::global_avg_pool_backward(g, *batch, *hw, *c)));
                }
            }
            Op::ChannelScale { x, s, batch, hw, c } => {
                let (hw, c) = (*hw, *c);
                let xd = val(*x);
                let sd = val(*s);
                if self.wants(*x) {
                    let mut dx = g.to_vec();
                    for n in 0..*batch {
                        let scale = &sd[n * c..][..c];
                        for row in dx[n * hw * c..][..hw * c].chunks_exact_mut(c) {
                            for (v, &sv) in row.iter_mut().zip(scale) {
                                *v *= sv;
                            }
                        }
                    }
                    accumulate(grads, *x, Some(dx));
                }
                if self.wants(*s) {
                    let mut ds = vec![T::zero(); batch * c];
                    for n in 0..*batch {
                        let dst = &mut ds[n * c..][..c];
                        let gs = &g[n * hw * c..][..hw * c];
                        let xs = &xd[n * hw * c..][..hw * c];
                        for (gr, xr) in gs.chunks_exact(c).zip(xs.chunks_exact(c)) {
                            for ((d, &gv), &xv) in dst.iter_mut().zip(gr).zip(xr) {
                                *d += gv * xv;
                            }
                        }
                    }
                    accumulate(grads, *s, Some(ds));
                }
            }
            Op::Concat { a, b, ca, cb } => {
                let rows = g.len() / (ca + cb);
                if self.wants(*a) {
                    let mut da = Vec::with_capacity(rows * ca);
                    for row in g.chunks_exact(ca + cb) {
                        da.extend_from_slice(&row[..*ca]);
                    }
                    accumulate(grads, *a, Some(da));
                }
                if self.wants(*b) {
                    let mut db = Vec::with_capacity(rows * cb);
                    for row in g.chunks_exact(ca + cb) {
                        db.extend_from_slice(&row[*ca..]);
                    }
                    accumulate(grads, *b, Some(db));
                }
            }
            Op::Dropout { x, keep } => {
                if self.wants(*x) {
                    let dx = g.iter().zip(keep).map(|(&gv, &k)| gv * k).collect();
                    accumulate(grads, *x, Some(dx));
                }
            }
            Op::Softmax { x, k } => {
                if self.wants(*x) {
                    let y = node.value.data();
                    let mut dx = vec![T::zero(); y.len()];
                    for ((dr, yr), gr) in dx.chunks_exact_mut(*k).zip(y.chunks_exact(*k)).zip(g.chunks_exact(*k)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - dot);
                        }
                    }
                    accumulate(grads, *x, Some(dx));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, Some(g.to_vec()));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, Some(g.to_vec()));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = g.iter().zip(val(*b)).map(|(&gv, &bv)| gv * bv).collect();
                    accumulate(grads, *a, Some(d));
                }
                if self.wants(*b) {
                    let d = g.iter().zip(val(*a)).map(|(&gv, &av)| gv * av).collect();
                    accumulate(grads, *b, Some(d));
                }
            }
            Op::Scale(x, c) => {
                if self.wants(*x) {
                    accumulate(grads, *x, Some(g.iter().map(|&gv| gv * *c).collect()));
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    accumulate(grads, *x, Some(vec![g[0]; self.nodes[x.0].value.numel()]));
                }
            }
            Op::SumSquares(x) => {
                if self.wants(*x) {
                    let two = T::lit(2.0) * g[0];
                    accumulate(grads, *x, Some(val(*x).iter().map(|&v| two * v).collect()));
                }
            }
            Op::MaskedMae {
                pred,
                target,
                pixel_w,
                c,
                denom,
            } => {
                if self.wants(*pred) {
                    let scale = g[0] / *denom;
                    let mut d = vec![T::zero(); target.numel()];
                    for (((dr, pr), tr), &w) in d
                        .chunks_exact_mut(*c)
                        .zip(val(*pred).chunks_exact(*c))
                        .zip(target.data().chunks_exact(*c))
                        .zip(pixel_w)
                    {
                        for ((dv, &p), &t) in dr.iter_mut().zip(pr).zip(tr) {
                            let diff = p - t;
                            *dv = if diff > T::zero() {
                                scale * w
                            } else if diff < T::zero() {
                                -scale * w
                            } else {
                                T::zero()
                            };
                        }
                    }
                    accumulate(grads, *pred, Some(d));
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                sample_w,
                k,
            } => {
                if self.wants(*logits) {
                    let batch = sample_w.len();
                    let inv_b = g[0] / T::lit(batch as f64);
                    let mut d = vec![T::zero(); probs.len()];
                    for n in 0..batch {
                        let s = sample_w[n] * inv_b;
                        // The targets sum to one, so d/dlogits = p − t.
                        for j in 0..*k {
                            let idx = n * k + j;
                            d[idx] = s * (probs[idx] - targets[idx]);
                        }
                    }
                    accumulate(grads, *logits, Some(d));
                }
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Option<Vec<T>>) {
    let Some(g) = g else { return };
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn op_name<T: Real>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param(_) => "param",
        Op::Conv2d { .. } => "conv2d",
        Op::ConvTranspose2d { .. } => "conv_transpose2d",
        Op::MaskMul { .. } => "mask_mul",
        Op::Renorm { .. } => "partial_conv",
        Op::AvgPool2 { .. } => "avg_pool2d",
        Op::MaxPool2 { .. } => "max_pool2d",
        Op::Relu(_) => "relu",
        Op::Sigmoid(_) => "sigmoid",
        Op::Dense { .. } => "dense",
        Op::GlobalAvgPool { .. } => "global_avg_pool",
        Op::ChannelScale { .. } => "channel_scale",
        Op::Concat { .. } => "concat",
        Op::Dropout { .. } => "dropout",
        Op::Softmax { .. } => "softmax",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Sum(_) => "sum",
        Op::SumSquares(_) => "sum_squares",
        Op::MaskedMae { .. } => "masked_mae",
        Op::CrossEntropy { .. } => "cross_entropy",
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<Option<ParamId>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a node; zeros if the node was never reached.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => Tensor::from_vec_unchecked(self.shapes[v.0].clone(), g.clone()),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Per-parameter gradients summed over every use of the parameter.
    /// `None` for parameters that received no gradient.
    pub fn for_params(&self, n_params: usize) -> Vec<Option<Vec<T>>> {
        let mut out: Vec<Option<Vec<T>>> = (0..n_params).map(|_| None).collect();
        for (node, id) in self.params.iter().enumerate() {
            let (Some(id), Some(g)) = (id, &self.grads[node]) else {
                continue;
            };
            match &mut out[id.0] {
                Some(acc) => {
                    for (a, &x) in acc.iter_mut().zip(g) {
                        *a += x;
                    }
                }
                slot @ None => *slot = Some(g.clone()),
            }
        }
        out
    }
}
