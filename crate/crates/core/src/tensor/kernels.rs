//! Raw NHWC compute kernels on flat slices. No autodiff bookkeeping lives
//! here; [`super::graph`] pairs each forward kernel with its backward.
//!
//! Convolutions go through im2col + GEMM. The im2col matrix for a whole batch
//! is `[B·P, K]` with `P = out_h·out_w` and `K = kh·kw·Cin`; the kernel tensor
//! `kh×kw×Cin×Cout` is already the `[K, Cout]` right-hand operand.

use rayon::prelude::*;

use super::Real;
use crate::error::{Result, SmarcError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding chosen so that `out = ceil(in / stride)`.
    Same,
    Valid,
}

/// Spatial bookkeeping shared by convolution, its transpose and the
/// partial-convolution window counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_h: usize,
        in_w: usize,
        in_c: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        dilation: usize,
        padding: Padding,
    ) -> Result<Self> {
        if stride == 0 || dilation == 0 {
            return Err(SmarcError::invalid(
                "conv2d",
                format!("stride ({stride}) and dilation ({dilation}) must be >= 1"),
            ));
        }
        if kh == 0 || kw == 0 {
            return Err(SmarcError::invalid("conv2d", "empty kernel"));
        }
        let span_h = dilation * (kh - 1) + 1;
        let span_w = dilation * (kw - 1) + 1;
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Same => {
                let out_h = in_h.div_ceil(stride);
                let out_w = in_w.div_ceil(stride);
                let total_h = ((out_h - 1) * stride + span_h).saturating_sub(in_h);
                let total_w = ((out_w - 1) * stride + span_w).saturating_sub(in_w);
                (out_h, out_w, total_h / 2, total_w / 2)
            }
            Padding::Valid => {
                if in_h < span_h || in_w < span_w {
                    return Err(SmarcError::invalid(
                        "conv2d",
                        format!(
                            "input {in_h}×{in_w} smaller than dilated kernel {span_h}×{span_w}"
                        ),
                    ));
                }
                ((in_h - span_h) / stride + 1, (in_w - span_w) / stride + 1, 0, 0)
            }
        };
        Ok(Self {
            in_h,
            in_w,
            in_c,
            out_h,
            out_w,
            kh,
            kw,
            stride,
            dilation,
            pad_top,
            pad_left,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.in_c
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.in_h * self.in_w * self.in_c
    }

    /// Input row/column of tap `(ky, kx)` for output `(oy, ox)`, if in bounds.
    #[inline]
    pub fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky * self.dilation).checked_sub(self.pad_top)?;
        let ix = (ox * self.stride + kx * self.dilation).checked_sub(self.pad_left)?;
        (iy < self.in_h && ix < self.in_w).then_some((iy, ix))
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.stride == 1
            && self.pad_top == 0
            && self.pad_left == 0
    }
}

/// Unfold one image into `[P, K]` patch rows; out-of-bounds taps are zero.
pub fn im2col<T: Real>(img: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let c = g.in_c;
    let k = g.patch_len();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &mut cols[(oy * g.out_w + ox) * k..][..k];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let dst = &mut row[(ky * g.kw + kx) * c..][..c];
                    match g.source(oy, ox, ky, kx) {
                        Some((iy, ix)) => {
                            dst.copy_from_slice(&img[(iy * g.in_w + ix) * c..][..c]);
                        }
                        None => dst.fill(T::zero()),
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch rows back into an image.
pub fn col2im_add<T: Real>(cols: &[T], g: &ConvGeometry, img: &mut [T]) {
    let c = g.in_c;
    let k = g.patch_len();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &cols[(oy * g.out_w + ox) * k..][..k];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                        let src = &row[(ky * g.kw + kx) * c..][..c];
                        let dst = &mut img[(iy * g.in_w + ix) * c..][..c];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

fn batch_im2col<T: Real>(input: &[T], batch: usize, g: &ConvGeometry) -> Vec<T> {
    let per_in = g.in_len();
    let per_cols = g.out_pixels() * g.patch_len();
    let mut cols = vec![T::zero(); batch * per_cols];
    cols.par_chunks_mut(per_cols.max(1))
        .zip(input.par_chunks(per_in.max(1)))
        .for_each(|(dst, img)| im2col(img, g, dst));
    cols
}

fn batch_col2im<T: Real>(cols: &[T], batch: usize, g: &ConvGeometry) -> Vec<T> {
    let per_in = g.in_len();
    let per_cols = g.out_pixels() * g.patch_len();
    let mut img = vec![T::zero(); batch * per_in];
    img.par_chunks_mut(per_in.max(1))
        .zip(cols.par_chunks(per_cols.max(1)))
        .for_each(|(dst, src)| col2im_add(src, g, dst));
    img
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T]) {
    let c = bias.len();
    for row in out.chunks_exact_mut(c) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn bias_grad<T: Real>(dout: &[T], c: usize) -> Vec<T> {
    let mut db = vec![T::zero(); c];
    for row in dout.chunks_exact(c) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    db
}

/// Cross-correlation over a batch. Returns `[B, out_h, out_w, cout]`.
pub fn conv2d_forward<T: Real>(
    input: &[T],
    batch: usize,
    g: &ConvGeometry,
    weight: &[T],
    cout: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let k = g.patch_len();
    let rows = batch * g.out_pixels();
    let mut out = vec![T::zero(); rows * cout];
    if g.is_pointwise() {
        T::gemm(rows, k, cout, input, k as isize, 1, weight, cout as isize, 1, T::zero(), &mut out, cout as isize, 1);
    } else {
        let cols = batch_im2col(input, batch, g);
        T::gemm(rows, k, cout, &cols, k as isize, 1, weight, cout as isize, 1, T::zero(), &mut out, cout as isize, 1);
    }
    if let Some(b) = bias {
        add_bias(&mut out, b);
    }
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    input: &[T],
    batch: usize,
    g: &ConvGeometry,
    weight: &[T],
    cout: usize,
    dout: &[T],
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let k = g.patch_len();
    let rows = batch * g.out_pixels();
    let (want_x, want_w, want_b) = want;

    let weight_grad = want_w.then(|| {
        let mut dw = vec![T::zero(); k * cout];
        let owned;
        let cols: &[T] = if g.is_pointwise() {
            input
        } else {
            owned = batch_im2col(input, batch, g);
            &owned
        };
        // dW[K, Cout] = colsᵀ · dOut
        T::gemm(k, rows, cout, cols, 1, k as isize, dout, cout as isize, 1, T::zero(), &mut dw, cout as isize, 1);
        dw
    });
    let input_grad = want_x.then(|| {
        // dCols[rows, K] = dOut · Wᵀ
        let mut dcols = vec![T::zero(); rows * k];
        T::gemm(rows, cout, k, dout, cout as isize, 1, weight, 1, cout as isize, T::zero(), &mut dcols, k as isize, 1);
        if g.is_pointwise() {
            dcols
        } else {
            batch_col2im(&dcols, batch, g)
        }
    });
    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: want_b.then(|| bias_grad(dout, cout)),
    }
}

/// Transposed convolution as the exact adjoint of a strided conv2d.
///
/// `g` describes the *forward* conv that maps the large `[in_h, in_w, cout]`
/// map down to the small `[out_h, out_w, ·]` one; this kernel goes the other
/// way. `weight` is `kh×kw×cout×cin`, i.e. the same buffer a conv2d with
/// `cout` inputs and `cin` outputs would use.
pub fn conv_transpose2d_forward<T: Real>(
    input: &[T],
    batch: usize,
    g: &ConvGeometry,
    weight: &[T],
    cin: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let k = g.patch_len();
    let rows = batch * g.out_pixels();
    // cols[rows, K] = X[rows, cin] · Wᵀ, with W viewed as [K, cin]
    let mut cols = vec![T::zero(); rows * k];
    T::gemm(rows, cin, k, input, cin as isize, 1, weight, 1, cin as isize, T::zero(), &mut cols, k as isize, 1);
    let mut out = batch_col2im(&cols, batch, g);
    if let Some(b) = bias {
        add_bias(&mut out, b);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward<T: Real>(
    input: &[T],
    batch: usize,
    g: &ConvGeometry,
    weight: &[T],
    cin: usize,
    dout: &[T],
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let k = g.patch_len();
    let rows = batch * g.out_pixels();
    let dcols = batch_im2col(dout, batch, g);
    let input_grad = want.0.then(|| {
        let mut dx = vec![T::zero(); rows * cin];
        T::gemm(rows, k, cin, &dcols, k as isize, 1, weight, cin as isize, 1, T::zero(), &mut dx, cin as isize, 1);
        dx
    });
    let weight_grad = want.1.then(|| {
        // dW[K, cin] = dColsᵀ · X
        let mut dw = vec![T::zero(); k * cin];
        T::gemm(k, rows, cin, &dcols, 1, k as isize, input, cin as isize, 1, T::zero(), &mut dw, cin as isize, 1);
        dw
    });
    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: want.2.then(|| bias_grad(dout, g.in_c)),
    }
}

/// Count of valid mask pixels under every output window of `g`
/// (`mask` is `[B, in_h, in_w, 1]`), plus the number of in-bounds taps.
pub fn window_counts<T: Real>(mask: &[T], batch: usize, g: &ConvGeometry) -> (Vec<u32>, Vec<u32>) {
    let per_in = g.in_h * g.in_w;
    let per_out = g.out_pixels();
    let mut valid = vec![0u32; batch * per_out];
    let mut in_bounds = vec![0u32; per_out];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let mut n = 0;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    n += g.source(oy, ox, ky, kx).is_some() as u32;
                }
            }
            in_bounds[oy * g.out_w + ox] = n;
        }
    }
    valid
        .par_chunks_mut(per_out.max(1))
        .zip(mask.par_chunks(per_in.max(1)))
        .for_each(|(dst, m)| {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut s = 0;
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                                s += (m[iy * g.in_w + ix] != T::zero()) as u32;
                            }
                        }
                    }
                    dst[oy * g.out_w + ox] = s;
                }
            }
        });
    (valid, in_bounds)
}

fn check_even(op: &'static str, h: usize, w: usize) -> Result<()> {
    if !h.is_multiple_of(2) || !w.is_multiple_of(2) || h == 0 || w == 0 {
        return Err(SmarcError::invalid(
            op,
            format!("2×2/2 pooling needs even, non-zero extents, got {h}×{w}"),
        ));
    }
    Ok(())
}

/// 2×2 stride-2 average pooling.
pub fn avg_pool2_forward<T: Real>(x: &[T], b: usize, h: usize, w: usize, c: usize) -> Result<Vec<T>> {
    check_even("avg_pool2d", h, w)?;
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); b * oh * ow * c];
    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = &mut out[((n * oh + oy) * ow + ox) * c..][..c];
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let src = &x[((n * h + 2 * oy + dy) * w + 2 * ox + dx) * c..][..c];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                for d in dst.iter_mut() {
                    *d *= quarter;
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2_backward<T: Real>(dout: &[T], b: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut dx = vec![T::zero(); b * h * w * c];
    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let src = &dout[((n * oh + oy) * ow + ox) * c..][..c];
                for (dy, ddx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let dst = &mut dx[((n * h + 2 * oy + dy) * w + 2 * ox + ddx) * c..][..c];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s * quarter;
                    }
                }
            }
        }
    }
    dx
}

/// 2×2 stride-2 max pooling. Also returns, per output element, the flat input
/// index of the winner; ties go to the first tap in row-major order.
pub fn max_pool2_forward<T: Real>(
    x: &[T],
    b: usize,
    h: usize,
    w: usize,
    c: usize,
) -> Result<(Vec<T>, Vec<usize>)> {
    check_even("max_pool2d", h, w)?;
    let (oh, ow) = (h / 2, w / 2);
    let n_out = b * oh * ow * c;
    let mut out = vec![T::zero(); n_out];
    let mut arg = vec![0usize; n_out];
    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let o = ((n * oh + oy) * ow + ox) * c + ch;
                    let mut best_i = ((n * h + 2 * oy) * w + 2 * ox) * c + ch;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = ((n * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                        if x[i] > x[best_i] {
                            best_i = i;
                        }
                    }
                    out[o] = x[best_i];
                    arg[o] = best_i;
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn max_pool2_backward<T: Real>(dout: &[T], argmax: &[usize], in_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); in_len];
    for (&g, &i) in dout.iter().zip(argmax) {
        dx[i] += g;
    }
    dx
}

/// Spatial mean per channel: `[B,H,W,C] -> [B,C]`.
pub fn global_avg_pool_forward<T: Real>(x: &[T], b: usize, hw: usize, c: usize) -> Vec<T> {
    let inv = T::lit(1.0 / hw as f64);
    let mut out = vec![T::zero(); b * c];
    for n in 0..b {
        let dst = &mut out[n * c..][..c];
        for p in 0..hw {
            for (d, &s) in dst.iter_mut().zip(&x[(n * hw + p) * c..][..c]) {
                *d += s;
            }
        }
        for d in dst.iter_mut() {
            *d *= inv;
        }
    }
    out
}

pub fn global_avg_pool_backward<T: Real>(dout: &[T], b: usize, hw: usize, c: usize) -> Vec<T> {
    let inv = T::lit(1.0 / hw as f64);
    let mut dx = vec![T::zero(); b * hw * c];
    for n in 0..b {
        let src = &dout[n * c..][..c];
        for p in 0..hw {
            for (d, &s) in dx[(n * hw + p) * c..][..c].iter_mut().zip(src) {
                *d = s * inv;
            }
        }
    }
    dx
}

/// `[B,F]·[F,U] + bias`.
pub fn dense_forward<T: Real>(x: &[T], b: usize, f: usize, w: &[T], u: usize, bias: Option<&[T]>) -> Vec<T> {
    let mut out = vec![T::zero(); b * u];
    T::gemm(b, f, u, x, f as isize, 1, w, u as isize, 1, T::zero(), &mut out, u as isize, 1);
    if let Some(bias) = bias {
        add_bias(&mut out, bias);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn dense_backward<T: Real>(
    x: &[T],
    b: usize,
    f: usize,
    w: &[T],
    u: usize,
    dout: &[T],
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let input = want.0.then(|| {
        let mut dx = vec![T::zero(); b * f];
        T::gemm(b, u, f, dout, u as isize, 1, w, 1, u as isize, T::zero(), &mut dx, f as isize, 1);
        dx
    });
    let weight = want.1.then(|| {
        let mut dw = vec![T::zero(); f * u];
        T::gemm(f, b, u, x, 1, f as isize, dout, u as isize, 1, T::zero(), &mut dw, u as isize, 1);
        dw
    });
    ConvGrads {
        input,
        weight,
        bias: want.2.then(|| bias_grad(dout, u)),
    }
}

/// Row-wise softmax over the last axis of a `[rows, k]` buffer.
pub fn softmax_rows<T: Real>(x: &[T], k: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for row in out.chunks_exact_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

/// Row-wise log-softmax over the last axis of a `[rows, k]` buffer.
pub fn log_softmax_rows<T: Real>(x: &[T], k: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for row in out.chunks_exact_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}
