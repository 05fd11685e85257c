//! Mask-aware building blocks: partial convolution with mask update,
//! squeeze-and-excitation, the two-convolution block, and the mask
//! pooling/merging helpers used between encoder and decoder stages.
//!
//! Every feature map travels with a single-channel binary validity mask. The
//! mask never carries gradient; it lives outside the tape as a plain tensor.

use rand::Rng;

use crate::error::{Result, SmarcError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::kernels::{self, ConvGeometry, Padding};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Dilation rates the network uses.
pub const DILATIONS: [usize; 3] = [1, 2, 4];

/// A feature map (`B×H×W×C`) and its binary mask (`B×H×W×1`), outside the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPair<T: Real = f32> {
    pub features: Tensor<T>,
    pub mask: Tensor<T>,
}

impl<T: Real> MaskPair<T> {
    pub fn new(features: Tensor<T>, mask: Tensor<T>) -> Result<Self> {
        check_pair(&features, &mask, "MaskPair")?;
        Ok(Self { features, mask })
    }
}

/// A feature node on the tape together with its mask.
#[derive(Clone, Debug)]
pub struct Masked<T: Real = f32> {
    pub features: Var,
    pub mask: Tensor<T>,
}

impl<T: Real> Masked<T> {
    pub fn input(g: &mut Graph<T>, pair: &MaskPair<T>) -> Self {
        Self {
            features: g.constant(pair.features.clone()),
            mask: pair.mask.clone(),
        }
    }

    pub fn to_pair(&self, g: &Graph<T>) -> MaskPair<T> {
        MaskPair {
            features: g.value(self.features).clone(),
            mask: self.mask.clone(),
        }
    }
}

fn check_pair<T: Real>(features: &Tensor<T>, mask: &Tensor<T>, op: &'static str) -> Result<()> {
    let (b, h, w, _) = features.nhwc(op)?;
    if mask.shape() != [b, h, w, 1] {
        return Err(SmarcError::shape(op, features.shape(), mask.shape()));
    }
    mask.check_binary(op)
}

fn mask_dims<T: Real>(mask: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    match mask.nhwc(op)? {
        (b, h, w, 1) => Ok((b, h, w)),
        _ => Err(SmarcError::invalid(
            op,
            format!("mask must have one channel, got shape {:?}", mask.shape()),
        )),
    }
}

/// Partial convolution on the tape: `conv(x ⊙ m) · (n / S) + bias` where `S`
/// counts valid pixels under the window and `n` counts the window taps that
/// fall inside the image (`kh·kw` away from the border). Positions with
/// `S = 0` output zero and become invalid; every other position becomes valid.
///
/// `weight` is `kh×kw×Cin×Cout`; stride 1 with same padding, padded taps
/// counted as invalid.
pub fn partial_conv<T: Real>(
    g: &mut Graph<T>,
    input: &Masked<T>,
    weight: Var,
    bias: Option<Var>,
    dilation: usize,
) -> Result<Masked<T>> {
    check_pair(g.value(input.features), &input.mask, "partial_conv")?;
    let ws = g.shape(weight).to_vec();
    if ws.len() != 4 {
        return Err(SmarcError::invalid(
            "partial_conv",
            format!("kernel must be kh×kw×Cin×Cout, got {ws:?}"),
        ));
    }
    let (batch, h, w, _) = g.value(input.features).nhwc("partial_conv")?;
    let xm = g.mask_mul(input.features, &input.mask)?;
    let conv = g.conv2d(xm, weight, None, 1, dilation, Padding::Same)?;

    let geom = ConvGeometry::new(h, w, 1, ws[0], ws[1], 1, dilation, Padding::Same)?;
    let (valid_counts, in_bounds) = kernels::window_counts(input.mask.data(), batch, &geom);
    let per = geom.out_pixels();
    let mut ratio = Vec::with_capacity(valid_counts.len());
    let mut valid = Vec::with_capacity(valid_counts.len());
    for (p, &s) in valid_counts.iter().enumerate() {
        if s > 0 {
            ratio.push(T::lit(in_bounds[p % per] as f64 / s as f64));
            valid.push(T::one());
        } else {
            ratio.push(T::zero());
            valid.push(T::zero());
        }
    }
    let mask = Tensor::new(&[batch, geom.out_h, geom.out_w, 1], valid.clone())?;
    let features = g.renorm(conv, bias, ratio, valid)?;
    Ok(Masked { features, mask })
}

/// Squeeze-and-excitation on the tape:
/// `x ⊙ sigmoid(expand(relu(reduce(GAP(x)))))`, per channel.
pub fn se_apply<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    reduce: (Var, Var),
    expand: (Var, Var),
) -> Result<Var> {
    let pooled = g.global_avg_pool(x)?;
    let hidden = g.dense(pooled, reduce.0, Some(reduce.1))?;
    let hidden = g.relu(hidden)?;
    let logits = g.dense(hidden, expand.0, Some(expand.1))?;
    let scale = g.sigmoid(logits)?;
    g.channel_scale(x, scale)
}

/// Features through 2×2 average pooling, mask through 2×2 max pooling.
pub fn downsample<T: Real>(g: &mut Graph<T>, input: &Masked<T>) -> Result<Masked<T>> {
    let features = g.avg_pool2(input.features)?;
    let mask = mask_pool(&input.mask)?;
    Ok(Masked { features, mask })
}

/// 2×2 stride-2 max pooling of a binary mask.
pub fn mask_pool<T: Real>(mask: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, h, w) = mask_dims(mask, "downsample")?;
    let (out, _) = kernels::max_pool2_forward(mask.data(), b, h, w, 1)?;
    Tensor::new(&[b, h / 2, w / 2, 1], out)
}

/// Element-wise maximum of two binary masks.
pub fn mask_merge<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(SmarcError::shape("mask_merge", a.shape(), b.shape()));
    }
    mask_dims(a, "mask_merge")?;
    a.check_binary("mask_merge")?;
    b.check_binary("mask_merge")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x.max(y)).collect();
    Tensor::new(a.shape(), data)
}

/// Nearest-neighbour 2× upsampling of a mask.
pub fn mask_upsample<T: Real>(mask: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, h, w) = mask_dims(mask, "mask_upsample")?;
    mask.check_binary("mask_upsample")?;
    let (oh, ow) = (2 * h, 2 * w);
    let src = mask.data();
    let mut out = Vec::with_capacity(b * oh * ow);
    for n in 0..b {
        for y in 0..oh {
            let row = &src[(n * h + y / 2) * w..][..w];
            out.extend((0..ow).map(|x| row[x / 2]));
        }
    }
    Tensor::new(&[b, oh, ow, 1], out)
}

/// A partial-convolution layer whose weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct PartialConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub dilation: usize,
}

impl PartialConvLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if !DILATIONS.contains(&dilation) {
            return Err(SmarcError::invalid(
                "PartialConvLayer",
                format!("dilation {dilation} not in {DILATIONS:?}"),
            ));
        }
        let k = 3;
        let weight = store.add_kernel(
            format!("{name}.weight"),
            &[k, k, in_channels, out_channels],
            k * k * in_channels,
            rng,
        )?;
        let bias = store.add_bias(format!("{name}.bias"), out_channels)?;
        Ok(Self {
            weight,
            bias,
            kernel: k,
            in_channels,
            out_channels,
            dilation,
        })
    }

    /// Denominator reference `kh·kw`.
    pub fn window_ones(&self) -> usize {
        self.kernel * self.kernel
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, input: &Masked<T>) -> Result<Masked<T>> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        partial_conv(g, input, w, Some(b), self.dilation)
    }
}

/// Squeeze-and-excitation block: dense `C → max(4, C/r)`, relu, dense back to
/// `C`, sigmoid gate.
#[derive(Clone, Debug)]
pub struct SeBlock {
    pub reduce_weight: ParamId,
    pub reduce_bias: ParamId,
    pub expand_weight: ParamId,
    pub expand_bias: ParamId,
    pub channels: usize,
    pub reduced: usize,
}

impl SeBlock {
    pub fn reduced_width(channels: usize, ratio: usize) -> usize {
        (channels / ratio.max(1)).max(4)
    }

    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let reduced = Self::reduced_width(channels, ratio);
        let reduce_weight = store.add_kernel(format!("{name}.reduce.weight"), &[channels, reduced], channels, rng)?;
        let reduce_bias = store.add_bias(format!("{name}.reduce.bias"), reduced)?;
        let expand_weight = store.add_kernel(format!("{name}.expand.weight"), &[reduced, channels], reduced, rng)?;
        let expand_bias = store.add_bias(format!("{name}.expand.bias"), channels)?;
        Ok(Self {
            reduce_weight,
            reduce_bias,
            expand_weight,
            expand_bias,
            channels,
            reduced,
        })
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let rw = g.param(store, self.reduce_weight);
        let rb = g.param(store, self.reduce_bias);
        let ew = g.param(store, self.expand_weight);
        let eb = g.param(store, self.expand_bias);
        se_apply(g, x, (rw, rb), (ew, eb))
    }
}

/// Two 3×3 partial convolutions with relu, then squeeze-and-excitation.
#[derive(Clone, Debug)]
pub struct PConvBlock {
    pub conv1: PartialConvLayer,
    pub conv2: PartialConvLayer,
    pub se: SeBlock,
}

impl PConvBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        dilation: usize,
        se_ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv1: PartialConvLayer::new(store, &format!("{name}.pconv1"), in_channels, out_channels, dilation, rng)?,
            conv2: PartialConvLayer::new(store, &format!("{name}.pconv2"), out_channels, out_channels, dilation, rng)?,
            se: SeBlock::new(store, &format!("{name}.se"), out_channels, se_ratio, rng)?,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, input: &Masked<T>) -> Result<Masked<T>> {
        let a = self.conv1.apply(g, store, input)?;
        let a = Masked {
            features: g.relu(a.features)?,
            mask: a.mask,
        };
        let b = self.conv2.apply(g, store, &a)?;
        let x = g.relu(b.features)?;
        Ok(Masked {
            features: self.se.apply(g, store, x)?,
            mask: b.mask,
        })
    }
}

/// Mask produced by a partial convolution with a `k×k` kernel at `dilation`,
/// without touching any features.
pub fn propagate_mask<T: Real>(mask: &Tensor<T>, kernel: usize, dilation: usize) -> Result<Tensor<T>> {
    let (b, h, w) = mask_dims(mask, "propagate_mask")?;
    mask.check_binary("propagate_mask")?;
    let geom = ConvGeometry::new(h, w, 1, kernel, kernel, 1, dilation, Padding::Same)?;
    let (counts, _) = kernels::window_counts(mask.data(), b, &geom);
    let data = counts.iter().map(|&s| if s > 0 { T::one() } else { T::zero() }).collect();
    Tensor::new(&[b, geom.out_h, geom.out_w, 1], data)
}
