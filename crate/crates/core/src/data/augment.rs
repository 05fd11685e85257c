//! Training-time augmentation. Geometric transforms act on image and mask
//! together; photometric ones touch the image only.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmarcError};
use crate::tensor::{Real, Tensor};

pub const BRIGHTNESS_DELTA: f64 = 0.06;
pub const CONTRAST_RANGE: (f64, f64) = (0.90, 1.10);
pub const SATURATION_RANGE: (f64, f64) = (0.90, 1.10);
pub const NOISE_SIGMA_MAX: f64 = 0.02;

/// Luma weights used for the per-pixel gray in the saturation adjustment.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// One concrete draw of augmentation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    /// Number of 90° counter-clockwise turns.
    pub rotation_k: u8,
    pub hflip: bool,
    pub vflip: bool,
    pub brightness_delta: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub noise_sigma: f64,
}

impl AugmentSpec {
    pub fn identity() -> Self {
        Self {
            rotation_k: 0,
            hflip: false,
            vflip: false,
            brightness_delta: 0.0,
            contrast: 1.0,
            saturation: 1.0,
            noise_sigma: 0.0,
        }
    }

    /// Uniform draw over the supported ranges.
    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            rotation_k: rng.random_range(0..4),
            hflip: rng.random_bool(0.5),
            vflip: rng.random_bool(0.5),
            brightness_delta: rng.random_range(-BRIGHTNESS_DELTA..=BRIGHTNESS_DELTA),
            contrast: rng.random_range(CONTRAST_RANGE.0..=CONTRAST_RANGE.1),
            saturation: rng.random_range(SATURATION_RANGE.0..=SATURATION_RANGE.1),
            noise_sigma: rng.random_range(0.0..=NOISE_SIGMA_MAX),
        }
    }

    /// The same draw with every photometric component neutral.
    pub fn geometric_only(&self) -> Self {
        Self {
            rotation_k: self.rotation_k,
            hflip: self.hflip,
            vflip: self.vflip,
            ..Self::identity()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.rotation_k < 4
            && self.brightness_delta.abs() <= BRIGHTNESS_DELTA
            && (CONTRAST_RANGE.0..=CONTRAST_RANGE.1).contains(&self.contrast)
            && (SATURATION_RANGE.0..=SATURATION_RANGE.1).contains(&self.saturation)
            && (0.0..=NOISE_SIGMA_MAX).contains(&self.noise_sigma);
        if ok {
            Ok(())
        } else {
            Err(SmarcError::invalid("augment", format!("draw out of range: {self:?}")))
        }
    }
}

fn square_dims<T: Real>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w, c] if h == w => Ok((h, c)),
        _ => Err(SmarcError::invalid(
            "augment",
            format!("expected a square H×W×C tensor, got {:?}", t.shape()),
        )),
    }
}

/// Rotate by `k` quarter turns counter-clockwise, then mirror left/right
/// and/or top/bottom. Output pixel `(i, j)` is read from the returned source.
fn source_pixel(n: usize, k: u8, hflip: bool, vflip: bool, mut i: usize, mut j: usize) -> (usize, usize) {
    if vflip {
        i = n - 1 - i;
    }
    if hflip {
        j = n - 1 - j;
    }
    for _ in 0..k % 4 {
        (i, j) = (j, n - 1 - i);
    }
    (i, j)
}

/// Apply the rotation and flips of `spec` to a square `H×W×C` tensor.
pub fn apply_geometric<T: Real>(t: &Tensor<T>, spec: &AugmentSpec) -> Result<Tensor<T>> {
    let (n, c) = square_dims(t)?;
    if spec.rotation_k.is_multiple_of(4) && !spec.hflip && !spec.vflip {
        return Ok(t.clone());
    }
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    for i in 0..n {
        for j in 0..n {
            let (si, sj) = source_pixel(n, spec.rotation_k, spec.hflip, spec.vflip, i, j);
            let base = (si * n + sj) * c;
            out.extend_from_slice(&src[base..base + c]);
        }
    }
    Tensor::new(t.shape(), out)
}

/// Brightness, contrast around the per-channel mean, saturation around the
/// per-pixel luma, Gaussian noise, then clamp to `[0, 1]`.
pub fn apply_photometric<T: Real, R: Rng + ?Sized>(
    image: &Tensor<T>,
    spec: &AugmentSpec,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let (n, c) = square_dims(image)?;
    let mut px: Vec<f64> = image.data().iter().map(|&v| Real::to_f64(v) + spec.brightness_delta).collect();
    let pixels = n * n;

    if spec.contrast != 1.0 {
        let mut mean = vec![0.0; c];
        for (i, v) in px.iter().enumerate() {
            mean[i % c] += v;
        }
        mean.iter_mut().for_each(|m| *m /= pixels as f64);
        for (i, v) in px.iter_mut().enumerate() {
            *v = mean[i % c] + spec.contrast * (*v - mean[i % c]);
        }
    }
    if spec.saturation != 1.0 && c == 3 {
        for p in px.chunks_mut(3) {
            let gray: f64 = p.iter().zip(LUMA).map(|(v, w)| v * w).sum();
            p.iter_mut().for_each(|v| *v = gray + spec.saturation * (*v - gray));
        }
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| SmarcError::invalid("augment", e.to_string()))?;
        px.iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    Tensor::new(image.shape(), px.into_iter().map(|v| T::lit(v.clamp(0.0, 1.0))).collect())
}

/// Augment an `(image, mask)` pair with an explicit draw.
pub fn augment_with<T: Real, R: Rng + ?Sized>(
    image: &Tensor<T>,
    mask: &Tensor<T>,
    spec: &AugmentSpec,
    rng: &mut R,
) -> Result<(Tensor<T>, Tensor<T>)> {
    spec.validate()?;
    let img = apply_geometric(image, spec)?;
    let m = apply_geometric(mask, spec)?;
    Ok((apply_photometric(&img, spec, rng)?, m))
}

/// Draw parameters from `rng` and augment.
pub fn augment<T: Real, R: Rng + ?Sized>(
    image: &Tensor<T>,
    mask: &Tensor<T>,
    rng: &mut R,
) -> Result<(Tensor<T>, Tensor<T>, AugmentSpec)> {
    let spec = AugmentSpec::draw(rng);
    let (i, m) = augment_with(image, mask, &spec, rng)?;
    Ok((i, m, spec))
}
