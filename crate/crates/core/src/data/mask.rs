//! The central-patch occlusion protocol.

use crate::error::{Result, SmarcError};
use crate::tensor::{Real, Tensor};

/// Side length and offset of the visible square for a `size × size` image.
pub fn central_patch(size: usize, visible_fraction: f64) -> Result<(usize, usize)> {
    if size < 4 {
        return Err(SmarcError::invalid("central_mask", format!("size {size} must be >= 4")));
    }
    if !(visible_fraction > 0.0 && visible_fraction <= 1.0) {
        return Err(SmarcError::invalid(
            "central_mask",
            format!("visible fraction {visible_fraction} outside (0, 1]"),
        ));
    }
    let side = ((size as f64 * visible_fraction.sqrt()).round() as usize).clamp(1, size);
    Ok((side, (size - side) / 2))
}

/// `size × size × 1` mask with ones on the centred square of side
/// `round(size·√fraction)` and zeros elsewhere.
pub fn central_mask<T: Real>(size: usize, visible_fraction: f64) -> Result<Tensor<T>> {
    let (side, off) = central_patch(size, visible_fraction)?;
    let inside = |i: usize| (off..off + side).contains(&i);
    Ok(Tensor::from_fn(&[size, size, 1], |i| {
        if inside(i / size) && inside(i % size) {
            T::one()
        } else {
            T::zero()
        }
    }))
}

/// `image ⊙ mask`, broadcasting a one-channel mask over the image channels.
/// Works for `H×W×C` and `B×H×W×C` layouts alike.
pub fn apply_mask<T: Real>(image: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let (is, ms) = (image.shape(), mask.shape());
    let r = is.len();
    if r < 3 || ms.len() != r || ms[r - 1] != 1 || is[..r - 1] != ms[..r - 1] {
        return Err(SmarcError::shape("apply_mask", is, ms));
    }
    mask.check_binary("apply_mask")?;
    let c = is[r - 1];
    let m = mask.data();
    Ok(Tensor::from_fn(is, |i| image.data()[i] * m[i / c]))
}
