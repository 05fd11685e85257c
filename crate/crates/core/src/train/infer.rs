//! Batched evaluation-mode inference over dataset items.

use crate::data::{Batch, Dataset};
use crate::error::Result;
use crate::metrics::{argmax, psnr};
use crate::model::SmarcModel;
use crate::tensor::Tensor;

/// One item's evaluation-mode output.
#[derive(Clone, Debug)]
pub struct Prediction<'a> {
    pub item: usize,
    pub label: usize,
    /// Unmasked target, `S×S×3`.
    pub target: &'a Tensor<f32>,
    /// Network input (masked image), `S×S×3`.
    pub masked: &'a Tensor<f32>,
    /// Raw network output, `S×S×3`.
    pub reconstruction: &'a Tensor<f32>,
    pub probs: &'a [f32],
}

/// Run the model without dropout or augmentation over `indices` in
/// batches, calling `each` per item in order.
pub fn run_inference(
    model: &SmarcModel<f32>,
    dataset: &Dataset,
    indices: &[usize],
    mask: &Tensor<f32>,
    batch_size: usize,
    mut each: impl FnMut(&Prediction<'_>) -> Result<()>,
) -> Result<()> {
    let s = dataset.size;
    for chunk in indices.chunks(batch_size.max(1)) {
        let samples = dataset.samples(chunk, mask)?;
        let batch = Batch::from_samples(&samples)?;
        let out = model.forward(&batch.input, None)?;
        let k = out.class_probs.shape()[1];
        for (j, (&item, sample)) in chunk.iter().zip(&samples).enumerate() {
            let recon = out.reconstruction.batch_item(j).reshape(&[s, s, 3])?;
            let masked = batch.input.features.batch_item(j).reshape(&[s, s, 3])?;
            each(&Prediction {
                item,
                label: sample.label,
                target: &sample.image,
                masked: &masked,
                reconstruction: &recon,
                probs: &out.class_probs.data()[j * k..(j + 1) * k],
            })?;
        }
    }
    Ok(())
}

/// Accuracy and mean per-image PSNR of one split.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SplitScores {
    pub n: usize,
    pub accuracy: f64,
    pub psnr_mean: f64,
    /// Mean PSNR of the masked input itself taken as the reconstruction.
    pub copy_input_psnr_mean: f64,
}

pub fn score_split(
    model: &SmarcModel<f32>,
    dataset: &Dataset,
    indices: &[usize],
    mask: &Tensor<f32>,
    batch_size: usize,
) -> Result<SplitScores> {
    let mut sc = SplitScores::default();
    let mut correct = 0usize;
    run_inference(model, dataset, indices, mask, batch_size, |p| {
        let probs: Vec<f64> = p.probs.iter().map(|&v| v as f64).collect();
        correct += (argmax(&probs) == p.label) as usize;
        sc.psnr_mean += psnr(p.reconstruction.data(), p.target.data())?;
        sc.copy_input_psnr_mean += psnr(p.masked.data(), p.target.data())?;
        sc.n += 1;
        Ok(())
    })?;
    if sc.n > 0 {
        let n = sc.n as f64;
        sc.accuracy = correct as f64 / n;
        sc.psnr_mean /= n;
        sc.copy_input_psnr_mean /= n;
    }
    Ok(sc)
}
