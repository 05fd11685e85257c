//! Dataset ingestion, masking, splitting, augmentation and batching.

pub mod augment;
pub mod io;
pub mod mask;
pub mod split;
pub mod synth;

use std::path::PathBuf;

use rayon::prelude::*;

use crate::error::{Result, SmarcError};
use crate::pconv::MaskPair;
use crate::tensor::Tensor;

pub use augment::{augment, augment_with, AugmentSpec};
pub use mask::{apply_mask, central_mask, central_patch};
pub use split::{split, Split, SplitName, SplitSpec};
pub use synth::{synth_texture, SYNTH_CLASSES};

/// Mix a base seed with a stream index (splitmix64 finaliser) so every
/// sample, epoch or worker gets an independent, order-free RNG stream.
pub fn stream_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One masked training example. `image` is the unmasked target.
#[derive(Clone, Debug)]
pub struct Sample {
    /// `S×S×3`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `S×S×1`, binary.
    pub mask: Tensor<f32>,
    pub label: usize,
    pub source_path: String,
}

impl Sample {
    /// The network input, invalid pixels zeroed.
    pub fn features(&self) -> Result<Tensor<f32>> {
        apply_mask(&self.image, &self.mask)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Item {
    pub path: String,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// `root/<class>/*.png|jpg`, decoded on demand.
    Directory { root: PathBuf },
    /// Procedural textures, regenerated on demand.
    Synthetic { seed: u64 },
}

/// A labelled image collection. Pixels are produced lazily so a full-size
/// dataset never has to sit in memory at once.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub items: Vec<Item>,
    /// Images are delivered as `size × size × 3`.
    pub size: usize,
    pub source: DataSource,
}

impl Dataset {
    /// `n_per_class` textures of each synthetic class, grouped by label.
    pub fn synthetic(n_per_class: usize, size: usize, seed: u64) -> Result<Self> {
        if n_per_class == 0 {
            return Err(SmarcError::invalid("synth_textures", "n_per_class must be >= 1"));
        }
        if size == 0 {
            return Err(SmarcError::invalid("synth_textures", "size must be >= 1"));
        }
        let items = SYNTH_CLASSES
            .iter()
            .enumerate()
            .flat_map(|(label, name)| {
                (0..n_per_class).map(move |k| Item {
                    path: format!("synthetic/{name}/{k:05}"),
                    label,
                })
            })
            .collect();
        Ok(Self {
            class_names: SYNTH_CLASSES.iter().map(|s| s.to_string()).collect(),
            items,
            size,
            source: DataSource::Synthetic { seed },
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|it| it.label).collect()
    }

    /// Pixels of item `i` as `size × size × 3` in `[0, 1]`.
    pub fn image(&self, i: usize) -> Result<Tensor<f32>> {
        let item = self
            .items
            .get(i)
            .ok_or_else(|| SmarcError::Dataset(format!("item {i} out of range for {} items", self.len())))?;
        match &self.source {
            DataSource::Synthetic { seed } => Ok(synth_texture(item.label, self.size, *seed, i)),
            DataSource::Directory { root } => io::load_image(&root.join(&item.path), self.size),
        }
    }

    /// Item `i` paired with `mask`.
    pub fn sample(&self, i: usize, mask: &Tensor<f32>) -> Result<Sample> {
        if mask.shape() != [self.size, self.size, 1] {
            return Err(SmarcError::shape("sample", &[self.size, self.size, 1], mask.shape()));
        }
        Ok(Sample {
            image: self.image(i)?,
            mask: mask.clone(),
            label: self.items[i].label,
            source_path: self.items[i].path.clone(),
        })
    }

    /// Load several items in parallel, preserving order.
    pub fn samples(&self, indices: &[usize], mask: &Tensor<f32>) -> Result<Vec<Sample>> {
        indices.par_iter().map(|&i| self.sample(i, mask)).collect()
    }
}

/// Synthetic texture dataset; see [`Dataset::synthetic`].
pub fn synth_textures(n_per_class: usize, size: usize, seed: u64) -> Result<Dataset> {
    Dataset::synthetic(n_per_class, size, seed)
}

/// Inverse-frequency weights `N / (K·n_c)`; a balanced label set gets all ones.
pub fn class_weights(labels: &[usize], num_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        *counts
            .get_mut(l)
            .ok_or_else(|| SmarcError::Dataset(format!("label {l} out of range for {num_classes} classes")))? += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(SmarcError::Dataset(format!("class {c} is missing from the labels")));
    }
    let n = labels.len() as f64;
    Ok(counts.iter().map(|&c| n / (num_classes * c) as f64).collect())
}

/// A stacked mini-batch ready for the model and the loss.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Masked features with their masks.
    pub input: MaskPair<f32>,
    /// Unmasked images, `B×S×S×3`.
    pub target: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        let features = samples.iter().map(Sample::features).collect::<Result<Vec<_>>>()?;
        let masks: Vec<_> = samples.iter().map(|s| s.mask.clone()).collect();
        let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
        Ok(Self {
            input: MaskPair::new(Tensor::stack(&features)?, Tensor::stack(&masks)?)?,
            target: Tensor::stack(&images)?,
            labels: samples.iter().map(|s| s.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_seeds_differ() {
        let a: Vec<u64> = (0..64).map(|i| stream_seed(42, i)).collect();
        let mut b = a.clone();
        b.sort_unstable();
        b.dedup();
        assert_eq!(b.len(), a.len());
        assert_ne!(stream_seed(1, 0), stream_seed(2, 0));
    }
}
