//! Image decode/encode, directory datasets and split manifests.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, RgbImage};

use super::split::{Split, SplitName};
use super::{DataSource, Dataset, Item};
use crate::error::{Result, SmarcError};
use crate::tensor::{Real, Tensor};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| SmarcError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| SmarcError::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

/// Decode an 8-bit PNG or JPEG to `size × size × 3` in `[0, 1]`, resizing
/// (triangle filter) when the stored frame has another resolution.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|source| SmarcError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rgb = img.to_rgb8();
    if rgb.width() as usize != size || rgb.height() as usize != size {
        rgb = image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle);
    }
    let data = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Tensor::new(&[size, size, 3], data)
}

impl Dataset {
    /// Scan `root/<class>/*.{png,jpg,jpeg}`. Classes are the sorted
    /// subdirectory names; files within a class are sorted by name.
    pub fn from_dir(root: &Path, size: usize) -> Result<Self> {
        let mut class_names = Vec::new();
        let mut items = Vec::new();
        for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
            let label = class_names.len();
            let name = dir
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| SmarcError::Dataset(format!("class directory {} is not valid UTF-8", dir.display())))?
                .to_string();
            for file in sorted_entries(&dir)?.into_iter().filter(|p| p.is_file() && is_image(p)) {
                let rel = file.strip_prefix(root).unwrap_or(&file);
                items.push(Item {
                    path: rel.to_string_lossy().into_owned(),
                    label,
                });
            }
            class_names.push(name);
        }
        if class_names.is_empty() {
            return Err(SmarcError::Dataset(format!("no class directories under {}", root.display())));
        }
        Ok(Self {
            class_names,
            items,
            size,
            source: DataSource::Directory { root: root.to_path_buf() },
        })
    }
}

fn to_u8<T: Real>(v: T) -> u8 {
    (Real::to_f64(v).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write an `H×W×3` or `H×W×1` tensor (values in `[0, 1]`) as PNG.
pub fn write_png<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let (h, w, c) = match *t.shape() {
        [h, w, c] | [1, h, w, c] => (h, w, c),
        _ => return Err(SmarcError::invalid("write_png", format!("unsupported shape {:?}", t.shape()))),
    };
    let bytes: Vec<u8> = t.data().iter().map(|&v| to_u8(v)).collect();
    let res = match c {
        3 => RgbImage::from_raw(w as u32, h as u32, bytes).map(|i| i.save(path)),
        1 => GrayImage::from_raw(w as u32, h as u32, bytes).map(|i| i.save(path)),
        _ => return Err(SmarcError::invalid("write_png", format!("{c} channels"))),
    };
    res.expect("buffer length matches shape").map_err(|source| SmarcError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Side-by-side `H×(n·W)×3` strip of equally-shaped `H×W×3` images.
pub fn hstack<T: Real>(panels: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = panels.first().ok_or_else(|| SmarcError::invalid("hstack", "no panels"))?;
    let [h, w, c] = *first.shape() else {
        return Err(SmarcError::invalid("hstack", format!("expected H×W×C, got {:?}", first.shape())));
    };
    let mut data = Vec::with_capacity(first.numel() * panels.len());
    for p in panels {
        if p.shape() != first.shape() {
            return Err(SmarcError::shape("hstack", first.shape(), p.shape()));
        }
    }
    for y in 0..h {
        for p in panels {
            data.extend_from_slice(&p.data()[y * w * c..(y + 1) * w * c]);
        }
    }
    Tensor::new(&[h, w * panels.len(), c], data)
}

/// One line per assigned item: `path<TAB>split<TAB>label`, in item order.
pub fn format_manifest(dataset: &Dataset, split: &Split) -> String {
    let mut out = String::new();
    for (item, s) in dataset.items.iter().zip(split.assignment(dataset.len())) {
        if let Some(s) = s {
            let _ = writeln!(out, "{}\t{}\t{}", item.path, s, item.label);
        }
    }
    out
}

pub fn write_manifest(path: &Path, dataset: &Dataset, split: &Split) -> Result<()> {
    fs::write(path, format_manifest(dataset, split)).map_err(|e| SmarcError::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub split: SplitName,
    pub label: usize,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = |why: &str| SmarcError::Dataset(format!("manifest line {}: {why}", n + 1));
            let mut parts = line.split('\t');
            let (Some(path), Some(split), Some(label), None) = (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(bad("expected path<TAB>split<TAB>label"));
            };
            Ok(ManifestEntry {
                path: path.to_string(),
                split: split.parse().map_err(|_| bad("unknown split"))?,
                label: label.parse().map_err(|_| bad("label is not an integer"))?,
            })
        })
        .collect()
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    parse_manifest(&fs::read_to_string(path).map_err(|e| SmarcError::io(path, e))?)
}

/// Rebuild a [`Split`] of `dataset` from manifest entries, matching by path.
pub fn split_from_manifest(dataset: &Dataset, entries: &[ManifestEntry]) -> Result<Split> {
    let index: std::collections::HashMap<&str, usize> =
        dataset.items.iter().enumerate().map(|(i, it)| (it.path.as_str(), i)).collect();
    let mut out = Split::default();
    for e in entries {
        let &i = index
            .get(e.path.as_str())
            .ok_or_else(|| SmarcError::Dataset(format!("manifest path {} not in dataset", e.path)))?;
        if dataset.items[i].label != e.label {
            return Err(SmarcError::Dataset(format!(
                "manifest label {} for {} disagrees with dataset label {}",
                e.label, e.path, dataset.items[i].label
            )));
        }
        match e.split {
            SplitName::Train => out.train.push(i),
            SplitName::Val => out.val.push(i),
            SplitName::Test => out.test.push(i),
        }
    }
    Ok(out)
}
