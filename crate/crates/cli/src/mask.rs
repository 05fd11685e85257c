use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Args;
use smarc_core::data::io::{load_image, write_png};
use smarc_core::data::{apply_mask, central_mask};

use crate::common::create_dir;
use crate::manifest::{manifest_in, RunManifest};

#[derive(Args, Debug)]
pub struct MaskArgs {
    /// Directory of PNG/JPEG images; subdirectories are mirrored.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Share of the image area left visible.
    #[arg(long, default_value_t = 0.10)]
    pub fraction: f64,
    /// Images are resized to SIZE×SIZE first.
    #[arg(long, default_value_t = 224)]
    pub size: usize,
}

fn collect_images(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_images(&p, out)?;
        } else if p
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        {
            out.push(p);
        }
    }
    Ok(())
}

pub fn run(a: MaskArgs) -> Result<()> {
    let t0 = Instant::now();
    let mask = central_mask::<f32>(a.size, a.fraction)?;
    let mut files = Vec::new();
    collect_images(&a.input, &mut files)?;
    if files.is_empty() {
        bail!("no images found in {}", a.input.display());
    }
    create_dir(&a.output)?;
    let mask_path = a.output.join("mask.png");
    write_png(&mask_path, &mask)?;

    let mut m = RunManifest::new("mask");
    m.input(&a.input);
    m.output(&mask_path);
    m.set("fraction", a.fraction);
    m.set("size", a.size as i64);

    let mut failed = Vec::new();
    for f in &files {
        let rel = f.strip_prefix(&a.input).unwrap_or(f);
        let dest = a.output.join(rel).with_extension("png");
        let res = (|| -> Result<()> {
            let img = load_image(f, a.size)?;
            if let Some(parent) = dest.parent() {
                create_dir(parent)?;
            }
            write_png(&dest, &apply_mask(&img, &mask)?)?;
            Ok(())
        })();
        match res {
            Ok(()) => m.output(&dest),
            Err(e) => {
                eprintln!("failed: {}: {e:#}", f.display());
                failed.push(f.display().to_string());
            }
        }
    }
    let visible = mask.data().iter().filter(|&&v| v == 1.0).count();
    println!("masked {} of {} images; visible pixels {visible}", files.len() - failed.len(), files.len());
    m.set("visible_pixels", visible as i64);
    m.set("failed", failed.clone());
    m.time("total", t0.elapsed().as_secs_f64());
    m.write(&manifest_in(&a.output))?;
    if !failed.is_empty() {
        bail!("{} image(s) could not be processed", failed.len());
    }
    Ok(())
}
