use std::path::PathBuf;
use std::time::Instant;

use anyhow::Result;
use clap::Args;
use smarc_core::data::io::{hstack, load_image, write_png};
use smarc_core::data::{apply_mask, central_mask};
use smarc_core::pconv::MaskPair;
use smarc_core::train::load_checkpoint;

use crate::manifest::{manifest_beside, RunManifest};

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// PNG with masked | reconstruction | original side by side.
    #[arg(long)]
    pub out: PathBuf,
    /// Visible fraction; defaults to the one the checkpoint was trained with.
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Names printed next to the class probabilities, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub class_names: Vec<String>,
}

pub fn run(a: ReconstructArgs) -> Result<()> {
    let t0 = Instant::now();
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let fraction = a
        .fraction
        .or(ckpt.train.as_ref().map(|c| c.visible_fraction))
        .unwrap_or(0.10);
    let model = ckpt.model;
    let s = model.cfg.input_size;
    let image = load_image(&a.image, s)?;
    let mask = central_mask::<f32>(s, fraction)?;
    let masked = apply_mask(&image, &mask)?;
    let input = MaskPair::new(masked.reshape(&[1, s, s, 3])?, mask.reshape(&[1, s, s, 1])?)?;
    let out = model.forward(&input, None)?;
    let recon = out.reconstruction.reshape(&[s, s, 3])?;
    write_png(&a.out, &hstack(&[&masked, &recon, &image])?)?;

    for (k, p) in out.class_probs.data().iter().enumerate() {
        match a.class_names.get(k) {
            Some(name) => println!("{name}\t{p:.4}"),
            None => println!("class_{k}\t{p:.4}"),
        }
    }
    println!("wrote {}", a.out.display());

    let mut m = RunManifest::new("reconstruct");
    m.input(&a.checkpoint);
    m.input(&a.image);
    m.output(&a.out);
    m.set("fraction", fraction);
    m.time("total", t0.elapsed().as_secs_f64());
    m.write(&manifest_beside(&a.out))
}
