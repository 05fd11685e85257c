use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::Args;
use smarc_core::data::io::{hstack, write_png};
use smarc_core::data::{central_mask, split, SplitName};
use smarc_core::metrics::{classification_report, composite, image_metrics, EvalReport, ImageMetrics};
use smarc_core::train::{load_checkpoint, run_inference};
use smarc_core::SmarcError;

use crate::common::{create_dir, split_indices, DataArgs};
use crate::manifest::{manifest_beside, RunManifest};

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "test")]
    pub split: SplitName,
    /// Report path; defaults to `eval_<split>.toml` next to the checkpoint.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Number of masked | reconstruction | original panels to write.
    #[arg(long, default_value_t = 8)]
    pub grids: usize,
    /// Defaults to `grids_<split>/` next to the checkpoint.
    #[arg(long)]
    pub grid_dir: Option<PathBuf>,
    /// Paste the observed pixels into the output before scoring.
    #[arg(long)]
    pub composite: bool,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

pub fn run(a: EvalArgs) -> Result<()> {
    let t0 = Instant::now();
    let problems = a.data.problems();
    if !problems.is_empty() {
        return Err(SmarcError::Config(problems).into());
    }
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let cfg = ckpt.train.clone().context(
        "checkpoint carries no training configuration, so the split cannot be re-derived",
    )?;
    let model = ckpt.model;
    let arch = model.cfg.clone();
    let dir = a.checkpoint.parent().map(PathBuf::from).unwrap_or_default();
    let report_path = a.report.clone().unwrap_or_else(|| dir.join(format!("eval_{}.toml", a.split)));
    let grid_dir = a.grid_dir.clone().unwrap_or_else(|| dir.join(format!("grids_{}", a.split)));

    let dataset = a.data.load(arch.input_size, cfg.seed)?;
    if dataset.num_classes() != arch.num_classes {
        return Err(SmarcError::Config(vec![format!(
            "dataset has {} classes, checkpoint expects {}",
            dataset.num_classes(),
            arch.num_classes
        )])
        .into());
    }
    let sp = split(&dataset.labels(), dataset.num_classes(), &cfg.split)?;
    let indices = split_indices(&sp, a.split);
    let mask = central_mask::<f32>(arch.input_size, cfg.visible_fraction)?;
    let s = arch.input_size;
    let batch_mask = mask.reshape(&[1, s, s, 1])?;
    if a.grids > 0 {
        create_dir(&grid_dir)?;
    }

    let mut m = RunManifest::new("eval");
    m.seed = Some(cfg.seed);
    m.input(&a.checkpoint);
    m.input(a.data.describe());
    m.set("split", a.split.to_string());
    m.set("composite", a.composite);
    m.time("load", t0.elapsed().as_secs_f64());

    let t1 = Instant::now();
    let mut per_image: Vec<ImageMetrics> = Vec::with_capacity(indices.len());
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    let mut written = 0usize;
    run_inference(&model, &dataset, &indices, &mask, a.batch_size.unwrap_or(cfg.batch_size), |p| {
        let target = p.target.reshape(&[1, s, s, 3])?;
        let mut recon = p.reconstruction.reshape(&[1, s, s, 3])?;
        if a.composite {
            recon = composite(&recon, &target, &batch_mask)?;
        }
        per_image.extend(image_metrics(&recon, &target)?);
        probs.extend(p.probs.iter().map(|&v| v as f64));
        labels.push(p.label);
        if written < a.grids {
            let panel = hstack(&[p.masked, &recon.reshape(&[s, s, 3])?, p.target])?;
            let name = format!("{written:03}_{}.png", dataset.class_names[p.label]);
            let path = grid_dir.join(name);
            write_png(&path, &panel)?;
            m.output(&path);
            written += 1;
        }
        Ok(())
    })?;
    let total_s = t1.elapsed().as_secs_f64();
    let cls = classification_report(&probs, &labels, dataset.num_classes())?;
    let report = EvalReport::assemble(
        a.split.to_string(),
        dataset.class_names.clone(),
        a.composite,
        cfg.loss.hole_weight,
        cfg.loss.valid_weight,
        per_image,
        cls,
        total_s,
    );
    if let Some(parent) = report_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    std::fs::write(&report_path, report.to_toml()?).with_context(|| format!("writing {}", report_path.display()))?;

    println!(
        "{} split: n={} accuracy={:.4} f1_w={:.4} psnr_mean={:.3} ssim_mean={:.4} s_per_img={:.5}",
        report.split, report.n_images, report.accuracy, report.f1_w, report.psnr_mean, report.ssim_mean, report.s_per_img
    );
    println!("report {}", report_path.display());
    m.output(&report_path);
    m.time("inference", total_s);
    m.time("total", t0.elapsed().as_secs_f64());
    m.write(&manifest_beside(&report_path))
}
