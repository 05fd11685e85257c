use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::Args;
use smarc_core::data::{central_mask, synth_texture, SYNTH_CLASSES};
use smarc_core::model::{param_throughput, param_throughput_total, ArchConfig, SmarcModel};
use smarc_core::pconv::MaskPair;
use smarc_core::train::load_checkpoint;
use smarc_core::{SmarcError, Tensor};

use crate::manifest::{manifest_beside, RunManifest};

/// Figures published for the full-size model, printed for comparison only.
const REFERENCE_PARAMS_M: f64 = 145.07;
const REFERENCE_S_PER_IMG: f64 = 0.0130;
const REFERENCE_TOTAL_S: f64 = 7.59;

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Benchmark a trained model; otherwise a freshly initialised one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Use the 64×64 desk architecture for the fresh model.
    #[arg(long, conflicts_with = "checkpoint")]
    pub desk_arch: bool,
    /// Timed single-image forward passes.
    #[arg(long, default_value_t = 32)]
    pub images: usize,
    /// Untimed passes before measuring.
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0.10)]
    pub fraction: f64,
    /// Also print the published reference figures.
    #[arg(long)]
    pub show_reference: bool,
    /// Write the figures as TOML here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, serde::Serialize)]
struct BenchReport {
    param_count: usize,
    images: usize,
    warmup: usize,
    input_size: usize,
    s_per_img: f64,
    total_s: f64,
    /// Millions of parameters per second-per-image.
    param_throughput: f64,
    /// Millions of parameters per total second.
    param_throughput_total: f64,
}

pub fn run(a: BenchArgs) -> Result<()> {
    if a.images == 0 {
        return Err(SmarcError::Config(vec!["--images must be at least 1".into()]).into());
    }
    let model = match &a.checkpoint {
        Some(p) => load_checkpoint(p)?.model,
        None => SmarcModel::<f32>::build(if a.desk_arch { ArchConfig::desk() } else { ArchConfig::default() }, 42)?,
    };
    let s = model.cfg.input_size;
    let mask = central_mask::<f32>(s, a.fraction)?.reshape(&[1, s, s, 1])?;
    let inputs = (0..a.images + a.warmup)
        .map(|i| {
            let img = synth_texture(i % SYNTH_CLASSES.len(), s, 42, i).reshape(&[1, s, s, 3])?;
            let masked = smarc_core::data::apply_mask(&img, &mask)?;
            Ok(MaskPair::new(masked, mask.clone())?)
        })
        .collect::<Result<Vec<MaskPair<f32>>>>()?;

    for x in &inputs[..a.warmup] {
        model.forward(x, None)?;
    }
    let mut times = Vec::with_capacity(a.images);
    let t0 = Instant::now();
    for x in &inputs[a.warmup..] {
        let t = Instant::now();
        let out = model.forward(x, None)?;
        times.push(t.elapsed().as_secs_f64());
        std::hint::black_box::<&Tensor<f32>>(&out.reconstruction);
    }
    let total_s = t0.elapsed().as_secs_f64();
    let s_per_img = times.iter().sum::<f64>() / times.len() as f64;
    let n = model.param_count();
    let r = BenchReport {
        param_count: n,
        images: a.images,
        warmup: a.warmup,
        input_size: s,
        s_per_img,
        total_s,
        param_throughput: param_throughput(n, s_per_img),
        param_throughput_total: param_throughput_total(n, total_s),
    };
    println!("param_count={}", r.param_count);
    println!("params_m={:.2}", n as f64 / 1e6);
    println!("images={}", r.images);
    println!("s_per_img={:.6}", r.s_per_img);
    println!("total_s={:.4}", r.total_s);
    println!("param_throughput={:.3}", r.param_throughput);
    println!("param_throughput_total={:.3}", r.param_throughput_total);
    if a.show_reference {
        println!(
            "reference (not measured here): params_m={REFERENCE_PARAMS_M} s_per_img={REFERENCE_S_PER_IMG} total_s={REFERENCE_TOTAL_S} param_throughput={:.2} param_throughput_total={:.2}",
            REFERENCE_PARAMS_M / REFERENCE_S_PER_IMG,
            REFERENCE_PARAMS_M / REFERENCE_TOTAL_S
        );
    }
    if let Some(path) = &a.report {
        std::fs::write(path, toml::to_string(&r)?).with_context(|| format!("writing {}", path.display()))?;
        let mut m = RunManifest::new("bench");
        if let Some(c) = &a.checkpoint {
            m.input(c);
        }
        m.output(path);
        m.set("images", a.images as i64);
        m.set("warmup", a.warmup as i64);
        m.time("total", total_s);
        m.write(&manifest_beside(path))?;
    }
    Ok(())
}
