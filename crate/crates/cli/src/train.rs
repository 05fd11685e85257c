use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Args;
use smarc_core::data::io::write_manifest;
use smarc_core::data::split;
use smarc_core::model::SmarcModel;
use smarc_core::train::{save_checkpoint, score_split, Trainer, CHECKPOINT_FILE, LOG_FILE};
use smarc_core::SmarcError;

use crate::common::{create_dir, parse_override, resolve_config, DataArgs};
use crate::manifest::{manifest_in, RunManifest};

pub const SPLIT_FILE: &str = "split_manifest.tsv";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Flat `key = value` TOML file; keys mirror the training, architecture,
    /// loss and split settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for the checkpoint, log, split and manifests.
    #[arg(long)]
    pub out: PathBuf,
    /// Start from the 64×64, base-16 architecture instead of the full one.
    #[arg(long)]
    pub desk_arch: bool,
    /// Override one setting, e.g. `--set phase_b_max_epochs=60`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    pub overrides: Vec<(String, toml::Value)>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    pub quiet: bool,
}

pub fn run(a: TrainArgs) -> Result<()> {
    let t0 = Instant::now();
    let mut overrides = a.overrides.clone();
    if let Some(s) = a.seed {
        overrides.push(("seed".into(), toml::Value::Integer(s as i64)));
    }
    let mut problems = a.data.problems();
    let cfg = match resolve_config(a.desk_arch, a.config.as_deref(), &overrides) {
        Ok(c) => {
            problems.extend(c.validation_errors());
            c
        }
        Err(e) => match e.downcast::<SmarcError>() {
            Ok(SmarcError::Config(v)) => {
                problems.extend(v);
                bail!(SmarcError::Config(problems));
            }
            Ok(other) => return Err(other.into()),
            Err(e) => return Err(e),
        },
    };
    if !problems.is_empty() {
        bail!(SmarcError::Config(problems));
    }

    create_dir(&a.out)?;
    let mut m = RunManifest::new("train");
    m.seed = Some(cfg.seed);
    m.input(a.data.describe());
    m.config = cfg.to_flat_table();
    let config_path = a.out.join(CONFIG_FILE);
    std::fs::write(&config_path, cfg.to_flat_toml()).with_context(|| format!("writing {}", config_path.display()))?;

    let dataset = a.data.load(cfg.arch.input_size, cfg.seed)?;
    let sp = split(&dataset.labels(), dataset.num_classes(), &cfg.split)?;
    let split_path = a.out.join(SPLIT_FILE);
    write_manifest(&split_path, &dataset, &sp)?;
    eprintln!(
        "{} images, {} classes; split {}/{}/{}",
        dataset.len(),
        dataset.num_classes(),
        sp.train.len(),
        sp.val.len(),
        sp.test.len()
    );
    m.time("prepare", t0.elapsed().as_secs_f64());

    let t1 = Instant::now();
    let mut model = SmarcModel::<f32>::build(cfg.arch.clone(), cfg.seed)?;
    let quiet = a.quiet;
    let mut trainer = Trainer::new(cfg.clone(), &dataset, &sp)?
        .with_output(&a.out)
        .on_epoch(move |r, _| {
            if !quiet {
                eprintln!("{}\t({:.1}s)", r.tsv_line(), r.seconds);
            }
        });
    let out = trainer.run(&mut model)?;
    let mask = trainer.mask().clone();
    drop(trainer);
    m.time("train", t1.elapsed().as_secs_f64());

    let ckpt = a.out.join(CHECKPOINT_FILE);
    if !ckpt.exists() {
        // No fine-tuning epochs ran, so no best epoch was saved.
        save_checkpoint(&ckpt, &model, Some(&cfg), Some(&out.state))?;
    }
    let val = score_split(&model, &dataset, &sp.val, &mask, cfg.batch_size)?;
    println!(
        "epochs {}  best_epoch {}  stopped_early {}  val_acc {:.4}  val_psnr {:.3}",
        out.state.epoch,
        out.state.best_epoch().map_or("-".into(), |e| e.to_string()),
        out.stopped_early,
        val.accuracy,
        val.psnr_mean
    );
    println!("checkpoint {}", ckpt.display());

    for p in [&ckpt, &split_path, &config_path, &a.out.join(LOG_FILE)] {
        m.output(p);
    }
    m.time("total", t0.elapsed().as_secs_f64());
    m.write(&manifest_in(&a.out))
}
