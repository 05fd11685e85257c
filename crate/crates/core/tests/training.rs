use std::sync::Arc;

use smarc_core::data::{split, synth_textures, Split, SplitSpec};
use smarc_core::model::{ArchConfig, SmarcModel, HEAD_PREFIX};
use smarc_core::params::{ParamId, ParamStore};
use smarc_core::pconv::MaskPair;
use smarc_core::train::{
    encode_checkpoint, load_checkpoint, load_weights_into, save_checkpoint, score_split, Adam, EarlyStopper,
    PlateauScheduler, Phase, TrainConfig, TrainState, Trainer, CHECKPOINT_FILE, LOG_FILE,
};
use smarc_core::{SmarcError, Tensor};

fn scalar_store(v: f32) -> ParamStore<f32> {
    let mut s = ParamStore::new();
    s.add("w", Tensor::new(&[1], vec![v]).unwrap(), true).unwrap();
    s
}

// ---- Adam ----

#[test]
fn zero_gradient_leaves_parameter_unchanged() {
    let mut p = scalar_store(0.7);
    let mut adam = Adam::new(&p, 0.9, 0.999, 1e-8);
    adam.step(&mut p, &[Some(vec![0.0])], None, 1e-3).unwrap();
    assert_eq!(p.get(ParamId(0)).tensor.data(), &[0.7]);
}

#[test]
fn constant_gradient_update_tends_to_lr() {
    // Oracle: scalar Adam recursion in f64, written out independently.
    let (lr, g, b1, b2, eps) = (1e-3f64, 0.3f64, 0.9f64, 0.999f64, 1e-8f64);
    let (mut m, mut v, mut w) = (0.0, 0.0, 1.0f64);
    let mut last = 0.0;
    for t in 1..=1000 {
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let step = lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        w -= step;
        last = step;
    }
    assert!((last - lr).abs() / lr < 0.01, "oracle update {last}");

    let mut p = scalar_store(1.0);
    let mut adam = Adam::new(&p, b1, b2, eps);
    let mut prev = 1.0f32;
    let mut update = 0.0;
    for _ in 0..1000 {
        adam.step(&mut p, &[Some(vec![g as f32])], None, lr).unwrap();
        let now = p.get(ParamId(0)).tensor.data()[0];
        update = (prev - now) as f64;
        prev = now;
    }
    assert!((update - lr).abs() / lr < 0.01, "unit-step property: {update}");
    assert!((prev as f64 - w).abs() < 1e-4, "trajectory {prev} vs oracle {w}");
    assert_eq!(adam.t, 1000);
}

#[test]
fn zero_learning_rate_changes_no_parameter() {
    let mut p = scalar_store(0.25);
    p.add("b", Tensor::new(&[3], vec![1.0, -2.0, 3.0]).unwrap(), false).unwrap();
    let before: Vec<Vec<f32>> = p.iter().map(|(_, q)| q.tensor.data().to_vec()).collect();
    let mut adam = Adam::new(&p, 0.9, 0.999, 1e-8);
    adam.step(&mut p, &[Some(vec![5.0]), Some(vec![1.0, 2.0, -3.0])], None, 0.0).unwrap();
    let after: Vec<Vec<f32>> = p.iter().map(|(_, q)| q.tensor.data().to_vec()).collect();
    assert_eq!(before, after);
}

#[test]
fn non_finite_gradient_aborts_without_side_effects() {
    let mut p = scalar_store(0.5);
    p.add("b", Tensor::zeros(&[2]), false).unwrap();
    let mut adam = Adam::new(&p, 0.9, 0.999, 1e-8);
    let err = adam
        .step(&mut p, &[Some(vec![1.0]), Some(vec![0.0, f32::NAN])], None, 1e-3)
        .unwrap_err();
    assert!(err.to_string().contains("b"), "{err}");
    assert_eq!(p.get(ParamId(0)).tensor.data(), &[0.5]);
    assert_eq!(adam.t, 0);
}

#[test]
fn frozen_parameters_are_skipped() {
    let mut p = scalar_store(0.5);
    p.add("h", Tensor::new(&[1], vec![0.5]).unwrap(), true).unwrap();
    let mut adam = Adam::new(&p, 0.9, 0.999, 1e-8);
    adam.step(&mut p, &[Some(vec![1.0]), Some(vec![1.0])], Some(&[true, false]), 1e-2).unwrap();
    assert_eq!(p.get(ParamId(0)).tensor.data(), &[0.5]);
    assert_ne!(p.get(ParamId(1)).tensor.data(), &[0.5]);
    assert_eq!(adam.m[0], vec![0.0]);
}

// ---- schedulers ----

#[test]
fn plateau_halves_after_eight_stagnant_epochs() {
    let mut s = PlateauScheduler::new(8, 0.5, 1e-6, 1e-6);
    let mut lr = 1e-4;
    lr = s.step(0.5, 1, lr);
    for e in 2..=8 {
        lr = s.step(0.5, e, lr);
        assert_eq!(lr, 1e-4, "epoch {e}");
    }
    lr = s.step(0.5, 9, lr);
    assert_eq!(lr, 5e-5);
    assert_eq!(s.monitor.wait, 0);
}

#[test]
fn plateau_floors_at_min_lr() {
    let mut s = PlateauScheduler::new(1, 0.5, 1e-6, 1e-6);
    let mut lr = 1e-4;
    s.step(0.5, 0, lr);
    for e in 1..40 {
        lr = s.step(0.5, e, lr);
        assert!(lr >= 1e-6);
    }
    assert_eq!(lr, 1e-6);
}

#[test]
fn improvement_resets_plateau_counter() {
    let mut s = PlateauScheduler::new(8, 0.5, 1e-6, 1e-6);
    let mut lr = s.step(0.5, 1, 1e-4);
    for e in 2..=8 {
        lr = s.step(0.5, e, lr);
    }
    assert_eq!(s.monitor.wait, 7);
    lr = s.step(0.6, 9, lr);
    assert_eq!((lr, s.monitor.wait), (1e-4, 0));
    // A gain at or under min_delta is not an improvement.
    s.step(0.6 + 5e-7, 10, lr);
    assert_eq!(s.monitor.wait, 1);
}

#[test]
fn increasing_metric_never_stops() {
    let mut s = EarlyStopper::new(18, 1e-6);
    for e in 1..=150 {
        let d = s.step(e as f64 * 1e-3, e);
        assert!(d.improved && !d.stop);
    }
}

#[test]
fn constant_metric_stops_at_best_plus_patience() {
    let mut s = EarlyStopper::new(18, 1e-6);
    let mut stopped = None;
    for e in 1..=100 {
        if s.step(0.25, e).stop {
            stopped = Some(e);
            break;
        }
    }
    assert_eq!(stopped, Some(1 + 18));
    assert_eq!(s.monitor.best_epoch, Some(1));
}

#[test]
fn scripted_sequence_fires_at_exact_epochs() {
    // Rises for three epochs, a sub-threshold wiggle, then flat.
    let metric = |e: usize| match e {
        1 => 0.40,
        2 => 0.55,
        3 => 0.70,
        5 => 0.70 + 1e-7,
        _ => 0.70,
    };
    let mut plateau = PlateauScheduler::new(8, 0.5, 1e-6, 1e-6);
    let mut stop = EarlyStopper::new(18, 1e-6);
    let mut lr = 1e-4;
    let mut halvings = Vec::new();
    let mut stopped_at = None;
    for e in 1..=150 {
        let new_lr = plateau.step(metric(e), e, lr);
        if new_lr < lr {
            halvings.push(e);
        }
        lr = new_lr;
        if stop.step(metric(e), e).stop {
            stopped_at = Some(e);
            break;
        }
    }
    assert_eq!(halvings, vec![11, 19]);
    assert_eq!(stopped_at, Some(21));
    assert_eq!(lr, 2.5e-5);
}

// ---- checkpoints ----

fn tiny_arch() -> ArchConfig {
    ArchConfig::scaled(32, 4)
}

fn tiny_state(model: &SmarcModel<f32>) -> TrainState {
    let cfg = TrainConfig::default();
    let mut st = TrainState::new(&cfg, &model.params);
    for (i, m) in st.adam.m.iter_mut().enumerate() {
        for (k, v) in m.iter_mut().enumerate() {
            *v = (i as f32 + 1.0) * 1e-3 + k as f32 * 1e-7;
        }
    }
    for v in st.adam.v.iter_mut() {
        v.iter_mut().for_each(|x| *x = 1.5e-6);
    }
    st.adam.t = 17;
    st.epoch = 3;
    st.phase = Phase::B;
    st.lr = 5e-5;
    st.stopper.step(0.5, 2);
    st
}

fn probe_input(size: usize) -> MaskPair<f32> {
    let features = Tensor::from_fn(&[2, size, size, 3], |i| ((i * 37) % 101) as f32 / 101.0);
    let mask = Tensor::from_fn(&[2, size, size, 1], |i| ((i / 3) % 2) as f32);
    MaskPair::new(features, mask).unwrap()
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = SmarcModel::<f32>::build(tiny_arch(), 5).unwrap();
    let st = tiny_state(&model);
    let cfg = TrainConfig {
        arch: tiny_arch(),
        ..TrainConfig::default()
    };
    save_checkpoint(&path, &model, Some(&cfg), Some(&st)).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    for ((_, a), (_, b)) in model.params.iter().zip(ck.model.params.iter()) {
        assert_eq!(a.name, b.name);
        assert!(a.tensor.data().iter().zip(b.tensor.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(ck.train.as_ref(), Some(&cfg));
    let back = ck.state.unwrap();
    assert_eq!(back, st);

    let x = probe_input(32);
    let (o1, o2) = (model.forward(&x, None).unwrap(), ck.model.forward(&x, None).unwrap());
    assert!(o1.reconstruction.data().iter().zip(o2.reconstruction.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(o1.class_logits.data().iter().zip(o2.class_logits.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

    // Re-encoding the loaded checkpoint reproduces the file byte for byte.
    assert_eq!(encode_checkpoint(&ck.model, ck.train.as_ref(), Some(&back)), std::fs::read(&path).unwrap());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = SmarcModel::<f32>::build(tiny_arch(), 5).unwrap();
    save_checkpoint(&path, &model, None, None).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let truncated = dir.path().join("t.ckpt");
    std::fs::write(&truncated, &bytes[..bytes.len() - 100]).unwrap();
    let err = load_checkpoint(&truncated).unwrap_err().to_string();
    assert!(err.contains("checksum"), "{err}");

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x10;
    std::fs::write(&truncated, &flipped).unwrap();
    assert!(load_checkpoint(&truncated).unwrap_err().to_string().contains("checksum"));

    let mut magic = bytes.clone();
    magic[0] = b'X';
    std::fs::write(&truncated, &magic).unwrap();
    assert!(load_checkpoint(&truncated).unwrap_err().to_string().contains("magic"));

    std::fs::write(&truncated, b"SMRC1").unwrap();
    assert!(matches!(load_checkpoint(&truncated), Err(SmarcError::Checkpoint { .. })));
}

#[test]
fn loading_into_other_architecture_names_first_bad_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = SmarcModel::<f32>::build(tiny_arch(), 5).unwrap();
    save_checkpoint(&path, &model, None, None).unwrap();
    let mut other = SmarcModel::<f32>::build(ArchConfig::scaled(32, 8), 5).unwrap();
    let first = other.params.iter().next().unwrap().1.name.clone();
    let err = load_weights_into(&mut other, &path).unwrap_err().to_string();
    assert!(err.contains("shape mismatch") && err.contains(&format!("parameter {first}:")), "{err}");

    let mut same = SmarcModel::<f32>::build(tiny_arch(), 99).unwrap();
    load_weights_into(&mut same, &path).unwrap();
    let x = probe_input(32);
    assert_eq!(same.forward(&x, None).unwrap(), model.forward(&x, None).unwrap());
}

// ---- trainer ----

#[test]
fn frozen_set_covers_everything_but_the_head() {
    let model = SmarcModel::<f32>::build(ArchConfig::desk(), 1).unwrap();
    let frozen = model.trunk_frozen_set();
    let frozen_elems: usize = model
        .params
        .iter()
        .filter(|(id, _)| frozen[id.0])
        .map(|(_, p)| p.tensor.numel())
        .sum();
    // Head: 704 → 128 → 4 dense layers with biases.
    let (f, h, k) = (44 * 16, 8 * 16, 4);
    let head = f * h + h + h * k + k;
    assert_eq!(frozen_elems, model.param_count() - head);
    assert!(model.params.iter().all(|(id, p)| frozen[id.0] != p.name.starts_with(HEAD_PREFIX)));
}

fn all_in_train(n: usize) -> Split {
    Split {
        train: (0..n).collect(),
        val: (0..n).collect(),
        test: Vec::new(),
    }
}

#[test]
fn phase_a_leaves_trunk_bitwise_unchanged() {
    let ds = synth_textures(2, 32, 3).unwrap();
    let sp = all_in_train(ds.len());
    let cfg = TrainConfig {
        arch: tiny_arch(),
        phase_a_epochs: 2,
        phase_b_max_epochs: 0,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let mut model = SmarcModel::<f32>::build(cfg.arch.clone(), cfg.seed).unwrap();
    let init = model.params.clone();
    let out = Trainer::new(cfg, &ds, &sp).unwrap().run(&mut model).unwrap();
    assert_eq!(out.state.history.len(), 2);
    assert!(out.state.history.iter().all(|r| r.phase == Phase::A));
    let mut head_moved = false;
    for ((_, a), (_, b)) in init.iter().zip(model.params.iter()) {
        let same = a.tensor.data().iter().zip(b.tensor.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        if a.name.starts_with(HEAD_PREFIX) {
            head_moved |= !same;
        } else {
            assert!(same, "{} changed during Phase A", a.name);
        }
    }
    assert!(head_moved);
}

/// Label-smoothed, unweighted CE of the model on `items`, dropout off.
fn eval_ce(model: &SmarcModel<f32>, ds: &smarc_core::data::Dataset, items: &[usize], cfg: &TrainConfig) -> f64 {
    let mask = smarc_core::data::central_mask(cfg.arch.input_size, cfg.visible_fraction).unwrap();
    let batch = smarc_core::data::Batch::from_samples(&ds.samples(items, &mask).unwrap()).unwrap();
    let mut g = smarc_core::Graph::new();
    let fv = model.forward_graph(&mut g, &batch.input, None).unwrap();
    let ce = smarc_core::loss::ce_smoothed(&mut g, fv.logits, &batch.labels, cfg.loss.label_smoothing, &[1.0; 4]).unwrap();
    g.value(ce).data()[0] as f64
}

#[test]
fn phase_a_cross_entropy_falls_for_most_seeds() {
    // Runs are deterministic, so the 2-epoch run passes through the 1-epoch
    // run's weights; compare the training-set CE at both points.
    let ds = synth_textures(2, 64, 42).unwrap();
    let sp = all_in_train(ds.len());
    let mut falls = 0;
    for seed in 0..5u64 {
        let ce_after = |epochs: usize| {
            let cfg = TrainConfig {
                arch: ArchConfig::desk(),
                phase_a_epochs: epochs,
                phase_b_max_epochs: 0,
                seed,
                ..TrainConfig::default()
            };
            let mut model = SmarcModel::<f32>::build(cfg.arch.clone(), seed).unwrap();
            Trainer::new(cfg.clone(), &ds, &sp).unwrap().run(&mut model).unwrap();
            eval_ce(&model, &ds, &sp.train, &cfg)
        };
        falls += (ce_after(2) < ce_after(1)) as usize;
    }
    assert!(falls >= 4, "CE fell in {falls} of 5 seeds");
}

fn small_run_cfg() -> TrainConfig {
    TrainConfig {
        arch: tiny_arch(),
        phase_a_epochs: 1,
        phase_b_max_epochs: 6,
        batch_size: 8,
        plateau_patience: 1,
        early_stop_patience: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn run_writes_log_and_checkpoint_and_restores_best() {
    let ds = synth_textures(5, 32, 8).unwrap();
    let sp = split(&ds.labels(), 4, &SplitSpec::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run_cfg();
    let mut model = SmarcModel::<f32>::build(cfg.arch.clone(), cfg.seed).unwrap();
    let mut seen = Vec::new();
    let out = Trainer::new(cfg.clone(), &ds, &sp)
        .unwrap()
        .with_output(dir.path())
        .on_epoch(|r, _| seen.push(r.epoch))
        .run(&mut model)
        .unwrap();
    let h = &out.state.history;
    assert_eq!(seen, (1..=h.len()).collect::<Vec<_>>());
    assert_eq!(out.state.epoch, h.len());
    assert_eq!(h[0].phase, Phase::A);
    assert!(h.len() <= 1 + 6);

    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 1 + h.len());
    assert!(lines.iter().all(|l| l.split('\t').count() == 8));

    let best = out.state.best_val_acc().unwrap();
    assert!(out.restored_best);
    let mask = Trainer::new(cfg.clone(), &ds, &sp).unwrap().mask().clone();
    let re = score_split(&model, &ds, &sp.val, &mask, cfg.batch_size).unwrap();
    assert!((re.accuracy - best).abs() <= 1e-6, "recomputed {} vs best {best}", re.accuracy);

    let ck = load_checkpoint(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck.state.unwrap().epoch, out.state.best_epoch().unwrap());
    assert_eq!(ck.model.forward(&probe_input(32), None).unwrap(), model.forward(&probe_input(32), None).unwrap());
}

#[test]
fn identical_runs_produce_identical_checkpoints() {
    let ds = synth_textures(3, 32, 4).unwrap();
    let sp = split(&ds.labels(), 4, &SplitSpec::default()).unwrap();
    let cfg = TrainConfig {
        phase_b_max_epochs: 2,
        ..small_run_cfg()
    };
    let run = || {
        let mut model = SmarcModel::<f32>::build(cfg.arch.clone(), cfg.seed).unwrap();
        let out = Trainer::new(cfg.clone(), &ds, &sp).unwrap().run(&mut model).unwrap();
        encode_checkpoint(&model, Some(&cfg), Some(&out.state))
    };
    assert_eq!(run(), run());
}

#[test]
fn trainer_rejects_mismatched_inputs() {
    let ds = synth_textures(2, 32, 1).unwrap();
    let sp = all_in_train(ds.len());
    let bad = TrainConfig {
        arch: ArchConfig::desk(),
        ..TrainConfig::default()
    };
    assert!(Trainer::new(bad, &ds, &sp).is_err());
    let empty_val = Split {
        train: (0..8).collect(),
        ..Split::default()
    };
    assert!(Trainer::new(small_run_cfg(), &ds, &empty_val).is_err());
    let cfg = small_run_cfg();
    let mut wrong = SmarcModel::<f32>::build(ArchConfig::scaled(32, 8), 0).unwrap();
    assert!(Trainer::new(cfg, &ds, &sp).unwrap().run(&mut wrong).is_err());
    let frozen: Arc<Vec<bool>> = wrong.trunk_frozen_set();
    assert_eq!(frozen.len(), wrong.params.len());
}
