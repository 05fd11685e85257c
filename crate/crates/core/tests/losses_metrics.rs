use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smarc_core::loss::{ce_smoothed, masked_mae, total_loss, LossTargets, LossWeights};
use smarc_core::metrics::{
    classification_report, composite, image_metrics, mae, mse, psnr, psnr_from_mse, roc_curve, ssim,
    summarize_confusion, EvalReport,
};
use smarc_core::model::{ArchConfig, SmarcModel};
use smarc_core::pconv::MaskPair;
use smarc_core::tensor::gradcheck::finite_diff_check;
use smarc_core::{Graph, ParamStore, Real, Tensor};

fn mae_value(pred: &Tensor<f64>, target: &Tensor<f64>, mask: &Tensor<f64>, w: &LossWeights) -> f64 {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let v = masked_mae(&mut g, p, target, mask, w).unwrap();
    g.value(v).data()[0]
}

fn ce_value(logits: &[f64], labels: &[usize], eps: f64, cw: &[f64]) -> f64 {
    let k = cw.len();
    let mut g = Graph::new();
    let l = g.constant(Tensor::new(&[labels.len(), k], logits.to_vec()).unwrap());
    let v = ce_smoothed(&mut g, l, labels, eps, cw).unwrap();
    g.value(v).data()[0]
}

#[test]
fn masked_mae_examples() {
    let w = LossWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = Tensor::from_fn(&[2, 4, 4, 3], |_| rng.random_range(0.0..1.0));
    let m = Tensor::from_fn(&[2, 4, 4, 1], |i| (i % 3 == 0) as u8 as f64);
    assert_eq!(mae_value(&t, &t, &m, &w), 0.0);

    let shifted = t.map(|v| v + 0.3);
    assert!((mae_value(&shifted, &t, &Tensor::ones(&[2, 4, 4, 1]), &w) - 0.3).abs() < 1e-12);

    let target = Tensor::new(&[1, 1, 2, 1], vec![0.5, 0.5]).unwrap();
    let pred = Tensor::new(&[1, 1, 2, 1], vec![0.6, 0.3]).unwrap();
    let mask = Tensor::new(&[1, 1, 2, 1], vec![0.0, 1.0]).unwrap();
    let want = (6.0 * 0.1 + 1.0 * 0.2) / 7.0;
    assert!((mae_value(&pred, &target, &mask, &w) - want).abs() < 1e-6);
    assert!((want - 0.114_285_714).abs() < 1e-9);
}

#[test]
fn masked_mae_rejects_shape_mismatch() {
    let mut g = Graph::<f64>::new();
    let p = g.constant(Tensor::zeros(&[1, 2, 2, 3]));
    let w = LossWeights::default();
    assert!(masked_mae(&mut g, p, &Tensor::zeros(&[1, 2, 3, 3]), &Tensor::ones(&[1, 2, 2, 1]), &w).is_err());
    assert!(masked_mae(&mut g, p, &Tensor::zeros(&[1, 2, 2, 3]), &Tensor::ones(&[1, 2, 3, 1]), &w).is_err());
}

#[test]
fn ce_examples() {
    let ones = [1.0; 4];
    for label in 0..4 {
        for eps in [0.0, 0.05, 0.5] {
            assert!((ce_value(&[0.0; 4], &[label], eps, &ones) - 4f64.ln()).abs() < 1e-12);
        }
    }
    assert!(ce_value(&[60.0, 0.0, 0.0, 0.0], &[0], 0.0, &ones) < 1e-20);

    let probs: [f64; 4] = [0.7, 0.1, 0.1, 0.1];
    let logits: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
    let want = -(0.9625 * 0.7f64.ln() + 3.0 * 0.0125 * 0.1f64.ln());
    assert!((want - 0.429_646_6).abs() < 1e-7);
    assert!((ce_value(&logits, &[0], 0.05, &ones) - want).abs() < 1e-6);

    // Class weight scales the per-sample term; the batch mean follows.
    let cw = [2.0, 1.0, 1.0, 1.0];
    let both = ce_value(&[logits.clone(), vec![0.0; 4]].concat(), &[0, 3], 0.05, &cw);
    assert!((both - (2.0 * want + 4f64.ln()) / 2.0).abs() < 1e-12);
}

#[test]
fn ce_rejects_out_of_range_label() {
    let mut g = Graph::<f64>::new();
    let l = g.constant(Tensor::zeros(&[1, 4]));
    assert!(ce_smoothed(&mut g, l, &[4], 0.05, &[1.0; 4]).is_err());
}

#[test]
fn ce_logit_gradient_sums_to_zero_per_sample() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::<f64>::new();
    let l = g.input(Tensor::from_fn(&[5, 4], |_| rng.random_range(-3.0..3.0)));
    let v = ce_smoothed(&mut g, l, &[0, 1, 2, 3, 1], 0.05, &[1.0, 0.5, 2.0, 1.5]).unwrap();
    let grad = g.backward(v).unwrap().wrt(l);
    for row in grad.data().chunks(4) {
        assert!(row.iter().sum::<f64>().abs() < 1e-15);
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = LossWeights::default();
    let target = Tensor::<f64>::from_fn(&[2, 3, 3, 3], |_| rng.random_range(0.0..1.0));
    let mask = Tensor::<f64>::from_fn(&[2, 3, 3, 1], |i| (i % 2) as f64);
    // Keep every |pred − target| well away from the kink at 0.
    let pred = target.map(|t| if t > 0.5 { t - 0.2 } else { t + 0.2 });
    let r = finite_diff_check(|g, v| masked_mae(g, v[0], &target, &mask, &w), &[pred.clone()], 1e-6).unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
    let (t32, m32) = (target.cast::<f32>(), mask.cast::<f32>());
    let r = finite_diff_check(|g, v| masked_mae(g, v[0], &t32, &m32, &w), &[pred.cast::<f32>()], 1e-3).unwrap();
    assert!(r.max_rel_error < 1e-3, "{r:?}");

    let logits = Tensor::<f64>::from_fn(&[3, 4], |_| rng.random_range(-2.0..2.0));
    let cw = [1.0, 0.5, 2.0, 1.5];
    let r = finite_diff_check(|g, v| ce_smoothed(g, v[0], &[0, 3, 2], 0.05, &cw), &[logits.clone()], 1e-6).unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
    let r = finite_diff_check(|g, v| ce_smoothed(g, v[0], &[0, 3, 2], 0.05, &cw), &[logits.cast::<f32>()], 1e-3).unwrap();
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}

#[test]
fn total_loss_composition() {
    // No parameters, perfect reconstruction, uniform logits.
    let w = LossWeights::default();
    let img = Tensor::<f64>::full(&[1, 2, 2, 3], 0.4);
    let mask = Tensor::<f64>::ones(&[1, 2, 2, 1]);
    let mut g = Graph::new();
    let rec = g.constant(img.clone());
    let logits = g.constant(Tensor::zeros(&[1, 4]));
    let targets = LossTargets {
        image: &img,
        mask: &mask,
        labels: &[2],
        class_weights: &[1.0; 4],
    };
    let lv = total_loss(&mut g, rec, logits, &targets, &w, &ParamStore::new(), None).unwrap();
    let v = lv.values(&g);
    assert!((v.total - 4f64.ln()).abs() < 1e-12);
    assert!((v.total - 1.3863).abs() < 1e-4);

    let mut store = ParamStore::<f64>::new();
    store.add("w", Tensor::new(&[1], vec![0.3]).unwrap(), true).unwrap();
    store.add("b", Tensor::new(&[1], vec![5.0]).unwrap(), false).unwrap();
    let mut g = Graph::new();
    let rec = g.constant(img.clone());
    let logits = g.constant(Tensor::zeros(&[1, 4]));
    let lv = total_loss(&mut g, rec, logits, &targets, &w, &store, None).unwrap();
    assert!((lv.values(&g).total - 4f64.ln() - 9e-6).abs() < 1e-15);
    let frozen = [true, false];
    let mut g = Graph::new();
    let rec = g.constant(img.clone());
    let logits = g.constant(Tensor::zeros(&[1, 4]));
    let lv = total_loss(&mut g, rec, logits, &targets, &w, &store, Some(&frozen)).unwrap();
    assert!(lv.l2.is_none());
}

#[test]
fn zero_rgb_weight_leaves_only_l2_on_the_rgb_head() {
    let cfg = ArchConfig::scaled(16, 4);
    let model = SmarcModel::<f64>::build(cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let img = Tensor::from_fn(&[1, 16, 16, 3], |_| rng.random_range(0.0..1.0));
    let mask = Tensor::ones(&[1, 16, 16, 1]);
    let x = MaskPair::new(img.clone(), mask.clone()).unwrap();
    let w = LossWeights {
        lambda_rgb: 0.0,
        ..LossWeights::default()
    };
    let mut g = Graph::new();
    let fv = model.forward_graph(&mut g, &x, None).unwrap();
    let targets = LossTargets {
        image: &img,
        mask: &mask,
        labels: &[1],
        class_weights: &[1.0; 4],
    };
    let lv = total_loss(&mut g, fv.reconstruction, fv.logits, &targets, &w, &model.params, None).unwrap();
    let grads = g.backward(lv.total).unwrap().for_params(model.params.len());
    let id = model.params.id("rgb_head.weight").unwrap();
    let weight = model.params.get(id).tensor.data();
    for (gv, wv) in grads[id.0].as_ref().unwrap().iter().zip(weight) {
        assert!((gv - 2.0 * 1e-4 * wv).abs() < 1e-15);
    }
    let bid = model.params.id("rgb_head.bias").unwrap();
    assert!(grads[bid.0].as_ref().is_none_or(|g| g.iter().all(|&v| v == 0.0)));
}

#[test]
fn psnr_examples() {
    assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
    assert!((psnr_from_mse(0.0223) - 16.517).abs() < 1e-3);
    let x = vec![0.3f32; 12];
    assert_eq!(psnr(&x, &x).unwrap(), 100.0);
    let y: Vec<f32> = x.iter().map(|v| v + 0.1).collect();
    assert!((mse(&x, &y).unwrap() - 0.01).abs() < 1e-8);
    assert!((mae(&x, &y).unwrap() - 0.1).abs() < 1e-7);
}

#[test]
fn per_image_psnr_mean_differs_from_psnr_of_mean_mse() {
    // Two images with MSE 0.01 and 0.0001: mean of PSNRs is 30 dB, PSNR of
    // the mean MSE is about 22.97 dB.
    let target = Tensor::<f64>::full(&[2, 11, 11, 3], 0.5);
    let mut pred = target.clone();
    let per = 11 * 11 * 3;
    for (i, v) in pred.data_mut().iter_mut().enumerate() {
        *v += if i < per { 0.1 } else { 0.01 };
    }
    let m = image_metrics(&pred, &target).unwrap();
    let cls = classification_report(&[1.0, 0.0, 0.0, 1.0], &[0, 1], 2).unwrap();
    let r = EvalReport::assemble("test", vec!["a".into(), "b".into()], false, 6.0, 1.0, m, cls, 1.0);
    assert!((r.psnr_mean - 30.0).abs() < 1e-9);
    assert!((r.psnr_of_mean_mse - psnr_from_mse(0.00505)).abs() < 1e-9);
}

#[test]
fn ssim_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x: Vec<f64> = (0..20 * 24 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    assert!((ssim(&x, &x, 20, 24, 3).unwrap() - 1.0).abs() < 1e-9);

    let c = vec![0.4; 16 * 16];
    assert!((ssim(&c, &c, 16, 16, 1).unwrap() - 1.0).abs() < 1e-12);

    let board: Vec<f64> = (0..16 * 16).map(|i| ((i / 16 + i % 16) % 2) as f64).collect();
    let inv: Vec<f64> = board.iter().map(|v| 1.0 - v).collect();
    assert!(ssim(&board, &inv, 16, 16, 1).unwrap() < 0.0);
}

#[test]
fn classification_examples() {
    // confusion [[2,0],[1,1]]
    let probs = [0.9, 0.1, 0.8, 0.2, 0.6, 0.4, 0.3, 0.7];
    let r = classification_report(&probs, &[0, 0, 1, 1], 2).unwrap();
    assert_eq!(r.confusion, vec![vec![2, 0], vec![1, 1]]);
    assert!((r.summary.accuracy - 0.75).abs() < 1e-12);
    assert!((r.summary.recall_w - 0.75).abs() < 1e-12);

    let labels: Vec<usize> = (0..8).map(|i| i % 4).collect();
    let sep: Vec<f64> = labels
        .iter()
        .flat_map(|&l| (0..4).map(move |c| if c == l { 0.9 } else { 0.1 / 3.0 }))
        .collect();
    let r = classification_report(&sep, &labels, 4).unwrap();
    assert!(r.roc.iter().all(|c| c.auc == 1.0));

    let constant: Vec<f64> = (0..8).flat_map(|_| [0.1, 0.6, 0.2, 0.1]).collect();
    let r = classification_report(&constant, &labels, 4).unwrap();
    assert!((r.summary.accuracy - 0.25).abs() < 1e-12);
    assert!(r.roc.iter().all(|c| (c.auc - 0.5).abs() < 1e-12));
}

#[test]
fn weighted_recall_equals_accuracy_on_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..1000 {
        let k = rng.random_range(2..=6);
        let m: Vec<Vec<u64>> = (0..k).map(|_| (0..k).map(|_| rng.random_range(0..20)).collect()).collect();
        if m.iter().flatten().sum::<u64>() == 0 {
            continue;
        }
        let s = summarize_confusion(&m);
        assert!((s.recall_w - s.accuracy).abs() < 1e-12);
    }
}

#[test]
fn composite_pastes_observed_pixels() {
    let pred = Tensor::<f32>::full(&[1, 2, 2, 3], 0.2);
    let target = Tensor::<f32>::full(&[1, 2, 2, 3], 0.9);
    let mask = Tensor::new(&[1, 2, 2, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let c = composite(&pred, &target, &mask).unwrap();
    assert_eq!(c.at(&[0, 0, 0, 1]), 0.9);
    assert_eq!(c.at(&[0, 0, 1, 1]), 0.2);
}

#[test]
fn report_round_trips_through_toml() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let target = Tensor::<f32>::from_fn(&[3, 12, 12, 3], |_| rng.random_range(0.0..1.0));
    let pred = target.map(|v| (v + 0.05).min(1.0));
    let m = image_metrics(&pred, &target).unwrap();
    let probs: Vec<f64> = (0..9).map(|_| rng.random_range(0.0..1.0)).collect();
    let cls = classification_report(&probs, &[0, 1, 2], 3).unwrap();
    let r = EvalReport::assemble("val", vec!["a".into(), "b".into(), "c".into()], true, 6.0, 1.0, m, cls, 0.3);
    let text = r.to_toml().unwrap();
    for key in ["psnr_mean", "ssim_mean", "mse_mean", "mae_mean", "accuracy", "precision_w", "recall_w", "f1_w"] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{key} = "))), "{key}");
    }
    assert_eq!(EvalReport::from_toml(&text).unwrap(), r);
    assert_eq!(r.recall_w, r.accuracy);
}

fn psnr_of<T: Real>(x: &[T], y: &[T]) -> f64 {
    psnr(x, y).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_mae_is_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::<f64>::from_fn(&[1, 3, 4, 3], |_| rng.random_range(0.0..1.0));
        let b = Tensor::<f64>::from_fn(&[1, 3, 4, 3], |_| rng.random_range(0.0..1.0));
        let m = Tensor::<f64>::from_fn(&[1, 3, 4, 1], |_| rng.random_bool(0.5) as u8 as f64);
        let w = LossWeights::default();
        prop_assert_eq!(mae_value(&a, &b, &m, &w), mae_value(&b, &a, &m, &w));
    }

    #[test]
    fn psnr_decreases_with_mse(a in 1e-9f64..1.0, b in 1e-9f64..1.0) {
        prop_assume!(a < b);
        prop_assert!(psnr_from_mse(a) > psnr_from_mse(b));
    }

    #[test]
    fn ssim_is_bounded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..14 * 13 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..14 * 13 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        let s = ssim(&a, &b, 14, 13, 3).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!(psnr_of(&a, &b) < 100.0);
    }

    #[test]
    fn auc_is_invariant_under_monotone_transforms(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 30;
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..10) as f64) / 10.0).collect();
        let pos: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        prop_assume!(pos.iter().any(|&p| p) && pos.iter().any(|&p| !p));
        let a = roc_curve(&scores, &pos).auc;
        let t: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        let b = roc_curve(&t, &pos).auc;
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }
}
