use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smarc_core::tensor::gradcheck::finite_diff_check;
use smarc_core::tensor::ops::{self, PoolKind};
use smarc_core::tensor::{Graph, Padding, Real, Tensor};

fn random<T: Real>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-1.0..1.0)))
}

/// Direct six-nested-loop cross-correlation with "same" zero padding at
/// stride 1, written independently of the im2col path.
fn naive_conv_same(x: &Tensor<f64>, w: &Tensor<f64>, bias: &[f64], dilation: usize) -> Tensor<f64> {
    let (b, h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw, cout) = (w.shape()[0], w.shape()[1], w.shape()[3]);
    let ph = (dilation * (kh - 1) / 2) as isize;
    let pw = (dilation * (kw - 1) / 2) as isize;
    let mut out = vec![0.0; b * h * wd * cout];
    for n in 0..b {
        for oy in 0..h {
            for ox in 0..wd {
                for co in 0..cout {
                    let mut acc = bias[co];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = oy as isize + (ky * dilation) as isize - ph;
                            let ix = ox as isize + (kx * dilation) as isize - pw;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x.at(&[n, iy as usize, ix as usize, ci]) * w.at(&[ky, kx, ci, co]);
                            }
                        }
                    }
                    out[((n * h + oy) * wd + ox) * cout + co] = acc;
                }
            }
        }
    }
    Tensor::new(&[b, h, wd, cout], out).unwrap()
}

fn dot<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data().iter().zip(b.data()).map(|(&x, &y)| x.to_f64() * y.to_f64()).sum()
}

#[test]
fn box_filter_counts() {
    let x = Tensor::<f32>::ones(&[1, 3, 3, 1]);
    let w = Tensor::<f32>::ones(&[3, 3, 1, 1]);
    let b = Tensor::<f32>::zeros(&[1]);
    let y = ops::conv2d(&x, &w, Some(&b), 1, 1, Padding::Same).unwrap();
    assert_eq!(y.at(&[0, 1, 1, 0]), 9.0);
    for (r, c) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
        assert_eq!(y.at(&[0, r, c, 0]), 4.0);
    }
}

#[test]
fn zero_kernel_gives_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random::<f32>(&[2, 5, 4, 3], &mut rng);
    let w = Tensor::<f32>::zeros(&[3, 3, 3, 2]);
    let b = Tensor::new(&[2], vec![0.7f32, -1.25]).unwrap();
    let y = ops::conv2d(&x, &w, Some(&b), 1, 1, Padding::Same).unwrap();
    for px in y.data().chunks(2) {
        assert_eq!(px, &[0.7, -1.25]);
    }
}

#[test]
fn dilated_conv_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for dilation in [1, 2, 4] {
        let x = random::<f64>(&[1, 5, 5, 2], &mut rng);
        let w = random::<f64>(&[3, 3, 2, 3], &mut rng);
        let bias = vec![0.1, -0.2, 0.3];
        let b = Tensor::new(&[3], bias.clone()).unwrap();
        let fast = ops::conv2d(&x, &w, Some(&b), 1, dilation, Padding::Same).unwrap();
        let slow = naive_conv_same(&x, &w, &bias, dilation);
        for (a, e) in fast.data().iter().zip(slow.data()) {
            assert!((a - e).abs() <= 1e-5 * e.abs().max(1.0), "dilation {dilation}: {a} vs {e}");
        }
        // f32 path agrees with the f64 oracle too
        let fast32 = ops::conv2d(&x.cast::<f32>(), &w.cast::<f32>(), Some(&b.cast::<f32>()), 1, dilation, Padding::Same).unwrap();
        for (a, e) in fast32.data().iter().zip(slow.data()) {
            assert!((*a as f64 - e).abs() <= 1e-5 * e.abs().max(1.0));
        }
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let x = Tensor::<f32>::zeros(&[1, 4, 4, 2]);
    let w = Tensor::<f32>::zeros(&[3, 3, 3, 1]);
    assert!(ops::conv2d(&x, &w, None, 1, 1, Padding::Same).is_err());
}

#[test]
fn transposed_conv_small_cases() {
    let x = Tensor::<f32>::new(&[1, 1, 1, 1], vec![2.5]).unwrap();
    let w = Tensor::<f32>::ones(&[2, 2, 1, 1]);
    let y = ops::conv_transpose2d(&x, &w, None).unwrap();
    assert_eq!(y.shape(), &[1, 2, 2, 1]);
    assert!(y.data().iter().all(|&v| v == 2.5));

    let x = Tensor::<f32>::new(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let w = Tensor::<f32>::ones(&[1, 1, 1, 1]);
    let y = ops::conv_transpose2d(&x, &w, None).unwrap();
    assert_eq!(y.shape(), &[1, 4, 4, 1]);
    for r in 0..4 {
        for c in 0..4 {
            let v = y.at(&[0, r, c, 0]);
            if r % 2 == 0 && c % 2 == 0 {
                assert_eq!(v, x.at(&[0, r / 2, c / 2, 0]));
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }
}

#[test]
fn transposed_conv_is_adjoint_of_strided_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // The same kh×kw×A×B buffer is a conv2d kernel A→B and a transposed kernel B→A.
    let w = random::<f64>(&[3, 3, 4, 3], &mut rng);
    let x_small = random::<f64>(&[2, 3, 4, 3], &mut rng);
    let y_big = random::<f64>(&[2, 6, 8, 4], &mut rng);
    let up = ops::conv_transpose2d(&x_small, &w, None).unwrap();
    let down = ops::conv2d(&y_big, &w, None, 2, 1, Padding::Same).unwrap();
    let lhs = dot(&up, &y_big);
    let rhs = dot(&x_small, &down);
    assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");

    let up32 = ops::conv_transpose2d(&x_small.cast::<f32>(), &w.cast::<f32>(), None).unwrap();
    let down32 = ops::conv2d(&y_big.cast::<f32>(), &w.cast::<f32>(), None, 2, 1, Padding::Same).unwrap();
    let (l32, r32) = (dot(&up32, &y_big.cast()), dot(&x_small.cast(), &down32));
    assert!((l32 - r32).abs() <= 1e-4 * l32.abs().max(1.0));
}

#[test]
fn conv_and_dense_are_self_adjoint_through_backward() {
    // ⟨L x, y⟩ = ⟨x, Lᵀ y⟩ where Lᵀ y comes from the reverse sweep.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random::<f64>(&[2, 6, 5, 3], &mut rng);
    let w = random::<f64>(&[3, 3, 3, 4], &mut rng);
    let y = random::<f64>(&[2, 6, 5, 4], &mut rng);
    let mut g = Graph::<f64>::new();
    let xv = g.input(x.clone());
    let wv = g.constant(w);
    let out = g.conv2d(xv, wv, None, 1, 2, Padding::Same).unwrap();
    let yv = g.constant(y.clone());
    let prod = g.mul(out, yv).unwrap();
    let s = g.sum(prod).unwrap();
    let lhs = g.value(s).data()[0];
    let grads = g.backward(s).unwrap();
    let rhs = dot(&x, &grads.wrt(xv));
    assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
}

#[test]
fn pooling_examples() {
    let x = Tensor::<f32>::new(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(ops::pool2d(&x, PoolKind::Avg).unwrap().data(), &[2.5]);
    assert_eq!(ops::pool2d(&x, PoolKind::Max).unwrap().data(), &[4.0]);
    let m = Tensor::<f32>::new(&[1, 2, 2, 1], vec![0.0, 0.0, 0.0, 1.0]).unwrap();
    assert_eq!(ops::pool2d(&m, PoolKind::Max).unwrap().data(), &[1.0]);
    let odd = Tensor::<f32>::zeros(&[1, 3, 4, 1]);
    assert!(ops::pool2d(&odd, PoolKind::Avg).is_err());
    assert!(ops::pool2d(&odd, PoolKind::Max).is_err());
}

#[test]
fn max_pool_routes_gradient_to_first_argmax() {
    let x = Tensor::<f64>::new(&[1, 2, 2, 1], vec![3.0, 3.0, 1.0, 3.0]).unwrap();
    let mut g = Graph::new();
    let xv = g.input(x);
    let p = g.max_pool2(xv).unwrap();
    let s = g.sum(p).unwrap();
    assert_eq!(g.backward(s).unwrap().wrt(xv).data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn small_reductions() {
    let x = Tensor::<f32>::full(&[1, 14, 14, 2], 3.5);
    assert!(ops::global_avg_pool(&x).unwrap().data().iter().all(|&v| (v - 3.5).abs() < 1e-6));
    let p = ops::softmax(&Tensor::<f32>::zeros(&[1, 4])).unwrap();
    assert_eq!(p.data(), &[0.25; 4]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits = random::<f32>(&[5, 7], &mut rng).map(|v| v * 20.0);
    let p = ops::softmax(&logits).unwrap();
    for row in p.data().chunks(7) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
    let s = ops::sigmoid(&logits);
    assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0 || (v - 1.0).abs() < 1e-6));
}

#[test]
fn dense_known_value() {
    let x = Tensor::<f32>::new(&[1, 2], vec![1.0, 2.0]).unwrap();
    let w = Tensor::<f32>::new(&[2, 3], vec![1.0, 0.0, -1.0, 0.5, 2.0, 1.0]).unwrap();
    let b = Tensor::<f32>::new(&[3], vec![0.0, 1.0, 0.0]).unwrap();
    assert_eq!(ops::dense(&x, &w, Some(&b)).unwrap().data(), &[2.0, 5.0, 1.0]);
}

// --- finite-difference gradient checks ---------------------------------

const TOL32: f64 = 1e-3;
const TOL64: f64 = 1e-5;

/// Weighted sum so every output coordinate carries a distinct cotangent.
fn weigh<T: Real>(g: &mut Graph<T>, v: smarc_core::Var, seed: u64) -> smarc_core::Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random(g.shape(v), &mut rng));
    let p = g.mul(v, w).unwrap();
    g.sum(p).unwrap()
}

#[test]
fn gradcheck_conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let inputs = vec![
        random::<f32>(&[1, 6, 6, 2], &mut rng),
        random::<f32>(&[3, 3, 2, 3], &mut rng),
        random::<f32>(&[3], &mut rng),
    ];
    let op = |g: &mut Graph<f32>, v: &[smarc_core::Var]| {
        g.conv2d(v[0], v[1], Some(v[2]), 1, 1, Padding::Same)
    };
    let r = finite_diff_check(op, &inputs, 1e-3).unwrap();
    assert!(r.max_rel_error < TOL32, "{r:?}");

    let inputs64: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast()).collect();
    for (stride, dilation) in [(1, 2), (2, 1)] {
        let op = move |g: &mut Graph<f64>, v: &[smarc_core::Var]| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, dilation, Padding::Same)?;
            Ok(weigh(g, y, 2))
        };
        let r = finite_diff_check(op, &inputs64, 1e-6).unwrap();
        assert!(r.max_rel_error < TOL64, "stride {stride} dilation {dilation}: {r:?}");
    }
}

#[test]
fn gradcheck_conv_transpose2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let inputs = vec![
        random::<f32>(&[2, 3, 3, 2], &mut rng),
        random::<f32>(&[3, 3, 4, 2], &mut rng),
        random::<f32>(&[4], &mut rng),
    ];
    let op = |g: &mut Graph<f32>, v: &[smarc_core::Var]| g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, (6, 6));
    let r = finite_diff_check(op, &inputs, 1e-3).unwrap();
    assert!(r.max_rel_error < TOL32, "{r:?}");
    let inputs64: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast()).collect();
    let op = |g: &mut Graph<f64>, v: &[smarc_core::Var]| {
        let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, (6, 6))?;
        Ok(weigh(g, y, 3))
    };
    assert!(finite_diff_check(op, &inputs64, 1e-6).unwrap().max_rel_error < TOL64);
}

#[test]
fn conv_transpose_rejects_unreachable_target() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::zeros(&[1, 3, 3, 2]));
    let w = g.input(Tensor::zeros(&[3, 3, 4, 2]));
    assert!(g.conv_transpose2d(x, w, None, 2, (7, 6)).is_err());
}

#[test]
fn gradcheck_pools_dense_gap_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = random::<f32>(&[2, 4, 6, 3], &mut rng);
    let r = finite_diff_check(|g, v| { let y = g.avg_pool2(v[0])?; Ok(weigh(g, y, 4)) }, &[x.clone()], 1e-3).unwrap();
    assert!(r.max_rel_error < TOL32, "avg pool {r:?}");
    let r = finite_diff_check(|g, v| { let y = g.global_avg_pool(v[0])?; Ok(weigh(g, y, 5)) }, &[x.clone()], 1e-3).unwrap();
    assert!(r.max_rel_error < TOL32, "gap {r:?}");
    // distinct values keep max-pool away from ties
    let xm = Tensor::<f64>::from_fn(&[1, 4, 4, 2], |i| ((i * 37) % 32) as f64 * 0.1);
    let r = finite_diff_check(|g, v| { let y = g.max_pool2(v[0])?; Ok(weigh(g, y, 6)) }, &[xm], 1e-6).unwrap();
    assert!(r.max_rel_error < TOL64, "max pool {r:?}");

    let dense_in = vec![
        random::<f32>(&[2, 3], &mut rng),
        random::<f32>(&[3, 4], &mut rng),
        random::<f32>(&[4], &mut rng),
    ];
    let r = finite_diff_check(|g, v| { let y = g.dense(v[0], v[1], Some(v[2]))?; Ok(weigh(g, y, 7)) }, &dense_in, 1e-3).unwrap();
    assert!(r.max_rel_error < TOL32, "dense {r:?}");

    let logits = random::<f64>(&[3, 5], &mut rng);
    let r = finite_diff_check(|g, v| { let y = g.softmax(v[0])?; Ok(weigh(g, y, 8)) }, &[logits.clone()], 1e-6).unwrap();
    assert!(r.max_rel_error < TOL64, "softmax {r:?}");
    let r = finite_diff_check(|g, v| { let y = g.sigmoid(v[0])?; Ok(weigh(g, y, 9)) }, &[logits], 1e-6).unwrap();
    assert!(r.max_rel_error < TOL64, "sigmoid {r:?}");
}

#[test]
fn gradcheck_relu_away_from_kink() {
    let eps = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let x = Tensor::<f32>::from_fn(&[40], |_| {
        let v: f64 = rng.random_range(10.0 * eps..2.0);
        (if rng.random::<bool>() { v } else { -v }) as f32
    });
    let r = finite_diff_check(|g, v| { let y = g.relu(v[0])?; Ok(weigh(g, y, 10)) }, &[x], eps).unwrap();
    assert!(r.max_rel_error < TOL32, "{r:?}");
}

#[test]
fn gradcheck_concat_scale_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let a = random::<f64>(&[1, 3, 3, 2], &mut rng);
    let b = random::<f64>(&[1, 3, 3, 3], &mut rng);
    let s = random::<f64>(&[1, 5], &mut rng);
    let mask = Tensor::<f64>::from_fn(&[1, 3, 3, 1], |i| (i % 2) as f64);
    let op = |g: &mut Graph<f64>, v: &[smarc_core::Var]| {
        let c = g.concat(v[0], v[1])?;
        let m = g.mask_mul(c, &mask)?;
        let y = g.channel_scale(m, v[2])?;
        Ok(weigh(g, y, 11))
    };
    let r = finite_diff_check(op, &[a, b, s], 1e-6).unwrap();
    assert!(r.max_rel_error < TOL64, "{r:?}");
}

#[test]
fn deterministic_repeat() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let x = random::<f32>(&[3, 8, 8, 4], &mut rng);
    let w = random::<f32>(&[3, 3, 4, 5], &mut rng);
    let a = ops::conv2d(&x, &w, None, 1, 2, Padding::Same).unwrap();
    let b = ops::conv2d(&x, &w, None, 1, 2, Padding::Same).unwrap();
    assert_eq!(a.data(), b.data());
}
