//! Procedural four-class texture set used for desk-scale runs and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::stream_seed;
use crate::tensor::Tensor;

/// Class names in label order (sorted, like a directory dataset).
pub const SYNTH_CLASSES: [&str; 4] = ["concrete", "grass", "rock", "wood"];

/// Bilinear value noise on a periodic random lattice.
struct ValueNoise {
    n: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(n: usize, rng: &mut impl Rng) -> Self {
        Self {
            n,
            lattice: (0..n * n).map(|_| rng.random::<f64>()).collect(),
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let (fx, fy) = (x.floor(), y.floor());
        let (tx, ty) = (x - fx, y - fy);
        let (sx, sy) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
        let n = self.n as i64;
        let idx = |a: f64, b: f64| {
            let (a, b) = ((a as i64).rem_euclid(n), (b as i64).rem_euclid(n));
            self.lattice[(b * n + a) as usize]
        };
        let top = idx(fx, fy) * (1.0 - sx) + idx(fx + 1.0, fy) * sx;
        let bot = idx(fx, fy + 1.0) * (1.0 - sx) + idx(fx + 1.0, fy + 1.0) * sx;
        top * (1.0 - sy) + bot * sy
    }
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t)
}

fn render(size: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Tensor<f32> {
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            data.extend(f(y, x).map(|v| v.clamp(0.0, 1.0) as f32));
        }
    }
    Tensor::new(&[size, size, 3], data).expect("render produces size×size×3 values")
}

/// Near-uniform light gray with sparse dark and light speckles.
fn concrete(size: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let base = rng.random_range(0.58..0.68);
    let tint = rng.random_range(-0.02..0.02);
    let grain = Normal::new(0.0, 0.015).unwrap();
    render(size, |_, _| {
        let mut v = base + grain.sample(rng);
        if rng.random::<f64>() < 0.04 {
            v += if rng.random_bool(0.6) { -0.25 } else { 0.15 };
        }
        [v + tint, v, v - tint]
    })
}

/// Green blades: noise that is fine across and coarse along a slanted axis.
fn grass(size: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let noise = ValueNoise::new(64, rng);
    let slope = rng.random_range(-0.3..0.3);
    let light = rng.random_range(0.85..1.15);
    let (dark, bright) = ([0.10, 0.28, 0.06], [0.35, 0.68, 0.20]);
    render(size, |y, x| {
        let u = x as f64 + slope * y as f64;
        let t = noise.at(u / 1.3, y as f64 / 9.0);
        lerp3(dark, bright, t).map(|c| c * light)
    })
}

/// Smooth two-octave noise thresholded into dark and light stone blobs.
fn rock(size: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let coarse = ValueNoise::new(16, rng);
    let fine = ValueNoise::new(64, rng);
    let scale = size as f64 / rng.random_range(4.0..7.0);
    let grain = Normal::new(0.0, 0.03).unwrap();
    let (dark, light) = ([0.30, 0.25, 0.22], [0.52, 0.45, 0.40]);
    render(size, |y, x| {
        let v = 0.7 * coarse.at(x as f64 / scale, y as f64 / scale) + 0.3 * fine.at(x as f64 / 3.0, y as f64 / 3.0);
        let tone = if v > 0.5 { light } else { dark };
        let g = grain.sample(rng);
        tone.map(|c| c + g)
    })
}

/// Low-frequency stripes whose phase is jittered by smooth noise.
fn wood(size: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let warp = ValueNoise::new(16, rng);
    let period = rng.random_range(5.0..9.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let (dark, light) = ([0.42, 0.24, 0.10], [0.72, 0.50, 0.28]);
    render(size, |y, x| {
        let jitter = 1.5 * warp.at(x as f64 / 12.0, y as f64 / 12.0);
        let t = 0.5 + 0.5 * ((y as f64 / period + jitter) * std::f64::consts::TAU + phase).sin();
        lerp3(dark, light, t)
    })
}

/// Texture of class `label` for item `index` of a set generated with `seed`.
/// Bitwise reproducible from `(seed, index)` alone.
pub fn synth_texture(label: usize, size: usize, seed: u64, index: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, index as u64));
    match label % SYNTH_CLASSES.len() {
        0 => concrete(size, &mut rng),
        1 => grass(size, &mut rng),
        2 => rock(size, &mut rng),
        _ => wood(size, &mut rng),
    }
}
