//! Reconstruction metrics (MSE, MAE, PSNR, SSIM), classification metrics
//! (confusion matrix, support-weighted precision/recall/F1, one-vs-rest ROC),
//! and the [`EvalReport`] that collects them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmarcError};
use crate::tensor::{Real, Tensor};

/// PSNR reported when the MSE falls below [`PSNR_MSE_FLOOR`].
pub const PSNR_CAP_DB: f64 = 100.0;
pub const PSNR_MSE_FLOOR: f64 = 1e-10;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same<T: Real>(a: &[T], b: &[T], op: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(SmarcError::shape(op, &[a.len()], &[b.len()]));
    }
    Ok(())
}

pub fn mse<T: Real>(pred: &[T], target: &[T]) -> Result<f64> {
    check_same(pred, target, "mse")?;
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| (p.to_f64() - t.to_f64()).powi(2))
        .sum();
    Ok(s / pred.len().max(1) as f64)
}

pub fn mae<T: Real>(pred: &[T], target: &[T]) -> Result<f64> {
    check_same(pred, target, "mae")?;
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| (p.to_f64() - t.to_f64()).abs())
        .sum();
    Ok(s / pred.len().max(1) as f64)
}

/// `10·log10(1 / mse)` for unit-range images, capped at 100 dB.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < PSNR_MSE_FLOOR {
        PSNR_CAP_DB
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub fn psnr<T: Real>(pred: &[T], target: &[T]) -> Result<f64> {
    Ok(psnr_from_mse(mse(pred, target)?))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable "valid" filtering of an `h×w` plane with the SSIM window.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..SSIM_WINDOW).map(|i| k[i] * x[y * w + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

/// Mean SSIM of two `h×w×c` unit-range images, compared in gray (channel
/// mean), over every window position that fits inside the image.
pub fn ssim<T: Real>(pred: &[T], target: &[T], h: usize, w: usize, c: usize) -> Result<f64> {
    check_same(pred, target, "ssim")?;
    if pred.len() != h * w * c {
        return Err(SmarcError::shape("ssim", &[h, w, c], &[pred.len()]));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(SmarcError::invalid(
            "ssim",
            format!("{h}×{w} image is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window"),
        ));
    }
    let gray = |img: &[T]| -> Vec<f64> {
        img.chunks_exact(c)
            .map(|px| px.iter().map(|&v| Real::to_f64(v)).sum::<f64>() / c as f64)
            .collect()
    };
    let (x, y) = (gray(pred), gray(target));
    let k = gaussian_window();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_x = filter_valid(&x, h, w, &k);
    let mu_y = filter_valid(&y, h, w, &k);
    let xx = filter_valid(&prod(&x, &x), h, w, &k);
    let yy = filter_valid(&prod(&y, &y), h, w, &k);
    let xy = filter_valid(&prod(&x, &y), h, w, &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mu_x.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = xx[i] - mx * mx;
            let vy = yy[i] - my * my;
            let cxy = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// `mask · target + (1 − mask) · pred`, i.e. observed pixels pasted back.
pub fn composite<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, h, w, c) = pred.nhwc("composite")?;
    if target.shape() != pred.shape() || mask.shape() != [b, h, w, 1] {
        return Err(SmarcError::shape("composite", pred.shape(), target.shape()));
    }
    let mut out = pred.clone();
    for ((row, t), &m) in out
        .data_mut()
        .chunks_exact_mut(c)
        .zip(target.data().chunks_exact(c))
        .zip(mask.data())
    {
        if m != T::zero() {
            row.copy_from_slice(t);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub mae: f64,
}

/// Per-image metrics for every item of two `B×H×W×C` batches.
pub fn image_metrics<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Vec<ImageMetrics>> {
    let (b, h, w, c) = pred.nhwc("image_metrics")?;
    if pred.shape() != target.shape() {
        return Err(SmarcError::shape("image_metrics", pred.shape(), target.shape()));
    }
    let per = h * w * c;
    (0..b)
        .into_par_iter()
        .map(|i| {
            let p = &pred.data()[i * per..][..per];
            let t = &target.data()[i * per..][..per];
            let mse = mse(p, t)?;
            Ok(ImageMetrics {
                psnr: psnr_from_mse(mse),
                ssim: ssim(p, t, h, w, c)?,
                mse,
                mae: mae(p, t)?,
            })
        })
        .collect()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `K×K` counts, rows indexed by truth, columns by prediction.
pub fn confusion_matrix(predicted: &[usize], truth: &[usize], k: usize) -> Result<Vec<Vec<u64>>> {
    if predicted.len() != truth.len() {
        return Err(SmarcError::shape("confusion_matrix", &[predicted.len()], &[truth.len()]));
    }
    let mut m = vec![vec![0u64; k]; k];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p >= k || t >= k {
            return Err(SmarcError::invalid("confusion_matrix", format!("class index out of range for {k} classes")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionSummary {
    pub accuracy: f64,
    pub precision_w: f64,
    pub recall_w: f64,
    pub f1_w: f64,
    pub per_class: Vec<ClassScores>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy and support-weighted precision/recall/F1 (0 when a denominator is 0).
pub fn summarize_confusion(m: &[Vec<u64>]) -> ConfusionSummary {
    let k = m.len();
    let total: u64 = m.iter().flatten().sum();
    let correct: u64 = (0..k).map(|i| m[i][i]).sum();
    let mut per_class = Vec::with_capacity(k);
    let (mut pw, mut rw, mut fw) = (0.0, 0.0, 0.0);
    for c in 0..k {
        let tp = m[c][c];
        let support: u64 = m[c].iter().sum();
        let predicted: u64 = (0..k).map(|r| m[r][c]).sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let share = ratio(support, total);
        pw += share * precision;
        rw += share * recall;
        fw += share * f1;
        per_class.push(ClassScores {
            precision,
            recall,
            f1,
            support,
        });
    }
    ConfusionSummary {
        accuracy: ratio(correct, total),
        precision_w: pw,
        recall_w: rw,
        f1_w: fw,
        per_class,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    /// NaN when the class has no positives or no negatives.
    pub auc: f64,
}

/// ROC of `scores` against boolean `positive`, sweeping the threshold from
/// above the highest score downwards; tied scores enter together.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> RocCurve {
    let p = positive.iter().filter(|&&b| b).count() as f64;
    let n = positive.len() as f64 - p;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut fpr = vec![0.0];
    let mut tpr = vec![0.0];
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        fpr.push(if n > 0.0 { fp / n } else { f64::NAN });
        tpr.push(if p > 0.0 { tp / p } else { f64::NAN });
    }
    let auc = if p > 0.0 && n > 0.0 {
        fpr.windows(2)
            .zip(tpr.windows(2))
            .map(|(f, t)| (f[1] - f[0]) * (t[1] + t[0]) / 2.0)
            .sum()
    } else {
        f64::NAN
    };
    RocCurve { fpr, tpr, auc }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub summary: ConfusionSummary,
    pub confusion: Vec<Vec<u64>>,
    pub roc: Vec<RocCurve>,
    pub predictions: Vec<usize>,
}

/// Classification metrics from `N×K` probabilities (row-major) and labels.
pub fn classification_report(probs: &[f64], labels: &[usize], k: usize) -> Result<ClassificationReport> {
    if labels.is_empty() || probs.len() != labels.len() * k {
        return Err(SmarcError::shape("classification_report", &[probs.len()], &[labels.len(), k]));
    }
    let predictions: Vec<usize> = probs.chunks_exact(k).map(argmax).collect();
    let confusion = confusion_matrix(&predictions, labels, k)?;
    let roc = (0..k)
        .map(|c| {
            let scores: Vec<f64> = probs.chunks_exact(k).map(|r| r[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            roc_curve(&scores, &pos)
        })
        .collect();
    Ok(ClassificationReport {
        summary: summarize_confusion(&confusion),
        confusion,
        roc,
        predictions,
    })
}

/// Everything `eval` reports for one split. Serialises to TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub n_images: usize,
    pub class_names: Vec<String>,
    /// Whether observed pixels were pasted into the output before scoring.
    pub composited: bool,
    pub hole_weight: f64,
    pub valid_weight: f64,
    /// Mean of per-image PSNR.
    pub psnr_mean: f64,
    /// PSNR of the mean MSE over the set.
    pub psnr_of_mean_mse: f64,
    pub ssim_mean: f64,
    pub mse_mean: f64,
    pub mae_mean: f64,
    pub accuracy: f64,
    pub precision_w: f64,
    pub recall_w: f64,
    pub f1_w: f64,
    pub auc: Vec<f64>,
    pub s_per_img: f64,
    pub total_s: f64,
    pub confusion: Vec<Vec<u64>>,
    pub per_class: Vec<ClassScores>,
    pub roc: Vec<RocCurve>,
    pub per_image: Vec<ImageMetrics>,
}

impl EvalReport {
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        split: impl Into<String>,
        class_names: Vec<String>,
        composited: bool,
        hole_weight: f64,
        valid_weight: f64,
        per_image: Vec<ImageMetrics>,
        cls: ClassificationReport,
        total_s: f64,
    ) -> Self {
        let n = per_image.len();
        let mean = |f: fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n.max(1) as f64;
        let mse_mean = mean(|m| m.mse);
        Self {
            split: split.into(),
            n_images: n,
            class_names,
            composited,
            hole_weight,
            valid_weight,
            psnr_mean: mean(|m| m.psnr),
            psnr_of_mean_mse: psnr_from_mse(mse_mean),
            ssim_mean: mean(|m| m.ssim),
            mse_mean,
            mae_mean: mean(|m| m.mae),
            accuracy: cls.summary.accuracy,
            precision_w: cls.summary.precision_w,
            recall_w: cls.summary.recall_w,
            f1_w: cls.summary.f1_w,
            auc: cls.roc.iter().map(|r| r.auc).collect(),
            s_per_img: total_s / n.max(1) as f64,
            total_s,
            confusion: cls.confusion,
            per_class: cls.summary.per_class,
            roc: cls.roc,
            per_image,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| SmarcError::invalid("EvalReport::to_toml", e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| SmarcError::invalid("EvalReport::from_toml", e.to_string()))
    }
}
