//! The multi-task objective: hole-weighted MAE on the reconstruction,
//! label-smoothed class-weighted cross-entropy, and L2 on kernels.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SmarcError};
use crate::params::ParamStore;
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_rgb: f64,
    pub label_smoothing: f64,
    pub l2_coeff: f64,
    /// Per-pixel MAE weight where the mask is 0.
    pub hole_weight: f64,
    /// Per-pixel MAE weight where the mask is 1.
    pub valid_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rgb: 0.25,
            label_smoothing: 0.05,
            l2_coeff: 1e-4,
            hole_weight: 6.0,
            valid_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("lambda_rgb", self.lambda_rgb),
            ("label_smoothing", self.label_smoothing),
            ("l2_coeff", self.l2_coeff),
            ("hole_weight", self.hole_weight),
            ("valid_weight", self.valid_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("{name} {v} must be finite and >= 0"));
            }
        }
        if self.label_smoothing >= 1.0 {
            errs.push(format!("label_smoothing {} must be < 1", self.label_smoothing));
        }
        errs
    }
}

/// Weighted mean of `|pred − target|`, weight `hole_weight` where `mask` is 0
/// and `valid_weight` where it is 1, normalised by the summed weights.
pub fn masked_mae<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: &Tensor<T>,
    mask: &Tensor<T>,
    w: &LossWeights,
) -> Result<Var> {
    let (b, h, wd, _) = target.nhwc("masked_mae")?;
    if mask.shape() != [b, h, wd, 1] {
        return Err(SmarcError::shape("masked_mae", target.shape(), mask.shape()));
    }
    mask.check_binary("masked_mae")?;
    let (hole, valid) = (T::lit(w.hole_weight), T::lit(w.valid_weight));
    let weights = mask.data().iter().map(|&m| if m == T::zero() { hole } else { valid }).collect();
    g.weighted_mae(pred, target, weights)
}

/// `(1 − ε)·onehot + ε/K`, row-major `B×K`.
pub fn smoothed_targets<T: Real>(labels: &[usize], k: usize, eps: f64) -> Result<Vec<T>> {
    let mut t = vec![T::lit(eps / k as f64); labels.len() * k];
    for (n, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(SmarcError::invalid("ce_smoothed", format!("label {l} out of range for {k} classes")));
        }
        t[n * k + l] = T::lit(1.0 - eps + eps / k as f64);
    }
    Ok(t)
}

/// Label-smoothed cross-entropy, each sample weighted by its class weight,
/// averaged over the batch.
pub fn ce_smoothed<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[usize],
    eps: f64,
    class_weights: &[f64],
) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() || s[1] != class_weights.len() {
        return Err(SmarcError::shape("ce_smoothed", &s, &[labels.len(), class_weights.len()]));
    }
    let targets = smoothed_targets(labels, s[1], eps)?;
    let sample_w = labels.iter().map(|&l| T::lit(class_weights[l])).collect();
    g.cross_entropy(logits, targets, sample_w)
}

/// Σ‖w‖² over decay-eligible parameters not marked frozen.
pub fn l2_penalty<T: Real>(g: &mut Graph<T>, params: &ParamStore<T>, frozen: Option<&[bool]>) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for (id, p) in params.iter() {
        if !p.decay || frozen.is_some_and(|f| f[id.0]) {
            continue;
        }
        let v = g.param(params, id);
        let sq = g.sum_squares(v)?;
        acc = Some(match acc {
            Some(a) => g.add(a, sq)?,
            None => sq,
        });
    }
    Ok(acc)
}

/// Supervision for one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossTargets<'a, T: Real> {
    pub image: &'a Tensor<T>,
    pub mask: &'a Tensor<T>,
    pub labels: &'a [usize],
    pub class_weights: &'a [f64],
}

/// Tape nodes of the total objective and its parts.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub rgb: Var,
    pub ce: Var,
    pub l2: Option<Var>,
}

/// Scalar values of [`LossVars`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub rgb: f64,
    pub ce: f64,
    pub l2: f64,
}

impl LossVars {
    pub fn values<T: Real>(&self, g: &Graph<T>) -> LossValues {
        let s = |v: Var| g.value(v).data()[0].to_f64();
        LossValues {
            total: s(self.total),
            rgb: s(self.rgb),
            ce: s(self.ce),
            l2: self.l2.map_or(0.0, s),
        }
    }
}

/// `λ_rgb·masked_mae + ce_smoothed + l2_coeff·Σ‖kernels‖²`, the L2 sum
/// running over the decay-eligible, unfrozen entries of `params`.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    reconstruction: Var,
    logits: Var,
    targets: &LossTargets<'_, T>,
    w: &LossWeights,
    params: &ParamStore<T>,
    frozen: Option<&[bool]>,
) -> Result<LossVars> {
    let rgb = masked_mae(g, reconstruction, targets.image, targets.mask, w)?;
    let ce = ce_smoothed(g, logits, targets.labels, w.label_smoothing, targets.class_weights)?;
    let scaled = g.scale(rgb, T::lit(w.lambda_rgb))?;
    let mut total = g.add(scaled, ce)?;
    let l2 = if w.l2_coeff > 0.0 {
        l2_penalty(g, params, frozen)?
    } else {
        None
    };
    if let Some(l2) = l2 {
        let l2s = g.scale(l2, T::lit(w.l2_coeff))?;
        total = g.add(total, l2s)?;
    }
    Ok(LossVars { total, rgb, ce, l2 })
}
