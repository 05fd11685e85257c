//! Adam with bias correction over a [`ParamStore`].

use crate::error::{Result, SmarcError};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps taken so far.
    pub t: u64,
    /// First and second moments, one buffer per parameter.
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Apply one update. Parameters that are frozen or got no gradient keep
    /// both their values and their moments. A non-finite gradient aborts
    /// the step before anything is modified.
    pub fn step(
        &mut self,
        params: &mut ParamStore<f32>,
        grads: &[Option<Vec<f32>>],
        frozen: Option<&[bool]>,
        lr: f64,
    ) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(SmarcError::invalid(
                "adam_step",
                format!("{} gradients and {} moment buffers for {} parameters", grads.len(), self.m.len(), params.len()),
            ));
        }
        for ((id, p), g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.len() != p.tensor.numel() {
                    return Err(SmarcError::shape("adam_step", p.tensor.shape(), &[g.len()]));
                }
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    return Err(SmarcError::invalid(
                        "adam_step",
                        format!("non-finite gradient {} in {} at index {i}", g[i], params.get(id).name),
                    ));
                }
            }
        }

        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powf(self.t as f64);
        let c2 = 1.0 - b2.powf(self.t as f64);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if frozen.is_some_and(|f| f[i]) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = params.get_mut(crate::params::ParamId(i)).tensor.data_mut();
            for k in 0..g.len() {
                let gk = g[k] as f64;
                let mk = b1 * m[k] as f64 + (1.0 - b1) * gk;
                let vk = b2 * v[k] as f64 + (1.0 - b2) * gk * gk;
                m[k] = mk as f32;
                v[k] = vk as f32;
                let update = lr * (mk / c1) / ((vk / c2).sqrt() + self.eps);
                w[k] = (w[k] as f64 - update) as f32;
            }
        }
        Ok(())
    }
}
