use serde::{Deserialize, Serialize};

use super::tensor::Tensor2;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            base_lr: 3e-5,
        }
    }
}

/// Per-parameter first and second moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Tensor2>,
    v: Vec<Tensor2>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = shapes
            .into_iter()
            .map(|(r, c)| (Tensor2::zeros(r, c), Tensor2::zeros(r, c)))
            .unzip();
        Self {
            config,
            m,
            v,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update at learning rate `lr_now`. Parameters
    /// are left untouched if any gradient is non-finite.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor2],
        grads: &[Tensor2],
        names: &[String],
        lr_now: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim(
                "adam_step",
                format!(
                    "{} params, {} grads, {} moment slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let name = names.get(i).map_or("?", String::as_str);
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::dim(
                    "adam_step",
                    format!("parameter {name}: {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {name}")));
            }
        }

        self.step += 1;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .values_mut()
                .iter_mut()
                .zip(g.values())
                .zip(m.values_mut())
                .zip(v.values_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr_now * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear decay from `base_lr` at step 0 to 0 at `total_steps`.
pub fn linear_lr(base_lr: f64, step: usize, total_steps: usize) -> f64 {
    let total = total_steps.max(1);
    let step = step.min(total);
    base_lr * (1.0 - step as f64 / total as f64)
}
