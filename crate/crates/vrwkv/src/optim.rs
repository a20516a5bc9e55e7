//! AdamW with decoupled weight decay and a warmup + cosine schedule.

use thiserror::Error;

use crate::model::{tensor_specs, ModelConfig, ModelParams};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient in `{name}`; step rejected")]
    NonFiniteGradient { name: String },
}

#[derive(Debug, Clone)]
pub struct OptimSettings {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
}

impl OptimSettings {
    pub fn new(base_lr: f64, weight_decay: f64, total_steps: u64, warmup_steps: u64) -> Self {
        Self {
            base_lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            total_steps,
            warmup_steps,
        }
    }
}

/// Linear warmup from zero to `base_lr`, then cosine decay to zero.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64, warmup_steps: u64) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

/// First/second moment accumulators (mirroring the parameter shapes) plus
/// the step counter and schedule.
pub struct OptimState {
    pub settings: OptimSettings,
    pub step: u64,
    m: ModelParams<f64>,
    v: ModelParams<f64>,
    decay_mask: Vec<bool>,
}

impl OptimState {
    pub fn new(config: &ModelConfig, settings: OptimSettings) -> Self {
        Self {
            settings,
            step: 0,
            m: ModelParams::zeros(config),
            v: ModelParams::zeros(config),
            decay_mask: tensor_specs(config).iter().map(|s| s.weight_decay).collect(),
        }
    }

    /// One decoupled-weight-decay update. Norm, bias, layer-scale, kernel
    /// decay/bonus and interpolation parameters are exempt from decay.
    /// Returns the learning rate that was applied.
    pub fn apply(
        &mut self,
        params: &mut ModelParams<f64>,
        grads: &ModelParams<f64>,
        config: &ModelConfig,
    ) -> Result<f64, OptimError> {
        let specs = tensor_specs(config);
        for (spec, grad) in specs.iter().zip(grads.slices()) {
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(OptimError::NonFiniteGradient {
                    name: spec.name.clone(),
                });
            }
        }
        let lr = cosine_lr(
            self.step,
            self.settings.total_steps,
            self.settings.base_lr,
            self.settings.warmup_steps,
        );
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps) = (self.settings.beta1, self.settings.beta2, self.settings.eps);
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        let wd = self.settings.weight_decay;
        let mask = self.decay_mask.clone();
        for (((p, g), m), (v, decays)) in params
            .slices_mut()
            .into_iter()
            .zip(grads.slices())
            .zip(self.m.slices_mut())
            .zip(self.v.slices_mut().into_iter().zip(mask))
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                let mut update = m_hat / (v_hat.sqrt() + eps);
                if decays && wd > 0.0 {
                    update += wd * p[i];
                }
                p[i] -= lr * update;
            }
        }
        Ok(lr)
    }
}
