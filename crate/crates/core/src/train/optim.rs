//! AdamW with decoupled weight decay, and the multistep schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// One AdamW update at step `t ≥ 1`:
/// `p ← p(1 − lr·wd) − lr·m̂/(√v̂ + ε)` with bias-corrected moments.
pub fn adamw_step(
    param: &mut [f32],
    grad: &[f32],
    state: &mut Moments,
    t: u64,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if t == 0 {
        return Err(Error::Usage("AdamW steps are counted from 1".into()));
    }
    if grad.len() != param.len() {
        return Err(Error::Dimension(format!("gradient has {} values, parameter {}", grad.len(), param.len())));
    }
    if state.m.is_empty() {
        state.m = vec![0.0; param.len()];
        state.v = vec![0.0; param.len()];
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    let decay = 1.0 - lr * cfg.weight_decay;
    for i in 0..param.len() {
        let g = f64::from(grad[i]);
        let m = b1 * f64::from(state.m[i]) + (1.0 - b1) * g;
        let v = b2 * f64::from(state.v[i]) + (1.0 - b2) * g * g;
        state.m[i] = m as f32;
        state.v[i] = v as f32;
        let step = lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
        param[i] = (f64::from(param[i]) * decay - step) as f32;
    }
    Ok(())
}

/// AdamW over a model's parameter list, tracking the step count.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: Vec<Moments>,
}

impl AdamW {
    pub fn new(config: AdamConfig) -> Self {
        AdamW { config, step: 0, moments: Vec::new() }
    }

    /// Updates every parameter from its accumulated gradient, replacing
    /// each with a fresh leaf. Parameters without a gradient see a zero one.
    pub fn step<T: Element>(&mut self, params: Vec<(String, &mut Tensor<T>)>, lr: f64) -> Result<()> {
        if self.moments.is_empty() {
            self.moments = vec![Moments::default(); params.len()];
        } else if self.moments.len() != params.len() {
            return Err(Error::Usage(format!(
                "optimizer tracks {} parameters, got {}",
                self.moments.len(),
                params.len()
            )));
        }
        self.step += 1;
        for ((name, p), state) in params.into_iter().zip(&mut self.moments) {
            let mut values: Vec<f32> = p.data().iter().map(|v| v.f64() as f32).collect();
            let grad: Vec<f32> = match p.grad() {
                Some(g) => g.iter().map(|v| v.f64() as f32).collect(),
                None => vec![0.0; values.len()],
            };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Domain(format!("non-finite gradient for {name}")));
            }
            adamw_step(&mut values, &grad, state, self.step, lr, &self.config)?;
            let values = values.into_iter().map(|v| T::of(f64::from(v))).collect();
            *p = Tensor::param(p.shape(), values)?;
        }
        Ok(())
    }
}

/// `lr0 · decay^k`, `k` the number of milestones at or below `epoch`.
pub fn multistep_lr(epoch: usize, lr0: f64, milestones: &[usize], decay: f64) -> f64 {
    let k = milestones.iter().filter(|&&m| m <= epoch).count();
    lr0 * decay.powi(k as i32)
}
