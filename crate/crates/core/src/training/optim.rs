//! AdamW with decoupled weight decay, and the warmup + cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// Step counter and per-parameter moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: usize,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub config: AdamWConfig,
}

impl<T: Scalar> OptimizerState<T> {
    /// Zeroed moments shaped like `tensors`.
    pub fn new(config: AdamWConfig, tensors: &[&[T]]) -> Self {
        let zeros = || tensors.iter().map(|t| vec![T::zero(); t.len()]).collect();
        Self {
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
            config,
        }
    }
}

/// One AdamW update of `params` in place.
///
/// Weight decay is applied as `p ← p − lr·wd·p` before, and separately
/// from, the bias-corrected Adam step.
pub fn adamw_step<T: Scalar>(params: &mut [&mut [T]], grads: &[&[T]], state: &mut OptimizerState<T>, lr: T) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::shape("adamw_step tensors", params.len(), grads.len()));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.first_moment[k].len() {
            return Err(Error::shape("adamw_step tensor", p.len(), g.len()));
        }
    }
    if lr < T::zero() || !lr.is_finite() {
        return Err(Error::InvalidConfig(format!("learning rate must be >= 0, got {lr}")));
    }
    let c = state.config;
    let (b1, b2, eps, wd) = (T::of(c.beta1), T::of(c.beta2), T::of(c.eps), T::of(c.weight_decay));
    state.step += 1;
    let t = state.step as i32;
    let bias1 = T::one() - b1.powi(t);
    let bias2 = T::one() - b2.powi(t);
    let decay = T::one() - lr * wd;
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first_moment[k];
        let v = &mut state.second_moment[k];
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            p[i] = p[i] * decay;
            p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl ScheduleSpec {
    pub fn new(peak_lr: f64, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        let s = Self {
            peak_lr,
            warmup_steps,
            total_steps,
        };
        s.validate()?;
        Ok(s)
    }

    /// Warmup as a fraction of the total, rounded to the nearest step.
    pub fn with_warmup_fraction(peak_lr: f64, fraction: f64, total_steps: usize) -> Result<Self> {
        let warmup = ((total_steps as f64) * fraction).round() as usize;
        Self::new(peak_lr, warmup.min(total_steps), total_steps)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0) || !self.peak_lr.is_finite() {
            return Err(Error::InvalidConfig(format!("peak_lr must be > 0, got {}", self.peak_lr)));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::InvalidConfig(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to the peak, then half-cosine decay to 0 at the last step.
///
/// When there is no decay phase (`warmup == total`) the rate stays at the peak.
pub fn lr_at(schedule: &ScheduleSpec, step: usize) -> Result<f64> {
    let ScheduleSpec {
        peak_lr,
        warmup_steps,
        total_steps,
    } = *schedule;
    if step > total_steps {
        return Err(Error::StepOutOfRange { step, total: total_steps });
    }
    if step < warmup_steps {
        return Ok(peak_lr * step as f64 / warmup_steps as f64);
    }
    if total_steps == warmup_steps {
        return Ok(peak_lr);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok((peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())).max(0.0))
}
