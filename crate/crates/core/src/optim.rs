// SPDX-License-Identifier: MIT OR Apache-2.0

//! AdamW with global-norm clipping and a warmup + cosine schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamSet;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr_peak: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_peak: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            warmup_steps: 200,
            total_steps: 2000,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) || self.lr_peak < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "optimizer needs clip_norm > 0 and non-negative lr and weight decay".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0,1) and eps be positive".into()));
        }
        Ok(())
    }

    /// Learning rate at `step`: linear ramp from 0, then cosine decay to 0.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr_peak * step as f64 / self.warmup_steps as f64;
        }
        if self.total_steps <= self.warmup_steps {
            return self.lr_peak;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.lr_peak * 0.5 * (1.0 + (PI * progress).cos())
    }
}

/// First and second moments of one parameter plus its own update count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Matrix,
    pub v: Matrix,
    pub t: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Applied { lr: f64, grad_norm: f64, clipped: bool },
    Skipped { reason: String },
}

/// Global L2 norm over all gradients.
pub fn global_norm(grads: &BTreeMap<String, Matrix>) -> f64 {
    grads.values().map(Matrix::frobenius_sq).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so the global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global(grads: &mut BTreeMap<String, Matrix>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: OptimConfig,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: OptimConfig) -> Self {
        Self {
            config,
            moments: BTreeMap::new(),
        }
    }

    /// Drops state for parameters that no longer exist.
    pub fn retain(&mut self, params: &ParamSet) {
        self.moments.retain(|name, _| params.get(name).is_some());
    }

    /// One clipped AdamW update of every trainable parameter at schedule
    /// position `step`. Non-finite gradients skip the update entirely.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        mut grads: BTreeMap<String, Matrix>,
        step: u64,
    ) -> Result<StepOutcome> {
        for (name, p) in params.iter() {
            if p.trainable && !grads.contains_key(name) {
                return Err(Error::Consistency(format!("no gradient for trainable `{name}`")));
            }
        }
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Ok(StepOutcome::Skipped {
                reason: format!("non-finite gradient for `{name}`"),
            });
        }
        let c = &self.config;
        let grad_norm = clip_global(&mut grads, c.clip_norm);
        let lr = c.lr_at(step);
        for (name, g) in grads {
            let p = params
                .get_mut(&name)
                .ok_or_else(|| Error::Consistency(format!("gradient for unknown `{name}`")))?;
            if !p.trainable {
                continue;
            }
            let st = self.moments.entry(name).or_insert_with(|| Moments {
                m: Matrix::zeros(g.rows(), g.cols()),
                v: Matrix::zeros(g.rows(), g.cols()),
                t: 0,
            });
            if st.m.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "optimizer state {:?} vs gradient {:?}",
                    st.m.shape(),
                    g.shape()
                )));
            }
            st.t += 1;
            let bc1 = 1.0 - c.beta1.powi(st.t as i32);
            let bc2 = 1.0 - c.beta2.powi(st.t as i32);
            let w = p.value.data_mut();
            let m = st.m.data_mut();
            let v = st.v.data_mut();
            for (k, &gk) in g.data().iter().enumerate() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                w[k] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * w[k]);
            }
        }
        Ok(StepOutcome::Applied {
            lr,
            grad_norm,
            clipped: grad_norm > c.clip_norm,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let c = OptimConfig::default();
        assert_eq!(c.lr_at(0), 0.0);
        assert_eq!(c.lr_at(100), 1e-4);
        assert_eq!(c.lr_at(200), 2e-4);
        assert!(c.lr_at(2000).abs() < 1e-20);
        assert!((c.lr_at(1100) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn clipping_scales_by_ratio() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Matrix::row_vector(&[6.0, 8.0]));
        let before = g["a"].clone();
        let norm = clip_global(&mut g, 1.0);
        assert_eq!(norm, 10.0);
        for (x, y) in g["a"].data().iter().zip(before.data()) {
            assert!((x - 0.1 * y).abs() < 1e-15);
        }
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut params = ParamSet::new();
        params.insert("w", Matrix::row_vector(&[1.0, -1.0]), true);
        let mut opt = AdamW::new(OptimConfig {
            lr_peak: 0.1,
            warmup_steps: 0,
            weight_decay: 0.0,
            clip_norm: 100.0,
            ..OptimConfig::default()
        });
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Matrix::row_vector(&[0.5, -2.0]));
        opt.step(&mut params, g, 0).unwrap();
        let w = params.get("w").unwrap().value.data().to_vec();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn non_finite_gradient_skips() {
        let mut params = ParamSet::new();
        params.insert("w", Matrix::row_vector(&[1.0]), true);
        let mut opt = AdamW::new(OptimConfig::default());
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Matrix::row_vector(&[f64::NAN]));
        let out = opt.step(&mut params, g, 300).unwrap();
        assert!(matches!(out, StepOutcome::Skipped { .. }));
        assert_eq!(params.get("w").unwrap().value.item(), 1.0);
        assert!(opt.moments.is_empty());
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut params = ParamSet::new();
        params.insert("w", Matrix::row_vector(&[1.0]), true);
        let mut opt = AdamW::new(OptimConfig::default());
        assert!(opt.step(&mut params, BTreeMap::new(), 1).is_err());
    }
}
