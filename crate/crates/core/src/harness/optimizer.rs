use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transform::NUM_PARAMS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub method: Method,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub max_iters: usize,
    /// Stop once `|Δloss|` stays below this for [`STALL_WINDOW`] iterations.
    pub stop_tol: f64,
    /// Redraw the linearized sampler's random samples every iteration.
    pub resample_noise: bool,
}

/// Consecutive small loss changes required to stop early.
pub const STALL_WINDOW: usize = 20;

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            method: Method::Adam,
            learning_rate: 1e-2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            max_iters: 1000,
            stop_tol: 1e-9,
            resample_noise: true,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad(format!("adam betas must lie in [0, 1), got {} / {}", self.adam_beta1, self.adam_beta2));
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1".into());
        }
        if !(self.stop_tol >= 0.0) {
            return bad(format!("stop_tol must be nonnegative, got {}", self.stop_tol));
        }
        Ok(())
    }
}

/// First-order optimizer state over the five warp parameters.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    m: [f64; NUM_PARAMS],
    v: [f64; NUM_PARAMS],
    t: i32,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self { config, m: [0.0; NUM_PARAMS], v: [0.0; NUM_PARAMS], t: 0 }
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut [f64; NUM_PARAMS], grad: &[f64; NUM_PARAMS]) {
        let c = &self.config;
        match c.method {
            Method::Gd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= c.learning_rate * g;
                }
            }
            Method::Adam => {
                self.t += 1;
                let bc1 = 1.0 - c.adam_beta1.powi(self.t);
                let bc2 = 1.0 - c.adam_beta2.powi(self.t);
                for i in 0..NUM_PARAMS {
                    self.m[i] = c.adam_beta1 * self.m[i] + (1.0 - c.adam_beta1) * grad[i];
                    self.v[i] = c.adam_beta2 * self.v[i] + (1.0 - c.adam_beta2) * grad[i] * grad[i];
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    params[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.adam_eps);
                }
            }
        }
    }
}
