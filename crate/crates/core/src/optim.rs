//! Optimizers and the learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Optimizer selection and hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algo", rename_all = "snake_case")]
pub enum OptimizerCfg {
    Adam { lr: f64, betas: (f64, f64), eps: f64 },
    Sgd { lr: f64, momentum: f64 },
}

impl Default for OptimizerCfg {
    fn default() -> Self {
        OptimizerCfg::Adam { lr: 1e-3, betas: (0.9, 0.999), eps: 1e-8 }
    }
}

impl OptimizerCfg {
    pub fn base_lr(&self) -> f64 {
        match self {
            OptimizerCfg::Adam { lr, .. } | OptimizerCfg::Sgd { lr, .. } => *lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            OptimizerCfg::Adam { lr, betas, eps } => {
                *lr > 0.0 && (0.0..1.0).contains(&betas.0) && (0.0..1.0).contains(&betas.1) && *eps > 0.0
            }
            OptimizerCfg::Sgd { lr, momentum } => *lr > 0.0 && (0.0..1.0).contains(momentum),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid optimizer settings: {self:?}")))
        }
    }
}

/// Per-parameter optimizer state. Missing gradients count as zero, so a
/// step with no gradients leaves parameters unchanged.
pub struct Optimizer<T: Real> {
    cfg: OptimizerCfg,
    /// First/second moment (Adam) or velocity (SGD) per parameter.
    slot_a: Vec<Vec<T>>,
    slot_b: Vec<Vec<T>>,
    step_count: u64,
}

impl<T: Real> Optimizer<T> {
    pub fn new(cfg: OptimizerCfg, params: &[Tensor<T>]) -> Result<Self> {
        cfg.validate()?;
        let slot_a = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        let slot_b = match cfg {
            OptimizerCfg::Adam { .. } => params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            OptimizerCfg::Sgd { .. } => Vec::new(),
        };
        Ok(Optimizer { cfg, slot_a, slot_b, step_count: 0 })
    }

    /// Applies one update at the given learning rate and clears gradients.
    pub fn step(&mut self, params: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != self.slot_a.len() {
            return Err(Error::invalid("optimizer", "parameter list changed since construction"));
        }
        self.step_count += 1;
        let lr_t = T::from_f64(lr);
        match self.cfg {
            OptimizerCfg::Adam { betas: (b1, b2), eps, .. } => {
                let b1t = T::from_f64(b1);
                let b2t = T::from_f64(b2);
                let eps_t = T::from_f64(eps);
                let corr1 = T::from_f64(1.0 - b1.powi(self.step_count as i32));
                let corr2 = T::from_f64(1.0 - b2.powi(self.step_count as i32));
                for (i, p) in params.iter().enumerate() {
                    let grad = p.grad();
                    let g = grad.as_deref();
                    let m = &mut self.slot_a[i];
                    let v = &mut self.slot_b[i];
                    let mut data = p.to_vec();
                    for j in 0..data.len() {
                        let gj = g.map_or(T::zero(), |g| g[j]);
                        m[j] = b1t * m[j] + (T::one() - b1t) * gj;
                        v[j] = b2t * v[j] + (T::one() - b2t) * gj * gj;
                        let m_hat = m[j] / corr1;
                        let v_hat = v[j] / corr2;
                        data[j] -= lr_t * m_hat / (v_hat.sqrt() + eps_t);
                    }
                    p.set_data(&data);
                    p.clear_grad();
                }
            }
            OptimizerCfg::Sgd { momentum, .. } => {
                let mu = T::from_f64(momentum);
                for (i, p) in params.iter().enumerate() {
                    let grad = p.grad();
                    let g = grad.as_deref();
                    let v = &mut self.slot_a[i];
                    let mut data = p.to_vec();
                    for j in 0..data.len() {
                        let gj = g.map_or(T::zero(), |g| g[j]);
                        v[j] = mu * v[j] + gj;
                        data[j] -= lr_t * v[j];
                    }
                    p.set_data(&data);
                    p.clear_grad();
                }
            }
        }
        Ok(())
    }
}

/// Cosine annealing with warm restarts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerCfg {
    /// Length of the first cycle, in scheduler steps (epochs here).
    pub t_0: usize,
    /// Cycle-length growth factor (≥ 1).
    pub t_mult: usize,
    pub eta_min: f64,
}

impl Default for SchedulerCfg {
    fn default() -> Self {
        SchedulerCfg { t_0: 10, t_mult: 2, eta_min: 1e-5 }
    }
}

impl SchedulerCfg {
    pub fn validate(&self) -> Result<()> {
        if self.t_0 == 0 || self.t_mult == 0 || self.eta_min < 0.0 {
            return Err(Error::InvalidConfig(format!("invalid scheduler settings: {self:?}")));
        }
        Ok(())
    }
}

/// lr at `step`: within each cycle of length T_i = T_0·t_mult^i,
/// lr = eta_min + (lr_max − eta_min)·(1 + cos(π·t/T_i)) / 2.
pub fn cosine_warm_restart_lr(
    step: usize,
    t_0: usize,
    t_mult: usize,
    lr_max: f64,
    eta_min: f64,
) -> f64 {
    let mut remaining = step;
    let mut cycle_len = t_0.max(1);
    loop {
        if remaining < cycle_len {
            let frac = remaining as f64 / cycle_len as f64;
            return eta_min + (lr_max - eta_min) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0;
        }
        remaining -= cycle_len;
        cycle_len = if t_mult <= 1 { cycle_len } else { cycle_len * t_mult };
    }
}
