//! Round-dependent schedules: piecewise local-epoch annealing and the
//! sigmoid mixing weights between local and distillation losses.
//! Rounds are 1-indexed.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochScheduleConfig {
    pub e_max: usize,
    pub e_min: usize,
    pub t_alpha: usize,
    pub t_beta: usize,
}

impl EpochScheduleConfig {
    pub fn new(e_max: usize, e_min: usize, t_alpha: usize, t_beta: usize) -> Result<Self> {
        let cfg = EpochScheduleConfig {
            e_max,
            e_min,
            t_alpha,
            t_beta,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The same number of epochs every round.
    pub fn constant(epochs: usize) -> Result<Self> {
        Self::new(epochs, epochs, 1, 2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.e_max >= self.e_min && self.e_min >= 1) {
            return Err(Error::Config(format!(
                "epoch schedule needs e_max >= e_min >= 1, got {} / {}",
                self.e_max, self.e_min
            )));
        }
        if !(self.t_beta > self.t_alpha && self.t_alpha >= 1) {
            return Err(Error::Config(format!(
                "epoch schedule needs t_beta > t_alpha >= 1, got {} / {}",
                self.t_beta, self.t_alpha
            )));
        }
        Ok(())
    }
}

/// Local epochs for round `t`; rounds below 1 are treated as round 1.
pub fn epochs_at(cfg: &EpochScheduleConfig, t: usize) -> usize {
    if t <= cfg.t_alpha {
        cfg.e_max
    } else if t <= cfg.t_beta {
        // Integer division is the floor of a non-negative rational.
        let drop = (cfg.e_max - cfg.e_min) * (t - cfg.t_alpha) / (cfg.t_beta - cfg.t_alpha);
        cfg.e_max - drop
    } else {
        cfg.e_min
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaScheduleConfig {
    pub m: f64,
    pub epsilon: f64,
}

impl LambdaScheduleConfig {
    pub fn new(m: f64, epsilon: f64) -> Result<Self> {
        let cfg = LambdaScheduleConfig { m, epsilon };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.m > 0.0 && self.m.is_finite()) {
            return Err(Error::Config(format!(
                "lambda steepness m = {} must be positive",
                self.m
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config(format!(
                "lambda cutoff epsilon = {} must lie in (0, 0.5)",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// `(lambda_c, lambda_dis)` for round `t`. Both cutoffs fire together, and
/// the pair sums to one up to rounding.
pub fn lambdas_at(cfg: &LambdaScheduleConfig, t: usize) -> (f64, f64) {
    let z = cfg.m * (t.max(1) - 1) as f64;
    let decay = (-z).exp() / (1.0 + (-z).exp());
    if decay < cfg.epsilon {
        (1.0, 0.0)
    } else {
        (1.0 - decay, decay)
    }
}
