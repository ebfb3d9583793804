//! Momentum SGD and the decoupled-weight-decay adaptive optimizer.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::ParamCollection;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    MomentumSgd,
    AdaptiveDecoupledDecay,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    learning_rate: f64,
    momentum: f64,
    weight_decay: f64,
    /// Momentum buffer (SGD) or first moment (adaptive).
    first: Vec<Tensor>,
    /// Second moment; unused by SGD.
    second: Vec<Tensor>,
    steps: u64,
}

impl OptimizerState {
    pub fn momentum_sgd(learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} outside [0, 1)")));
        }
        Self::new(
            OptimizerKind::MomentumSgd,
            learning_rate,
            momentum,
            weight_decay,
        )
    }

    pub fn adaptive(learning_rate: f64, weight_decay: f64) -> Result<Self> {
        Self::new(
            OptimizerKind::AdaptiveDecoupledDecay,
            learning_rate,
            0.0,
            weight_decay,
        )
    }

    fn new(
        kind: OptimizerKind,
        learning_rate: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {learning_rate} must be positive"
            )));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay {weight_decay} must be non-negative"
            )));
        }
        Ok(OptimizerState {
            kind,
            learning_rate,
            momentum,
            weight_decay,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn buffers(&self) -> &[Tensor] {
        &self.first
    }

    /// Fresh state with identical hyper-parameters.
    pub fn reset(&self) -> Self {
        OptimizerState {
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
            ..self.clone()
        }
    }

    pub fn step<P: ParamCollection + ?Sized>(
        &mut self,
        params: &mut P,
        grads: &[Tensor],
    ) -> Result<()> {
        match self.kind {
            OptimizerKind::MomentumSgd => self.sgd_momentum_step(params, grads),
            OptimizerKind::AdaptiveDecoupledDecay => self.adaptive_step(params, grads),
        }
    }

    fn prepare(&mut self, params: &[&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if !p.same_shape(g) {
                return Err(Error::Dimension(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            if self.kind == OptimizerKind::AdaptiveDecoupledDecay {
                self.second = self.first.clone();
            }
        } else if self.first.len() != params.len()
            || self.first.iter().zip(params).any(|(b, p)| !b.same_shape(p))
        {
            return Err(Error::Dimension(
                "optimizer state does not match parameter collection".into(),
            ));
        }
        Ok(())
    }

    /// `buf <- rho*buf + g + wd*p; p <- p - lr*buf`
    pub fn sgd_momentum_step<P: ParamCollection + ?Sized>(
        &mut self,
        params: &mut P,
        grads: &[Tensor],
    ) -> Result<()> {
        if self.kind != OptimizerKind::MomentumSgd {
            return Err(Error::Config("sgd step on an adaptive optimizer".into()));
        }
        let mut slots = params.tensors_mut();
        self.prepare(&slots, grads)?;
        let (lr, rho, wd) = (self.learning_rate, self.momentum, self.weight_decay);
        for ((p, g), buf) in slots.iter_mut().zip(grads).zip(&mut self.first) {
            for ((pv, gv), bv) in p.data_mut().iter_mut().zip(g.data()).zip(buf.data_mut()) {
                *bv = rho * *bv + gv + wd * *pv;
                *pv -= lr * *bv;
            }
        }
        self.steps += 1;
        Ok(())
    }

    /// Bias-corrected first/second moments; decay applied to the parameter
    /// directly (`p <- p - lr*wd*p`) before the adaptive update.
    pub fn adaptive_step<P: ParamCollection + ?Sized>(
        &mut self,
        params: &mut P,
        grads: &[Tensor],
    ) -> Result<()> {
        if self.kind != OptimizerKind::AdaptiveDecoupledDecay {
            return Err(Error::Config("adaptive step on an SGD optimizer".into()));
        }
        let mut slots = params.tensors_mut();
        self.prepare(&slots, grads)?;
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let (lr, wd) = (self.learning_rate, self.weight_decay);
        for (((p, g), m), v) in slots
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *pv -= lr * wd * *pv;
                *pv -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}
