use serde::{Deserialize, Serialize};

use super::{check_shape, Param, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// Linear ramp from 0 at step 0 to `max_lr` at `warmup`, then linear
    /// decay to 0 at `total`.
    WarmupLinear { max_lr: f64, warmup: u64, total: u64 },
}

impl LrSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::WarmupLinear { max_lr, warmup, total } => {
                if step < warmup {
                    max_lr * step as f64 / warmup as f64
                } else if step >= total {
                    0.0
                } else if total == warmup {
                    max_lr
                } else {
                    max_lr * (total - step) as f64 / (total - warmup) as f64
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LrSchedule::Constant { lr } => lr.is_finite() && lr >= 0.0,
            LrSchedule::WarmupLinear { max_lr, warmup, total } => {
                max_lr.is_finite() && max_lr >= 0.0 && warmup <= total && total > 0
            }
        };
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid schedule {self:?}")));
        }
        Ok(())
    }
}

pub trait Optimizer<T: Scalar> {
    /// Apply one update from the accumulated gradients. The parameter list
    /// must come in the same order on every call.
    fn step(&mut self, params: &mut [&mut Param<T>]) -> Result<()>;

    /// Updates applied so far.
    fn steps(&self) -> u64;

    /// Learning rate the next update will use.
    fn current_lr(&self) -> f64;
}

fn init_moments<T: Scalar>(slot: &mut Vec<Tensor<T>>, params: &[&mut Param<T>]) -> Result<()> {
    if slot.is_empty() {
        *slot = params.iter().map(|p| Tensor::zeros(p.value.raw_dim())).collect();
    }
    if slot.len() != params.len() {
        return Err(Error::Shape(format!(
            "optimizer tracks {} tensors, got {}",
            slot.len(),
            params.len()
        )));
    }
    for (i, (m, p)) in slot.iter().zip(params).enumerate() {
        check_shape(m.shape(), p.value.shape(), &format!("optimizer moment {i}"))?;
        check_shape(p.grad.shape(), p.value.shape(), &format!("gradient {i}"))?;
    }
    Ok(())
}

/// Adam with an infinity-norm second moment.
#[derive(Debug, Clone)]
pub struct Adamax<T: Scalar> {
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor<T>>,
    u: Vec<Tensor<T>>,
}

impl<T: Scalar> Adamax<T> {
    pub fn new(lr: f64) -> Self {
        Self::with_schedule(LrSchedule::Constant { lr })
    }

    pub fn with_schedule(schedule: LrSchedule) -> Self {
        Self {
            schedule,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
            t: 0,
            m: Vec::new(),
            u: Vec::new(),
        }
    }
}

impl<T: Scalar> Optimizer<T> for Adamax<T> {
    fn step(&mut self, params: &mut [&mut Param<T>]) -> Result<()> {
        init_moments(&mut self.m, params)?;
        init_moments(&mut self.u, params)?;
        let lr = self.schedule.lr(self.t);
        self.t += 1;
        let rate = T::of(lr / (1.0 - self.beta1.powi(self.t as i32)));
        let (b1, b2, eps) = (T::of(self.beta1), T::of(self.beta2), T::of(self.eps));
        for ((p, m), u) in params.iter_mut().zip(&mut self.m).zip(&mut self.u) {
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(u)
                .for_each(|w, &g, m, u| {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *u = (b2 * *u).max(g.abs());
                    *w = *w - rate * *m / (*u + eps);
                });
        }
        Ok(())
    }

    fn steps(&self) -> u64 {
        self.t
    }

    fn current_lr(&self) -> f64 {
        self.schedule.lr(self.t)
    }
}

/// Adam with decoupled weight decay on parameters flagged for decay.
#[derive(Debug, Clone)]
pub struct AdamW<T: Scalar> {
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(schedule: LrSchedule) -> Self {
        Self {
            schedule,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl<T: Scalar> Optimizer<T> for AdamW<T> {
    fn step(&mut self, params: &mut [&mut Param<T>]) -> Result<()> {
        init_moments(&mut self.m, params)?;
        init_moments(&mut self.v, params)?;
        let lr = self.schedule.lr(self.t);
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (T::of(self.beta1), T::of(self.beta2), T::of(self.eps));
        let (lr_t, c1, c2) = (T::of(lr), T::of(c1), T::of(c2));
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let shrink = if p.decay {
                T::one() - T::of(lr * self.weight_decay)
            } else {
                T::one()
            };
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *w = *w * shrink;
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    *w = *w - lr_t * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
        Ok(())
    }

    fn steps(&self) -> u64 {
        self.t
    }

    fn current_lr(&self) -> f64 {
        self.schedule.lr(self.t)
    }
}
