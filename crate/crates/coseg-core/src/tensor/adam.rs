//! Adam optimizer with bias correction.

use std::collections::HashMap;

use super::{Element, Tensor};
use crate::error::{CosegError, Result};

/// Hyperparameters. The default learning rate is deliberately small; training
/// runs usually override it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers of one parameter.
#[derive(Debug, Clone)]
pub struct MomentSlot<E> {
    pub m: Vec<E>,
    pub v: Vec<E>,
}

/// Per-parameter moment state plus the shared step counter.
#[derive(Debug, Clone)]
pub struct Adam<E> {
    pub hyper: AdamHyper,
    step: u64,
    slots: HashMap<String, MomentSlot<E>>,
}

impl<E: Element> Adam<E> {
    pub fn new(hyper: AdamHyper) -> Self {
        Adam {
            hyper,
            step: 0,
            slots: HashMap::new(),
        }
    }

    /// Steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Starts a new optimization step: bumps the shared counter that drives
    /// bias correction. Call once per batch, before the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Applies one Adam update to a named parameter. The moment buffers are
    /// created lazily and keyed by name; shapes must stay consistent.
    pub fn update(&mut self, name: &str, param: &mut Tensor<E>, grad: &Tensor<E>) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(CosegError::shape_mismatch(
                "adam_step",
                param.shape(),
                grad.shape(),
            ));
        }
        if self.step == 0 {
            return Err(CosegError::invalid(
                "adam_step",
                "call begin_step() before update()",
            ));
        }
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| MomentSlot {
            m: vec![E::zero(); param.numel()],
            v: vec![E::zero(); param.numel()],
        });
        if slot.m.len() != param.numel() {
            return Err(CosegError::invalid(
                "adam_step",
                format!(
                    "moment buffers for {} hold {} values, parameter has {}",
                    name,
                    slot.m.len(),
                    param.numel()
                ),
            ));
        }
        let b1 = E::of_f64(self.hyper.beta1);
        let b2 = E::of_f64(self.hyper.beta2);
        let lr = E::of_f64(self.hyper.lr);
        let eps = E::of_f64(self.hyper.eps);
        let corr1 = E::of_f64(1.0 - self.hyper.beta1.powi(self.step as i32));
        let corr2 = E::of_f64(1.0 - self.hyper.beta2.powi(self.step as i32));
        let one = E::one();

        let mut new = param.data().to_vec();
        for ((p, &g), (m, v)) in new
            .iter_mut()
            .zip(grad.data())
            .zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / corr1;
            let v_hat = *v / corr2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
        *param = Tensor::from_parts(param.shape().to_vec(), new);
        Ok(())
    }

    /// Moment buffers of a parameter, if it has been updated at least once.
    pub fn slot(&self, name: &str) -> Option<&MomentSlot<E>> {
        self.slots.get(name)
    }

    /// Restores previously saved state (used by checkpoint loading).
    pub fn restore(hyper: AdamHyper, step: u64, slots: HashMap<String, MomentSlot<E>>) -> Self {
        Adam { hyper, step, slots }
    }
}
