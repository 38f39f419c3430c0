//! Adam over parameter groups, staircase learning-rate decay and global-norm
//! gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Group, Params};

/// `base * decay_rate ^ floor(step / decay_steps)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub decay_rate: f64,
    pub decay_steps: u64,
}

impl LrSchedule {
    pub fn new(base: f64, decay_rate: f64, decay_steps: u64) -> Result<Self> {
        if decay_steps == 0 {
            return Err(Error::Config("decay_steps must be >= 1".into()));
        }
        if !(base > 0.0) || !(decay_rate > 0.0) {
            return Err(Error::Config("learning rate and decay rate must be positive".into()));
        }
        Ok(LrSchedule {
            base,
            decay_rate,
            decay_steps,
        })
    }

    pub fn rate(&self, step: u64) -> f64 {
        self.base * self.decay_rate.powi((step / self.decay_steps) as i32)
    }
}

/// Adam restricted to a fixed set of groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub groups: Vec<Group>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Params,
    pub v: Params,
}

impl Adam {
    pub fn new(params: &Params, groups: &[Group]) -> Self {
        Adam {
            groups: groups.to_vec(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One update of the owned groups with learning rate `lr`.
    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let groups = &self.groups;
        let p_all = params.tensors_mut();
        let g_all = grads.tensors();
        let m_all = self.m.tensors_mut();
        let v_all = self.v.tensors_mut();
        for (((p, g), m), v) in p_all.into_iter().zip(g_all).zip(m_all).zip(v_all) {
            if !groups.contains(&p.group) {
                continue;
            }
            debug_assert_eq!(p.name, g.name);
            for (((x, &gr), mi), vi) in p.data.iter_mut().zip(g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gr;
                *vi = b2 * *vi + (1.0 - b2) * gr * gr;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Rescales the gradient of `groups` to global norm at most `max_norm` and
/// returns the norm before clipping. `max_norm <= 0` disables clipping.
pub fn clip_global_norm(grads: &mut Params, groups: &[Group], max_norm: f64) -> f64 {
    let norm = grads.squared_norm(groups).sqrt();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(groups, max_norm / norm);
    }
    norm
}
