//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Moments are indexed like the parameter list handed to
/// [`adamw_step`]; frozen entries have none.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub step: u64,
    pub moments: Vec<Option<Moments>>,
}

impl OptimState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Multiplier on the base learning rate at zero-based `step` of `total`.
pub fn cosine_factor(step: u64, total: u64) -> f64 {
    if total == 0 {
        return 1.0;
    }
    let t = step.min(total) as f64 / total as f64;
    0.5 * (1.0 + (PI * t).cos())
}

/// One AdamW update of every parameter with `requires_grad`.
///
/// Decay is applied only to tensors with two or more axes, i.e. weight
/// matrices and expert pools, never to biases or norm gains.
pub fn adamw_step(params: &mut [&mut Tensor], st: &mut OptimState, cfg: &AdamWConfig, lr_factor: f64) -> Result<()> {
    if st.moments.len() < params.len() {
        st.moments.resize(params.len(), None);
    }
    for (i, p) in params.iter().enumerate() {
        if p.requires_grad && p.grad.as_ref().map(|g| g.len()) != Some(p.len()) {
            return Err(Error::Usage(format!("trainable parameter {i} has no gradient")));
        }
    }
    st.step += 1;
    let t = st.step as i32;
    let lr = cfg.lr * lr_factor;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (p, slot) in params.iter_mut().zip(st.moments.iter_mut()) {
        if !p.requires_grad {
            continue;
        }
        let n = p.len();
        let mo = slot.get_or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        let decay = if p.ndim() >= 2 { cfg.weight_decay } else { 0.0 };
        let g = p.grad.take().unwrap();
        let data = p.data_mut();
        for j in 0..n {
            mo.m[j] = cfg.beta1 * mo.m[j] + (1.0 - cfg.beta1) * g[j];
            mo.v[j] = cfg.beta2 * mo.v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mhat = mo.m[j] / bc1;
            let vhat = mo.v[j] / bc2;
            data[j] -= lr * (mhat / (vhat.sqrt() + cfg.eps) + decay * data[j]);
        }
        p.grad = Some(g);
    }
    Ok(())
}
