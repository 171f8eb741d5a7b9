use serde::{Deserialize, Serialize};

use super::{Gradients, ParamSet, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments. The moment buffers mirror the parameter
/// layout and are persisted in checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        Self {
            config,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) -> Result<(), TensorError> {
        self.t += 1;
        adam_step(params, grads, &mut self.m, &mut self.v, &self.config, self.t)
    }
}

/// One Adam update at step `t` (1-based).
pub fn adam_step(
    params: &mut ParamSet,
    grads: &Gradients,
    m: &mut ParamSet,
    v: &mut ParamSet,
    cfg: &AdamConfig,
    t: u64,
) -> Result<(), TensorError> {
    if t == 0 {
        return Err(TensorError::InvalidStepCount);
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (name, p) in params.iter_mut() {
        let g = grads.require(name)?;
        if g.dims() != p.dims() {
            return Err(TensorError::ShapeMismatch {
                context: format!("adam `{name}`"),
                left: p.dims().to_vec(),
                right: g.dims().to_vec(),
            });
        }
        let m = m.get_mut(name).ok_or_else(|| TensorError::UnboundParam(name.into()))?;
        let v = v.get_mut(name).ok_or_else(|| TensorError::UnboundParam(name.into()))?;
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Rescale `grads` so their global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}
