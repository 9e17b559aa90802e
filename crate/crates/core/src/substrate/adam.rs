use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{shape_err, Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the joint gradient to this global L2 norm when exceeded.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moments per parameter, indexed like the store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(&p.value.shape))
                .collect::<Vec<_>>()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Applied { grad_norm: f64 },
    Skipped { reason: String },
}

impl StepOutcome {
    pub fn applied(&self) -> bool {
        matches!(self, StepOutcome::Applied { .. })
    }
}

/// One bias-corrected Adam update. Parameters absent from `grads` or frozen
/// are left alone. A non-finite gradient skips the whole step.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[(ParamId, Tensor<T>)],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<StepOutcome> {
    if state.m.len() != store.len() || state.v.len() != store.len() {
        return shape_err("optimizer state does not match the parameter store");
    }
    let mut sq = 0.0;
    for (id, g) in grads {
        if !store.owns(*id) {
            return Err(Error::InvalidInput("gradient for a parameter of another model".into()));
        }
        let p = store.get(*id);
        if g.shape != p.value.shape || state.m[id.index()].shape != p.value.shape {
            return shape_err(format!("gradient shape {:?} for parameter {}", g.shape, p.name));
        }
        if !g.is_finite() {
            return Ok(StepOutcome::Skipped {
                reason: format!("non-finite gradient for {}", p.name),
            });
        }
        sq += g.data.iter().map(|v| v.f64() * v.f64()).sum::<f64>();
    }
    let grad_norm = sq.sqrt();
    let scale = match cfg.clip_norm {
        Some(c) if grad_norm > c => c / grad_norm,
        _ => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (id, g) in grads {
        if !store.get(*id).trainable {
            continue;
        }
        let (m, v) = (&mut state.m[id.index()].data, &mut state.v[id.index()].data);
        let w = &mut store.get_mut(*id).value.data;
        for i in 0..w.len() {
            let gi = g.data[i].f64() * scale;
            let mi = cfg.beta1 * m[i].f64() + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v[i].f64() + (1.0 - cfg.beta2) * gi * gi;
            m[i] = T::of(mi);
            v[i] = T::of(vi);
            let update = cfg.lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
            w[i] = T::of(w[i].f64() - update);
        }
    }
    Ok(StepOutcome::Applied { grad_norm })
}
