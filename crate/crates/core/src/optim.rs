//! AdamW with decoupled weight decay, global-norm gradient clipping and
//! moment buffers that can be saved and restored.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 norm bound on the gradient; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 6e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            max_grad_norm: Some(1.0),
        }
    }
}

/// First and second moments keyed by parameter name, plus the update count.
#[derive(Debug, Clone, Default)]
pub struct OptimState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

pub struct AdamW {
    config: AdamWConfig,
    vars: Vec<(String, Var)>,
    state: OptimState,
}

impl AdamW {
    pub fn new(vars: Vec<(String, Var)>, config: AdamWConfig) -> Result<Self> {
        let mut state = OptimState::default();
        for (name, var) in &vars {
            state.m.insert(name.clone(), var.zeros_like()?);
            state.v.insert(name.clone(), var.zeros_like()?);
        }
        Ok(Self {
            config,
            vars,
            state,
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn state(&self) -> &OptimState {
        &self.state
    }

    /// Replaces the moments; every parameter needs a matching pair.
    pub fn load_state(&mut self, state: OptimState) -> Result<()> {
        for (name, var) in &self.vars {
            for (kind, map) in [("m", &state.m), ("v", &state.v)] {
                let t = map
                    .get(name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer {kind} for `{name}`")))?;
                if t.dims() != var.dims() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer {kind} for `{name}` has shape {:?}, parameter has {:?}",
                        t.dims(),
                        var.dims()
                    )));
                }
            }
        }
        let cast = |map: BTreeMap<String, Tensor>| -> Result<BTreeMap<String, Tensor>> {
            self.vars
                .iter()
                .map(|(n, v)| Ok((n.clone(), map[n].to_dtype(v.dtype())?.to_device(v.device())?)))
                .collect()
        };
        self.state = OptimState {
            step: state.step,
            m: cast(state.m)?,
            v: cast(state.v)?,
        };
        Ok(())
    }

    /// Global L2 norm over every parameter gradient present in `grads`.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for (_, var) in &self.vars {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    /// Applies one update and returns the pre-clip gradient norm.
    pub fn step(&mut self, grads: &GradStore) -> Result<f64> {
        let c = self.config;
        let norm = self.grad_norm(grads)?;
        if !norm.is_finite() {
            return Err(Error::InvalidRange(format!("gradient norm is {norm}")));
        }
        let scale = match c.max_grad_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, var) in &self.vars {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.affine(scale, 0.0)?;
            let m = self.state.m.get_mut(name).expect("moments exist for every var");
            *m = (m.affine(c.beta1, 0.0)? + g.affine(1.0 - c.beta1, 0.0)?)?;
            let v = self.state.v.get_mut(name).expect("moments exist for every var");
            *v = (v.affine(c.beta2, 0.0)? + g.sqr()?.affine(1.0 - c.beta2, 0.0)?)?;
            let m_hat = self.state.m[name].affine(1.0 / bc1, 0.0)?;
            let v_hat = self.state.v[name].affine(1.0 / bc2, 0.0)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            let decayed = var.as_tensor().affine(1.0 - c.lr * c.weight_decay, 0.0)?;
            var.set(&(decayed - update.affine(c.lr, 0.0)?)?)?;
        }
        Ok(norm)
    }
}
