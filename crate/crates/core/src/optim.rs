//! Parameter updates: plain gradient descent and bias-corrected Adam.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GradientMap;
use crate::params::ModelParams;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct OptimizerState<T: Real> {
    kind: OptimizerKind,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
    step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        Self { kind, moments: BTreeMap::new(), step: 0 }
    }

    pub fn sgd() -> Self {
        Self::new(OptimizerKind::Sgd)
    }

    pub fn adam() -> Self {
        Self::new(OptimizerKind::Adam)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. Parameters without a gradient entry are
    /// left untouched.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &GradientMap<T>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient for `{name}` has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let lr_t = T::from_f64_lossy(lr);
        match self.kind {
            OptimizerKind::Sgd => {
                for (name, g) in grads {
                    let p = params.get_mut(name).expect("checked above");
                    for (v, &gv) in p.values_mut().iter_mut().zip(g.values()) {
                        *v = *v - lr_t * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let bc1 = 1.0 - ADAM_BETA1.powi(t);
                let bc2 = 1.0 - ADAM_BETA2.powi(t);
                let (b1, b2) = (T::from_f64_lossy(ADAM_BETA1), T::from_f64_lossy(ADAM_BETA2));
                let one = T::one();
                for (name, g) in grads {
                    let p = params.get_mut(name).expect("checked above");
                    let (m, v) = self
                        .moments
                        .entry(name.clone())
                        .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
                    for (((pv, &gv), mv), vv) in
                        p.values_mut().iter_mut().zip(g.values()).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        *mv = b1 * *mv + (one - b1) * gv;
                        *vv = b2 * *vv + (one - b2) * gv * gv;
                        let mhat = mv.as_f64() / bc1;
                        let vhat = vv.as_f64() / bc2;
                        *pv = *pv - T::from_f64_lossy(lr * mhat / (vhat.sqrt() + ADAM_EPS));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Functional form: returns the updated parameters, leaving `params` as-is.
pub fn optimizer_step<T: Real>(
    params: &ModelParams<T>,
    grads: &GradientMap<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<ModelParams<T>> {
    let mut next = params.clone();
    state.step(&mut next, grads, lr)?;
    Ok(next)
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut GradientMap<T>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.values().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = T::from_f64_lossy(max_norm / norm);
        for g in grads.values_mut() {
            g.values_mut().iter_mut().for_each(|v| *v = *v * k);
        }
    }
    norm
}
