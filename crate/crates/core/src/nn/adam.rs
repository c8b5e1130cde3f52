//! Bias-corrected Adam.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::params::Params;
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    /// Step size. Default 0.001.
    pub lr: f64,
    /// Default 0.9.
    pub beta1: f64,
    /// Default 0.999.
    pub beta2: f64,
    /// Default 1e-8.
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment accumulators laid out like the parameters they track.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Real> {
    pub m: Vec<ArrayD<T>>,
    pub v: Vec<ArrayD<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new<P: Params<T>>(params: &P) -> Self {
        let shapes: Vec<Vec<usize>> = params.tensors().iter().map(|(_, t)| t.shape().to_vec()).collect();
        AdamState {
            m: shapes.iter().map(|s| ArrayD::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| ArrayD::zeros(s.clone())).collect(),
            step: 0,
        }
    }
}

/// One update. A non-finite gradient rejects the whole step and leaves
/// parameters and state untouched.
pub fn adam_step<T: Real, P: Params<T>>(params: &mut P, grads: &P, state: &mut AdamState<T>, cfg: &AdamConfig) -> Result<()> {
    let g = grads.tensors();
    for (name, t) in &g {
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in {name}")));
        }
    }
    let mut p = params.tensors_mut();
    if p.len() != g.len() || p.len() != state.m.len() {
        return Err(Error::shape("optimizer state does not match parameter layout"));
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powf(t));
    let c2 = T::of(1.0 - cfg.beta2.powf(t));
    let lr = T::of(cfg.lr);
    let eps = T::of(cfg.eps);
    let one = T::one();
    for (i, ((_, pt), (_, gt))) in p.iter_mut().zip(g.iter()).enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for (((pv, &gv), mv), vv) in pt.iter_mut().zip(gt.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let mhat = *mv / c1;
            let vhat = *vv / c2;
            *pv -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
