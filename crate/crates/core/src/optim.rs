//! Parameter update rules.
//!
//! The main task losses step through Adam (or plain SGD). The per-layer
//! constraint update deliberately bypasses the optimizer: it is a bare
//! gradient step on one layer, so no momentum can leak into frozen layers
//! and the moment accumulators never see the constraint gradient.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mlp::{GradientSet, MlpModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    /// Learning rate.
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub kind: OptimKind,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            eta: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            kind: OptimKind::Adam,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::Config(format!("eta must be > 0, got {}", self.eta)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First/second moment accumulators mirroring a model's layers.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<LayerMoments>,
    v: Vec<LayerMoments>,
    t: u64,
}

#[derive(Debug, Clone)]
struct LayerMoments {
    w: Matrix,
    b: Vec<f64>,
}

impl AdamState {
    pub fn new(model: &MlpModel) -> Self {
        let zero = |_: usize| -> Vec<LayerMoments> {
            model
                .layers()
                .iter()
                .map(|l| LayerMoments {
                    w: Matrix::zeros(l.out_dim(), l.in_dim()),
                    b: vec![0.0; l.out_dim()],
                })
                .collect()
        };
        AdamState {
            m: zero(0),
            v: zero(1),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    fn matches(&self, model: &MlpModel) -> bool {
        self.m.len() == model.layer_count()
            && self.m.iter().zip(model.layers()).all(|(s, l)| {
                s.w.rows() == l.out_dim() && s.w.cols() == l.in_dim() && s.b.len() == l.out_dim()
            })
    }

    /// Bit-pattern hash of all accumulators, for leak checks.
    pub fn digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.t.hash(&mut h);
        for set in [&self.m, &self.v] {
            for lm in set {
                for x in lm.w.as_slice() {
                    x.to_bits().hash(&mut h);
                }
                for x in &lm.b {
                    x.to_bits().hash(&mut h);
                }
            }
        }
        h.finish()
    }
}

/// Applies one optimizer step in place. `state.t` advances once per call
/// for both kinds.
pub fn step(
    model: &mut MlpModel,
    grads: &GradientSet,
    state: &mut AdamState,
    cfg: &OptimConfig,
) -> Result<()> {
    if !grads.matches(model) || !state.matches(model) {
        return Err(Error::shape(
            "optim_step",
            "gradient or state shapes do not mirror the model",
        ));
    }
    state.t += 1;
    match cfg.kind {
        OptimKind::Sgd => {
            for k in 0..model.layer_count() {
                let g = &grads.layers[k];
                let layer = model.layer_mut(k)?;
                for (w, gw) in layer
                    .weight
                    .as_mut_slice()
                    .iter_mut()
                    .zip(g.dw.as_slice())
                {
                    *w -= cfg.eta * gw;
                }
                for (b, gb) in layer.bias.iter_mut().zip(&g.db) {
                    *b -= cfg.eta * gb;
                }
            }
        }
        OptimKind::Adam => {
            let t = state.t as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            for k in 0..model.layer_count() {
                let g = &grads.layers[k];
                let m = &mut state.m[k];
                let v = &mut state.v[k];
                {
                    let layer = model.layer_mut(k)?;
                    adam_update(
                        layer.weight.as_mut_slice(),
                        g.dw.as_slice(),
                        m.w.as_mut_slice(),
                        v.w.as_mut_slice(),
                        cfg,
                        bc1,
                        bc2,
                    );
                    adam_update(&mut layer.bias, &g.db, &mut m.b, &mut v.b, cfg, bc1, bc2);
                }
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    cfg: &OptimConfig,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= cfg.eta * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Plain gradient descent on layer `k` only. Whether the gradient covers
/// the bias is inferred from its length. Every other parameter stays
/// bit-identical and no Adam state is involved.
pub fn masked_plain_step(
    model: &mut MlpModel,
    k: usize,
    grad_k: &[f64],
    eta: f64,
) -> Result<()> {
    let layer = model.layer(k)?;
    let w_len = layer.weight().rows() * layer.weight().cols();
    let include_bias = if grad_k.len() == w_len + layer.bias().len() {
        true
    } else if grad_k.len() == w_len {
        false
    } else {
        return Err(Error::shape(
            "masked_plain_step",
            format!(
                "gradient length {} matches neither {} (weights) nor {} (weights+bias)",
                grad_k.len(),
                w_len,
                w_len + layer.bias().len()
            ),
        ));
    };
    let mut params = model.layer_params(k, include_bias)?;
    for (p, g) in params.iter_mut().zip(grad_k) {
        *p -= eta * g;
    }
    model.scatter_layer_params(k, include_bias, &params)
}
