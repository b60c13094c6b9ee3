//! Objective functions and their analytic gradients.
//!
//! Cross-entropy and generalized cross-entropy operate on raw logits
//! (softmax is folded in for numerical stability). The cosine constraint
//! losses act on flattened layer parameter vectors; only the debiased
//! model's side receives a gradient.

use crate::error::{Error, Result};
use crate::linalg::{cosine, dot, norm, Matrix};

/// Loss hyperparameters: GCE exponent and constraint strength.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// GCE exponent, in (0, 1].
    pub q: f64,
    /// Cosine constraint strength, >= 0.
    pub lambda_c: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { q: 0.7, lambda_c: 0.1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::Config(format!("q must be in (0, 1], got {}", self.q)));
        }
        if !(self.lambda_c >= 0.0) {
            return Err(Error::Config(format!(
                "lambda_c must be >= 0, got {}",
                self.lambda_c
            )));
        }
        Ok(())
    }
}

/// Per-layer cosine constraint variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintMode {
    /// No constraint on this layer.
    None,
    /// Pull cosine toward +1: loss `lambda * (1 - s)`.
    Similarity,
    /// Push cosine toward -1: loss `lambda * (1 + s)`.
    Dissimilarity,
    /// Pull cosine toward 0: loss `lambda * s^2`.
    Orthogonality,
}

impl std::fmt::Display for ConstraintMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ConstraintMode::None => "none",
            ConstraintMode::Similarity => "sim",
            ConstraintMode::Dissimilarity => "dissim",
            ConstraintMode::Orthogonality => "orth",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ConstraintMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ConstraintMode::None),
            "sim" | "similarity" => Ok(ConstraintMode::Similarity),
            "dissim" | "dissimilarity" => Ok(ConstraintMode::Dissimilarity),
            "orth" | "orthogonality" => Ok(ConstraintMode::Orthogonality),
            other => Err(Error::Config(format!("unknown constraint mode '{other}'"))),
        }
    }
}

fn check_labels(logits: &Matrix, y: &[usize]) -> Result<()> {
    if y.len() != logits.rows() {
        return Err(Error::shape(
            "labels",
            format!("{} labels for {} logit rows", y.len(), logits.rows()),
        ));
    }
    let classes = logits.cols();
    for &label in y {
        if label >= classes {
            return Err(Error::LabelRange { label, classes });
        }
    }
    Ok(())
}

/// Row-wise softmax probabilities, max-shifted for stability.
pub fn softmax_probs(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for i in 0..p.rows() {
        let row = p.row_mut(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    p
}

/// Per-sample cross-entropy `-log p_y` without gradients.
pub fn ce_per_sample(logits: &Matrix, y: &[usize]) -> Result<Vec<f64>> {
    check_labels(logits, y)?;
    let mut losses = Vec::with_capacity(y.len());
    for (i, &label) in y.iter().enumerate() {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        losses.push(m + lse - row[label]);
    }
    Ok(losses)
}

/// Softmax cross-entropy with mean-reduction gradient:
/// `dlogits[i] = (p_i - onehot(y_i)) / batch`.
pub fn softmax_ce(logits: &Matrix, y: &[usize]) -> Result<(Vec<f64>, Matrix)> {
    let losses = ce_per_sample(logits, y)?;
    let batch = y.len() as f64;
    let mut dlogits = softmax_probs(logits);
    for (i, &label) in y.iter().enumerate() {
        let row = dlogits.row_mut(i);
        row[label] -= 1.0;
        for v in row.iter_mut() {
            *v /= batch;
        }
    }
    Ok((losses, dlogits))
}

/// Difficulty-weighted cross-entropy, `mean_i w_i * CE_i`. Returns the
/// per-sample weighted losses and the mean-reduction gradient.
pub fn weighted_softmax_ce(
    logits: &Matrix,
    y: &[usize],
    weights: &[f64],
) -> Result<(Vec<f64>, Matrix)> {
    check_labels(logits, y)?;
    if weights.len() != y.len() {
        return Err(Error::shape(
            "weighted_softmax_ce",
            format!("{} weights for {} samples", weights.len(), y.len()),
        ));
    }
    let ce = ce_per_sample(logits, y)?;
    let losses: Vec<f64> = ce.iter().zip(weights).map(|(l, w)| l * w).collect();
    let batch = y.len() as f64;
    let mut dlogits = softmax_probs(logits);
    for (i, &label) in y.iter().enumerate() {
        let w = weights[i];
        let row = dlogits.row_mut(i);
        row[label] -= 1.0;
        // Multiply by w before dividing so w == 1 reproduces the plain CE
        // gradient bit-exactly for any batch size.
        for v in row.iter_mut() {
            *v = *v * w / batch;
        }
    }
    Ok((losses, dlogits))
}

/// Generalized cross-entropy `(1 - p_y^q) / q` with its gradient identity:
/// the per-sample gradient equals `p_y^q` times the cross-entropy gradient.
pub fn gce(logits: &Matrix, y: &[usize], q: f64) -> Result<(Vec<f64>, Matrix)> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Config(format!("q must be in (0, 1], got {q}")));
    }
    check_labels(logits, y)?;
    let probs = softmax_probs(logits);
    let batch = y.len() as f64;
    let mut losses = Vec::with_capacity(y.len());
    let mut dlogits = probs.clone();
    for (i, &label) in y.iter().enumerate() {
        let p_y = probs.get(i, label);
        let p_y_q = p_y.powf(q);
        losses.push((1.0 - p_y_q) / q);
        let row = dlogits.row_mut(i);
        row[label] -= 1.0;
        for v in row.iter_mut() {
            *v *= p_y_q / batch;
        }
    }
    Ok((losses, dlogits))
}

/// Relative difficulty score `ce_b / (ce_b + ce_d)`.
///
/// Returns 0.5 when both losses are effectively zero. The branch below
/// keeps `W(a, b) + W(b, a) == 1` exact in floating point.
pub fn difficulty_weight(ce_b: f64, ce_d: f64) -> Result<f64> {
    if ce_b < 0.0 || ce_d < 0.0 {
        return Err(Error::Domain(format!(
            "difficulty_weight needs non-negative losses, got ({ce_b}, {ce_d})"
        )));
    }
    let sum = ce_b + ce_d;
    if sum < 1e-12 {
        return Ok(0.5);
    }
    if ce_b <= ce_d {
        Ok(ce_b / sum)
    } else {
        Ok(1.0 - ce_d / sum)
    }
}

/// Cosine constraint loss between the debiased model's layer `theta_d`
/// and the bias model's layer `theta_b` (treated as constant), scaled by
/// `lambda`. Returns the loss and the gradient w.r.t. `theta_d`.
pub fn constraint_loss(
    mode: ConstraintMode,
    theta_d: &[f64],
    theta_b: &[f64],
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    if mode == ConstraintMode::None {
        return Ok((0.0, vec![0.0; theta_d.len()]));
    }
    if theta_d.len() != theta_b.len() {
        return Err(Error::shape(
            "constraint_loss",
            format!("lengths {} vs {}", theta_d.len(), theta_b.len()),
        ));
    }
    let s = cosine(theta_d, theta_b)?;
    let nu = norm(theta_d);
    let nv = norm(theta_b);
    let d = dot(theta_d, theta_b);
    // ds/du_i = v_i / (|u||v|) - (u.v) u_i / (|u|^3 |v|)
    let inv_uv = 1.0 / (nu * nv);
    let coef_u = d / (nu * nu * nu * nv);
    let scale = match mode {
        ConstraintMode::None => unreachable!(),
        ConstraintMode::Similarity => -lambda,
        ConstraintMode::Dissimilarity => lambda,
        ConstraintMode::Orthogonality => 2.0 * lambda * s,
    };
    let grad: Vec<f64> = theta_d
        .iter()
        .zip(theta_b)
        .map(|(&u, &v)| scale * (v * inv_uv - coef_u * u))
        .collect();
    let loss = match mode {
        ConstraintMode::None => unreachable!(),
        ConstraintMode::Similarity => lambda * (1.0 - s),
        ConstraintMode::Dissimilarity => lambda * (1.0 + s),
        ConstraintMode::Orthogonality => lambda * s * s,
    };
    Ok((loss, grad))
}
