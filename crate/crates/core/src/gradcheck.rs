//! Independent numerical gradient oracles.
//!
//! Central finite differences certify every analytic gradient path before
//! it is trusted in training. The oracle only touches models through
//! `layer_params`/`scatter_layer_params`, so it stays independent of the
//! backward implementation it checks.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::{
    constraint_loss, gce, softmax_ce, weighted_softmax_ce, ConstraintMode,
};
use crate::mlp::{GradientSet, MlpModel};
use crate::rng::Rng;

/// Outcome of comparing an analytic gradient against the oracle.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel: f64,
    pub max_abs: f64,
    /// Coordinate of the worst relative error: (layer, flat index).
    pub worst_layer: usize,
    pub worst_index: usize,
    pub tol: f64,
    pub pass: bool,
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "max_rel={:.3e} max_abs={:.3e} worst=(layer {}, index {}) {}",
            self.max_rel,
            self.max_abs,
            self.worst_layer,
            self.worst_index,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

/// Central finite differences of `loss_fn` over every model parameter.
/// The model is restored bit-exactly before returning.
pub fn finite_diff<F>(mut loss_fn: F, model: &mut MlpModel, eps: f64) -> Result<GradientSet>
where
    F: FnMut(&MlpModel) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("eps must be > 0, got {eps}")));
    }
    let mut grads = GradientSet::zeros_like(model);
    for k in 0..model.layer_count() {
        let mut params = model.layer_params(k, true)?;
        let w_len = grads.layers[k].dw.as_slice().len();
        for i in 0..params.len() {
            let orig = params[i];
            params[i] = orig + eps;
            model.scatter_layer_params(k, true, &params)?;
            let f_plus = loss_fn(model)?;
            params[i] = orig - eps;
            model.scatter_layer_params(k, true, &params)?;
            let f_minus = loss_fn(model)?;
            params[i] = orig;
            model.scatter_layer_params(k, true, &params)?;
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::Domain(format!(
                    "non-finite loss at layer {k}, coordinate {i}"
                )));
            }
            let g = (f_plus - f_minus) / (2.0 * eps);
            if i < w_len {
                grads.layers[k].dw.as_mut_slice()[i] = g;
            } else {
                grads.layers[k].db[i - w_len] = g;
            }
        }
    }
    Ok(grads)
}

/// Central differences at eps ~ 1e-5 on an O(1) loss carry ~1e-11 of
/// absolute roundoff noise. The denominator floor sits above that noise
/// floor so the relative tolerance measures genuine gradient disagreement
/// rather than oracle roundoff; absolute errors beyond `tol * REL_FLOOR`
/// are still flagged.
pub const REL_FLOOR: f64 = 1e-4;

/// Compares two gradient sets coordinate by coordinate. Relative error
/// uses a `max(|a|, |n|, REL_FLOOR)` denominator.
pub fn check(analytic: &GradientSet, numeric: &GradientSet, tol: f64) -> Result<GradReport> {
    if analytic.layers.len() != numeric.layers.len() {
        return Err(Error::shape("gradcheck", "layer count mismatch"));
    }
    let mut report = GradReport {
        max_rel: 0.0,
        max_abs: 0.0,
        worst_layer: 0,
        worst_index: 0,
        tol,
        pass: true,
    };
    for (k, (a, n)) in analytic.layers.iter().zip(&numeric.layers).enumerate() {
        if a.dw.rows() != n.dw.rows() || a.dw.cols() != n.dw.cols() || a.db.len() != n.db.len() {
            return Err(Error::shape("gradcheck", format!("layer {k} shape mismatch")));
        }
        // Flat index runs over the weights row-major, then the bias.
        let coords = a
            .dw
            .as_slice()
            .iter()
            .chain(&a.db)
            .zip(n.dw.as_slice().iter().chain(&n.db));
        for (i, (&av, &nv)) in coords.enumerate() {
            let abs = (av - nv).abs();
            let rel = abs / av.abs().max(nv.abs()).max(REL_FLOOR);
            if abs > report.max_abs {
                report.max_abs = abs;
            }
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst_layer = k;
                report.worst_index = i;
            }
        }
    }
    report.pass = report.max_rel <= tol;
    Ok(report)
}

/// One named gradient path checked by the standard suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossPath {
    CrossEntropy,
    Gce3,
    Gce7,
    Gce10,
    WeightedCrossEntropy,
    ConstraintSimilarity,
    ConstraintDissimilarity,
    ConstraintOrthogonality,
}

impl LossPath {
    pub const ALL: [LossPath; 8] = [
        LossPath::CrossEntropy,
        LossPath::Gce3,
        LossPath::Gce7,
        LossPath::Gce10,
        LossPath::WeightedCrossEntropy,
        LossPath::ConstraintSimilarity,
        LossPath::ConstraintDissimilarity,
        LossPath::ConstraintOrthogonality,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LossPath::CrossEntropy => "cross_entropy",
            LossPath::Gce3 => "gce_q0.3",
            LossPath::Gce7 => "gce_q0.7",
            LossPath::Gce10 => "gce_q1.0",
            LossPath::WeightedCrossEntropy => "weighted_cross_entropy",
            LossPath::ConstraintSimilarity => "constraint_sim",
            LossPath::ConstraintDissimilarity => "constraint_dissim",
            LossPath::ConstraintOrthogonality => "constraint_orth",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub nets: usize,
    pub eps: f64,
    pub tol: f64,
    pub seed: u64,
    pub max_layers: usize,
    pub max_dim: usize,
    /// Fault-injection self-test: flips the sign of one analytic gradient
    /// coordinate so the suite must report a failure.
    pub inject_sign_flip: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            nets: 100,
            eps: 1e-5,
            tol: 1e-6,
            seed: 7,
            max_layers: 4,
            max_dim: 16,
            inject_sign_flip: false,
        }
    }
}

/// Aggregated result per loss path over all random nets.
#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub path: LossPath,
    pub report: GradReport,
}

/// Rectifier kink guard: a preactivation within the finite-difference
/// perturbation of zero makes the oracle cross the kink and disagree with
/// the analytic gradient for reasons unrelated to correctness. Nets whose
/// minimum |preactivation| falls below this bound are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;

/// Smallest |preactivation| across a forward pass of `x`.
pub fn min_abs_preactivation(model: &MlpModel, x: &Matrix) -> Result<f64> {
    let (_, cache) = model.forward(x)?;
    let mut min = f64::INFINITY;
    for k in 0..model.layer_count() {
        for &z in cache.preactivation(k).as_slice() {
            min = min.min(z.abs());
        }
    }
    Ok(min)
}

/// Runs every analytic gradient path against the finite-difference oracle
/// on `cfg.nets` random networks.
pub fn run_standard_suite(cfg: &SuiteConfig) -> Result<Vec<SuiteOutcome>> {
    let mut rng = Rng::new(cfg.seed, 0);
    let mut worst: Vec<GradReport> = LossPath::ALL
        .iter()
        .map(|_| GradReport {
            max_rel: 0.0,
            max_abs: 0.0,
            worst_layer: 0,
            worst_index: 0,
            tol: cfg.tol,
            pass: true,
        })
        .collect();

    let mut net_idx = 0;
    let mut attempts = 0;
    while net_idx < cfg.nets {
        attempts += 1;
        if attempts > 20 * cfg.nets {
            return Err(Error::Config(
                "could not draw enough kink-free random nets".into(),
            ));
        }
        let n_layers = 1 + rng.below(cfg.max_layers);
        let mut dims = Vec::with_capacity(n_layers + 1);
        dims.push(2 + rng.below(cfg.max_dim - 1));
        for _ in 0..n_layers - 1 {
            dims.push(1 + rng.below(cfg.max_dim));
        }
        dims.push(2 + rng.below(cfg.max_dim - 1));
        let mut model = MlpModel::init(&dims, &mut rng)?;
        let batch = 1 + rng.below(6);
        let x = Matrix::from_vec(batch, dims[0], rng.normal_vec(batch * dims[0], 0.0, 1.0))?;
        if min_abs_preactivation(&model, &x)? < KINK_MARGIN {
            continue;
        }
        let y: Vec<usize> = (0..batch).map(|_| rng.below(model.class_count())).collect();
        let weights: Vec<f64> = (0..batch).map(|_| rng.uniform()).collect();
        let constraint_layer = rng.below(model.layer_count());
        let ref_len = model.layer_params(constraint_layer, true)?.len();
        let reference = rng.normal_vec(ref_len, 0.0, 1.0);
        let lambda = 0.1 + rng.uniform();

        for (p_idx, path) in LossPath::ALL.iter().enumerate() {
            let mut analytic = analytic_grads(
                &model,
                *path,
                &x,
                &y,
                &weights,
                constraint_layer,
                &reference,
                lambda,
            )?;
            if cfg.inject_sign_flip && net_idx == 0 && *path == LossPath::CrossEntropy {
                let v = analytic.layers[0].dw.get(0, 0);
                analytic.layers[0].dw.set(0, 0, -v - 1e-3);
            }
            let numeric = finite_diff(
                |m| {
                    loss_value(
                        m,
                        *path,
                        &x,
                        &y,
                        &weights,
                        constraint_layer,
                        &reference,
                        lambda,
                    )
                },
                &mut model,
                cfg.eps,
            )?;
            let report = check(&analytic, &numeric, cfg.tol)?;
            if report.max_rel > worst[p_idx].max_rel {
                worst[p_idx].max_rel = report.max_rel;
                worst[p_idx].worst_layer = report.worst_layer;
                worst[p_idx].worst_index = report.worst_index;
            }
            worst[p_idx].max_abs = worst[p_idx].max_abs.max(report.max_abs);
        }
        net_idx += 1;
    }

    Ok(LossPath::ALL
        .iter()
        .zip(worst)
        .map(|(path, mut report)| {
            report.pass = report.max_rel <= report.tol;
            SuiteOutcome { path: *path, report }
        })
        .collect())
}

#[allow(clippy::too_many_arguments)]
fn loss_value(
    model: &MlpModel,
    path: LossPath,
    x: &Matrix,
    y: &[usize],
    weights: &[f64],
    constraint_layer: usize,
    reference: &[f64],
    lambda: f64,
) -> Result<f64> {
    match path {
        LossPath::CrossEntropy => {
            let (logits, _) = model.forward(x)?;
            let (losses, _) = softmax_ce(&logits, y)?;
            Ok(mean(&losses))
        }
        LossPath::Gce3 | LossPath::Gce7 | LossPath::Gce10 => {
            let q = match path {
                LossPath::Gce3 => 0.3,
                LossPath::Gce7 => 0.7,
                _ => 1.0,
            };
            let (logits, _) = model.forward(x)?;
            let (losses, _) = gce(&logits, y, q)?;
            Ok(mean(&losses))
        }
        LossPath::WeightedCrossEntropy => {
            let (logits, _) = model.forward(x)?;
            let (losses, _) = weighted_softmax_ce(&logits, y, weights)?;
            Ok(mean(&losses))
        }
        LossPath::ConstraintSimilarity
        | LossPath::ConstraintDissimilarity
        | LossPath::ConstraintOrthogonality => {
            let mode = constraint_mode(path);
            let params = model.layer_params(constraint_layer, true)?;
            let (loss, _) = constraint_loss(mode, &params, reference, lambda)?;
            Ok(loss)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn analytic_grads(
    model: &MlpModel,
    path: LossPath,
    x: &Matrix,
    y: &[usize],
    weights: &[f64],
    constraint_layer: usize,
    reference: &[f64],
    lambda: f64,
) -> Result<GradientSet> {
    match path {
        LossPath::CrossEntropy => {
            let (logits, cache) = model.forward(x)?;
            let (_, dlogits) = softmax_ce(&logits, y)?;
            model.backward(&cache, &dlogits)
        }
        LossPath::Gce3 | LossPath::Gce7 | LossPath::Gce10 => {
            let q = match path {
                LossPath::Gce3 => 0.3,
                LossPath::Gce7 => 0.7,
                _ => 1.0,
            };
            let (logits, cache) = model.forward(x)?;
            let (_, dlogits) = gce(&logits, y, q)?;
            model.backward(&cache, &dlogits)
        }
        LossPath::WeightedCrossEntropy => {
            let (logits, cache) = model.forward(x)?;
            let (_, dlogits) = weighted_softmax_ce(&logits, y, weights)?;
            model.backward(&cache, &dlogits)
        }
        LossPath::ConstraintSimilarity
        | LossPath::ConstraintDissimilarity
        | LossPath::ConstraintOrthogonality => {
            let mode = constraint_mode(path);
            let params = model.layer_params(constraint_layer, true)?;
            let (_, grad) = constraint_loss(mode, &params, reference, lambda)?;
            let mut grads = GradientSet::zeros_like(model);
            let w_len = grads.layers[constraint_layer].dw.as_slice().len();
            grads.layers[constraint_layer]
                .dw
                .as_mut_slice()
                .copy_from_slice(&grad[..w_len]);
            grads.layers[constraint_layer]
                .db
                .copy_from_slice(&grad[w_len..]);
            Ok(grads)
        }
    }
}

fn constraint_mode(path: LossPath) -> ConstraintMode {
    match path {
        LossPath::ConstraintSimilarity => ConstraintMode::Similarity,
        LossPath::ConstraintDissimilarity => ConstraintMode::Dissimilarity,
        LossPath::ConstraintOrthogonality => ConstraintMode::Orthogonality,
        _ => unreachable!(),
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
