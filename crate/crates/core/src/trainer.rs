//! The dual-model debiasing training loop.
//!
//! Each batch runs two interconnected updates. First the reweighting
//! phase: both models forward once, the bias model steps on generalized
//! cross-entropy (amplifying easy-to-learn features), the debiased model
//! steps on cross-entropy reweighted by the relative difficulty score
//! computed from the pre-update losses. Then the constraint phase: for
//! every scheduled layer, a cosine (dis)similarity loss between the two
//! models' parameter vectors is applied to the debiased model through a
//! bare gradient step on that layer alone — every other layer is frozen
//! and no optimizer momentum is touched, so nothing leaks into layers the
//! schedule did not name. The bias model is never modified by phase two.

use crate::biasdata::BiasedDataset;
use crate::error::{Error, Result};
use crate::eval::{accuracy_by_group, batch_features};
use crate::linalg::Matrix;
use crate::losses::{
    ce_per_sample, constraint_loss, difficulty_weight, gce, weighted_softmax_ce,
    ConstraintMode, LossConfig,
};
use crate::mlp::MlpModel;
use crate::optim::{masked_plain_step, step, AdamState, OptimConfig};
use crate::report::{MetricsRow, RunMetrics};
use crate::rng::Rng;

/// RNG stream assignments within one run. The single model of a vanilla
/// run uses the debias stream so degenerate-wiring comparisons line up.
const STREAM_MODEL_B: u64 = 0;
const STREAM_MODEL_D: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// One model, plain cross-entropy.
    Vanilla,
    /// Dual models with difficulty reweighting, no constraints.
    LffOnly,
    /// Reweighting plus the per-layer cosine constraint pass.
    CosFairNet,
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Vanilla => "vanilla",
            TrainMode::LffOnly => "lffonly",
            TrainMode::CosFairNet => "cosfairnet",
        })
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(TrainMode::Vanilla),
            "lffonly" => Ok(TrainMode::LffOnly),
            "cosfairnet" => Ok(TrainMode::CosFairNet),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

/// Where the difficulty weights read the bias model's losses from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightSource {
    /// Losses cached from the shared forward before the bias model steps
    /// (one forward per model per batch).
    PreUpdate,
    /// Second forward of the bias model after its update.
    PostUpdate,
}

impl std::str::FromStr for WeightSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "preupdate" => Ok(WeightSource::PreUpdate),
            "postupdate" => Ok(WeightSource::PostUpdate),
            other => Err(Error::Config(format!("unknown weight source '{other}'"))),
        }
    }
}

/// Per-layer constraint assignment: one (mode, strength) entry per affine
/// layer, plus the constraint step size and whether bias vectors join the
/// flattened layer view.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSchedule {
    pub entries: Vec<(ConstraintMode, f64)>,
    /// Step size of the constraint update; defaults to the main learning
    /// rate when `None`.
    pub eta_constraint: Option<f64>,
    pub include_bias: bool,
}

impl ConstraintSchedule {
    pub fn none(layer_count: usize) -> Self {
        ConstraintSchedule {
            entries: vec![(ConstraintMode::None, 0.0); layer_count],
            eta_constraint: None,
            include_bias: true,
        }
    }

    /// Similarity on the first layer, dissimilarity on layer 2 (the best
    /// single-layer cell of the reference experiments), nothing elsewhere.
    pub fn default_for(layer_count: usize, lambda: f64) -> Self {
        let mut s = ConstraintSchedule::none(layer_count);
        if layer_count > 0 {
            s.entries[0] = (ConstraintMode::Similarity, lambda);
        }
        let dissim_at = if layer_count > 2 { 2 } else { layer_count.saturating_sub(1) };
        if dissim_at > 0 {
            s.entries[dissim_at] = (ConstraintMode::Dissimilarity, lambda);
        }
        s
    }

    /// Parses `k:mode[,k:mode...]` with modes sim|dissim|orth|none; every
    /// named layer gets strength `lambda`.
    pub fn parse(spec: &str, layer_count: usize, lambda: f64) -> Result<Self> {
        let mut s = ConstraintSchedule::none(layer_count);
        let trimmed = spec.trim();
        if trimmed.is_empty() || trimmed == "none" {
            return Ok(s);
        }
        for part in trimmed.split(',') {
            let (k, mode) = part
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("bad constraint entry '{part}'")))?;
            let k: usize = k
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad layer index '{k}'")))?;
            if k >= layer_count {
                return Err(Error::Config(format!(
                    "constraint layer {k} out of range for {layer_count} layers"
                )));
            }
            let mode: ConstraintMode = mode.trim().parse()?;
            let strength = if mode == ConstraintMode::None { 0.0 } else { lambda };
            s.entries[k] = (mode, strength);
        }
        Ok(s)
    }

    pub fn validate(&self, layer_count: usize) -> Result<()> {
        if self.entries.len() != layer_count {
            return Err(Error::Config(format!(
                "schedule covers {} layers, model has {layer_count}",
                self.entries.len()
            )));
        }
        for (k, (_, lambda)) in self.entries.iter().enumerate() {
            if !(*lambda >= 0.0) {
                return Err(Error::Config(format!(
                    "negative constraint strength at layer {k}"
                )));
            }
        }
        if let Some(eta) = self.eta_constraint {
            if !(eta > 0.0) {
                return Err(Error::Config(format!(
                    "eta_constraint must be > 0, got {eta}"
                )));
            }
        }
        Ok(())
    }

    /// True when phase two would be a no-op everywhere.
    pub fn is_inert(&self) -> bool {
        self.entries
            .iter()
            .all(|(m, l)| *m == ConstraintMode::None || *l == 0.0)
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Full dims: `[input, hidden.., classes]`.
    pub layer_dims: Vec<usize>,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub schedule: ConstraintSchedule,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub weight_source: WeightSource,
    /// Evaluation cadence in steps; `None` evaluates at each epoch end.
    pub eval_every: Option<usize>,
    /// Ablation knob: force every difficulty weight to 1.
    pub unit_weights: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let dims = vec![588, 100, 100, 100, 10];
        TrainConfig {
            schedule: ConstraintSchedule::default_for(dims.len() - 1, 0.1),
            layer_dims: dims,
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            batch_size: 256,
            epochs: 10,
            seed: 7,
            mode: TrainMode::CosFairNet,
            weight_source: WeightSource::PreUpdate,
            eval_every: None,
            unit_weights: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::Config("layer_dims needs input and output".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        self.loss.validate()?;
        self.optim.validate()?;
        self.schedule.validate(self.layer_dims.len() - 1)?;
        if let Some(e) = self.eval_every {
            if e == 0 {
                return Err(Error::Config("eval_every must be >= 1 steps".into()));
            }
        }
        Ok(())
    }

    fn check_dataset(&self, ds: &BiasedDataset, name: &str) -> Result<()> {
        if ds.samples.is_empty() {
            return Err(Error::Config(format!("{name} dataset is empty")));
        }
        if ds.input_dim != self.layer_dims[0] {
            return Err(Error::Config(format!(
                "{name} dataset width {} vs model input {}",
                ds.input_dim, self.layer_dims[0]
            )));
        }
        if ds.class_count != *self.layer_dims.last().unwrap() {
            return Err(Error::Config(format!(
                "{name} dataset has {} classes, model outputs {}",
                ds.class_count,
                self.layer_dims.last().unwrap()
            )));
        }
        Ok(())
    }
}

/// Losses and diagnostics of one training step.
#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub loss_b: f64,
    pub loss_d: f64,
    /// Per-layer constraint losses (zero where unscheduled).
    pub constraint_losses: Vec<f64>,
    pub mean_w: f64,
}

impl StepMetrics {
    pub fn constraint_total(&self) -> f64 {
        self.constraint_losses.iter().sum()
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Bias model; absent in vanilla mode.
    pub model_b: Option<MlpModel>,
    /// Final debiased (or vanilla) model.
    pub model_d: MlpModel,
    /// Snapshot at the best pooled validation accuracy.
    pub best_model_d: MlpModel,
    /// Metrics row index of the best snapshot.
    pub best_row: usize,
    pub metrics: RunMetrics,
}

/// Reweighting phase (steps 1-4): shared forward, GCE step on the bias
/// model, difficulty weights from the pre-update losses, weighted CE step
/// on the debiased model. Returns (loss_b, loss_d, mean_w).
#[allow(clippy::too_many_arguments)]
pub fn reweighted_update_phase(
    model_b: &mut MlpModel,
    model_d: &mut MlpModel,
    x: &Matrix,
    y: &[usize],
    cfg: &TrainConfig,
    state_b: &mut AdamState,
    state_d: &mut AdamState,
) -> Result<(f64, f64, f64)> {
    // (1) one forward per model; per-sample CE cached as detached scalars.
    let (logits_b, cache_b) = model_b.forward(x)?;
    let (logits_d, cache_d) = model_d.forward(x)?;
    let ce_b = ce_per_sample(&logits_b, y)?;
    let ce_d = ce_per_sample(&logits_d, y)?;

    // (2) bias model steps on GCE.
    let (gce_losses, dlogits_b) = gce(&logits_b, y, cfg.loss.q)?;
    let loss_b = mean(&gce_losses);
    let grads_b = model_b.backward(&cache_b, &dlogits_b)?;
    step(model_b, &grads_b, state_b, &cfg.optim)?;

    // (3) difficulty weights.
    let ce_b_for_w = match cfg.weight_source {
        WeightSource::PreUpdate => ce_b,
        WeightSource::PostUpdate => {
            let (logits_b2, _) = model_b.forward(x)?;
            ce_per_sample(&logits_b2, y)?
        }
    };
    let weights: Vec<f64> = if cfg.unit_weights {
        vec![1.0; y.len()]
    } else {
        ce_b_for_w
            .iter()
            .zip(&ce_d)
            .map(|(&b, &d)| difficulty_weight(b, d))
            .collect::<Result<_>>()?
    };
    let mean_w = mean(&weights);

    // (4) debiased model steps on weighted CE, using the phase-(1) logits.
    let (wce_losses, dlogits_d) = weighted_softmax_ce(&logits_d, y, &weights)?;
    let loss_d = mean(&wce_losses);
    let grads_d = model_d.backward(&cache_d, &dlogits_d)?;
    step(model_d, &grads_d, state_d, &cfg.optim)?;

    Ok((loss_b, loss_d, mean_w))
}

/// Constraint phase (step 5): per-layer cosine losses on post-update
/// parameters, each applied through a masked plain step on the debiased
/// model only. Reads parameters, never data. Returns per-layer losses.
pub fn constraint_phase(
    model_b: &MlpModel,
    model_d: &mut MlpModel,
    schedule: &ConstraintSchedule,
    eta_main: f64,
) -> Result<Vec<f64>> {
    let eta = schedule.eta_constraint.unwrap_or(eta_main);
    let mut losses = vec![0.0; schedule.entries.len()];
    for (k, &(mode, lambda)) in schedule.entries.iter().enumerate() {
        if mode == ConstraintMode::None || lambda == 0.0 {
            continue;
        }
        let theta_d = model_d.layer_params(k, schedule.include_bias)?;
        let theta_b = model_b.layer_params(k, schedule.include_bias)?;
        let (loss, grad) = constraint_loss(mode, &theta_d, &theta_b, lambda)?;
        masked_plain_step(model_d, k, &grad, eta)?;
        losses[k] = loss;
    }
    Ok(losses)
}

/// One full dual-model training step on a batch.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model_b: &mut MlpModel,
    model_d: &mut MlpModel,
    x: &Matrix,
    y: &[usize],
    cfg: &TrainConfig,
    state_b: &mut AdamState,
    state_d: &mut AdamState,
) -> Result<StepMetrics> {
    let (loss_b, loss_d, mean_w) =
        reweighted_update_phase(model_b, model_d, x, y, cfg, state_b, state_d)?;
    let constraint_losses = if cfg.mode == TrainMode::CosFairNet {
        constraint_phase(model_b, model_d, &cfg.schedule, cfg.optim.eta)?
    } else {
        vec![0.0; cfg.schedule.entries.len()]
    };
    Ok(StepMetrics {
        loss_b,
        loss_d,
        constraint_losses,
        mean_w,
    })
}

struct Accumulator {
    loss_b: f64,
    loss_d: f64,
    constraint: f64,
    mean_w: f64,
    steps: usize,
}

impl Accumulator {
    fn new() -> Self {
        Accumulator {
            loss_b: 0.0,
            loss_d: 0.0,
            constraint: 0.0,
            mean_w: 0.0,
            steps: 0,
        }
    }

    fn add(&mut self, m: &StepMetrics) {
        self.loss_b += m.loss_b;
        self.loss_d += m.loss_d;
        self.constraint += m.constraint_total();
        self.mean_w += m.mean_w;
        self.steps += 1;
    }

    fn flush(&mut self) -> (f64, f64, f64, f64) {
        let n = self.steps.max(1) as f64;
        let out = (
            self.loss_b / n,
            self.loss_d / n,
            self.constraint / n,
            self.mean_w / n,
        );
        *self = Accumulator::new();
        out
    }
}

/// Trains per the configured mode with seeded epoch shuffling, evaluating
/// on `val_ds` at the configured cadence and retaining the best-validation
/// snapshot of the debiased model.
pub fn train(cfg: &TrainConfig, train_ds: &BiasedDataset, val_ds: &BiasedDataset) -> Result<TrainResult> {
    cfg.validate()?;
    cfg.check_dataset(train_ds, "train")?;
    cfg.check_dataset(val_ds, "validation")?;

    let dual = cfg.mode != TrainMode::Vanilla;
    let mut model_b = if dual {
        Some(MlpModel::init(
            &cfg.layer_dims,
            &mut Rng::new(cfg.seed, STREAM_MODEL_B),
        )?)
    } else {
        None
    };
    let mut model_d = MlpModel::init(&cfg.layer_dims, &mut Rng::new(cfg.seed, STREAM_MODEL_D))?;
    let mut state_b = model_b.as_ref().map(AdamState::new);
    let mut state_d = AdamState::new(&model_d);
    let mut shuffle_rng = Rng::new(cfg.seed, STREAM_SHUFFLE);

    let n = train_ds.samples.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let eval_every = cfg.eval_every.unwrap_or(steps_per_epoch).max(1);

    let mut order: Vec<usize> = (0..n).collect();
    let mut metrics = RunMetrics::default();
    let mut acc = Accumulator::new();
    let mut global_step = 0usize;
    let mut best_row = 0usize;
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_model = model_d.clone();

    for epoch in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let x = batch_features(train_ds, chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| train_ds.samples[i].y as usize).collect();

            let m = match (&mut model_b, &mut state_b) {
                (Some(mb), Some(sb)) => {
                    train_step(mb, &mut model_d, &x, &y, cfg, sb, &mut state_d)?
                }
                _ => vanilla_step(&mut model_d, &x, &y, cfg, &mut state_d)?,
            };
            if !m.loss_b.is_finite() || !m.loss_d.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: global_step,
                    what: format!("loss_b={} loss_d={}", m.loss_b, m.loss_d),
                });
            }
            acc.add(&m);
            global_step += 1;

            let last_step_of_run =
                epoch == cfg.epochs - 1 && global_step == cfg.epochs * steps_per_epoch;
            if global_step % eval_every == 0 || last_step_of_run {
                if acc.steps == 0 {
                    continue; // cadence landed exactly on the final step twice
                }
                let (loss_b, loss_d, constraint, mean_w) = acc.flush();
                let ga = accuracy_by_group(&model_d, val_ds)?;
                let unb = ga.acc_unbiased.unwrap_or(f64::NAN);
                metrics.rows.push(MetricsRow {
                    epoch,
                    step: global_step,
                    loss_b,
                    loss_d,
                    loss_constraint: constraint,
                    mean_w,
                    acc_unbiased: unb,
                    acc_ba: ga.acc_ba.unwrap_or(f64::NAN),
                    acc_bc: ga.acc_bc.unwrap_or(f64::NAN),
                });
                if unb.is_finite() && unb > best_acc {
                    best_acc = unb;
                    best_row = metrics.rows.len() - 1;
                    best_model = model_d.clone();
                }
            }
        }
    }

    Ok(TrainResult {
        model_b,
        model_d,
        best_model_d: best_model,
        best_row,
        metrics,
    })
}

/// Plain CE + optimizer step for the vanilla baseline. Reported as the
/// debias-side loss; the bias-side fields stay zero and weights are 1.
fn vanilla_step(
    model: &mut MlpModel,
    x: &Matrix,
    y: &[usize],
    cfg: &TrainConfig,
    state: &mut AdamState,
) -> Result<StepMetrics> {
    let (logits, cache) = model.forward(x)?;
    let (losses, dlogits) = crate::losses::softmax_ce(&logits, y)?;
    let loss = mean(&losses);
    let grads = model.backward(&cache, &dlogits)?;
    step(model, &grads, state, &cfg.optim)?;
    Ok(StepMetrics {
        loss_b: 0.0,
        loss_d: loss,
        constraint_losses: vec![0.0; cfg.schedule.entries.len()],
        mean_w: 1.0,
    })
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}
