//! Adam training loop with a linear learning-rate ramp, segment batching,
//! held-out early stopping and best-checkpoint selection.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Segment};
use crate::diffcore::{derive_seed, stream_rng, Mat, ParamVector, Tape};
use crate::error::{Error, Result};
use crate::losses::{data_loss_on_tape, total_loss_grad, Batch, LossBreakdown, LossConfig};
use crate::model::{ModelSpec, NeuralSdeModel};
use crate::solvers::SolverConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub horizon: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub decay_steps: usize,
    pub max_steps: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    pub seed: u64,
}

fn default_patience() -> usize {
    10
}

fn default_eval_every() -> usize {
    200
}

fn default_eval_fraction() -> f64 {
    0.1
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 512,
            horizon: 50,
            lr_start: 0.01,
            lr_end: 0.001,
            decay_steps: 10_000,
            max_steps: 10_000,
            patience: 10,
            eval_every: 200,
            eval_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_end > 0.0 && self.lr_end <= self.lr_start) || !self.lr_start.is_finite() {
            return Err(Error::config("learning rates must satisfy 0 < lr_end <= lr_start"));
        }
        if self.batch_size == 0 || self.horizon == 0 || self.eval_every == 0 || self.patience == 0 {
            return Err(Error::config("batch_size, horizon, eval_every and patience must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::config("eval_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Linear ramp from `lr_start` to `lr_end` over `decay_steps`, then constant.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.decay_steps == 0 || step >= cfg.decay_steps {
        return cfg.lr_end;
    }
    let frac = step as f64 / cfg.decay_steps as f64;
    cfg.lr_start + (cfg.lr_end - cfg.lr_start) * frac
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamVector,
    pub v: ParamVector,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(like: &ParamVector) -> Self {
        AdamState { m: like.zeros_like(), v: like.zeros_like(), t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector, lr: f64) -> Result<()> {
        if !params.same_layout(grad) || !params.same_layout(&self.m) {
            return Err(Error::shape("adam: parameter, gradient and moment layouts differ"));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (m, v) = (self.m.values_mut(), self.v.values_mut());
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let g = grad.values()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            *p -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(
    state: &AdamState,
    params: &ParamVector,
    grad: &ParamVector,
    lr: f64,
) -> Result<(ParamVector, AdamState)> {
    let (mut p, mut s) = (params.clone(), state.clone());
    s.step(&mut p, grad, lr)?;
    Ok((p, s))
}

/// `batch_size` windows drawn uniformly over every valid (trajectory, offset) pair.
pub fn sample_segments(dataset: &Dataset, horizon: usize, batch_size: usize, seed: u64) -> Result<Vec<Segment>> {
    let counts: Vec<usize> = dataset.trajectories.iter().map(|t| t.len().saturating_sub(horizon)).collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::config(format!("horizon {horizon} is too long for every trajectory")));
    }
    let mut rng = stream_rng(seed, 0);
    (0..batch_size)
        .map(|_| {
            let mut idx = rng.gen_range(0..total);
            let mut tr = 0;
            while idx >= counts[tr] {
                idx -= counts[tr];
                tr += 1;
            }
            dataset.trajectories[tr].segment(idx, horizon)
        })
        .collect()
}

/// Segments plus their start points `[x_i, u_i]` as distance-loss anchors.
pub fn batch_from_segments(segments: Vec<Segment>) -> Result<Batch> {
    let rows: Vec<Vec<f64>> = segments.iter().map(|s| s.x.row(0).iter().chain(s.u.row(0)).copied().collect()).collect();
    let points = if rows.is_empty() { Mat::zeros(0, 0) } else { Mat::from_rows(&rows)? };
    Ok(Batch { segments, points })
}

/// Splits whole trajectories into (train, held-out). An empty held-out share
/// falls back to evaluating on the training trajectories.
pub fn split_dataset(dataset: &Dataset, eval_fraction: f64, seed: u64) -> (Dataset, Dataset) {
    let n = dataset.trajectories.len();
    let n_eval = (eval_fraction * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(derive_seed(seed, &[0x5B]), 0));
    let pick = |idx: &[usize]| Dataset {
        trajectories: idx.iter().map(|&i| dataset.trajectories[i].clone()).collect(),
        ..dataset.clone()
    };
    let train = pick(&order[n_eval..]);
    if n_eval == 0 {
        return (train.clone(), train);
    }
    (train, pick(&order[..n_eval]))
}

/// Mean data loss over non-overlapping windows of the held-out trajectories.
pub fn heldout_loss(model: &NeuralSdeModel, eval: &Dataset, horizon: usize, solver: &SolverConfig, s_diag: &[f64]) -> Result<f64> {
    let mut segs = Vec::new();
    for tr in &eval.trajectories {
        let mut off = 0;
        while off + horizon < tr.len() {
            segs.push(tr.segment(off, horizon)?);
            off += horizon;
        }
    }
    if segs.is_empty() {
        return Err(Error::config(format!("no held-out window of {horizon} steps")));
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let v = data_loss_on_tape(&mut tape, &bound, &segs, solver.scheme, solver.dt, solver.n_particles, solver.seed, s_diag)?;
    Ok(tape.value(v).item() / segs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub lr: f64,
    pub train: LossBreakdown,
    pub heldout: f64,
}

pub const HISTORY_HEADER: &str = "step,lr,l_data,l_grad,l_convex,l_mu,total,heldout_data";

pub fn write_history_csv<W: Write>(mut w: W, rows: &[HistoryRow]) -> Result<()> {
    writeln!(w, "{HISTORY_HEADER}")?;
    for r in rows {
        let t = &r.train;
        writeln!(w, "{},{},{},{},{},{},{},{}", r.step, r.lr, t.data, t.grad, t.convex, t.mu, t.total, r.heldout)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest held-out loss seen.
    pub model: NeuralSdeModel,
    pub history: Vec<HistoryRow>,
    pub best_step: usize,
    pub best_heldout: f64,
    pub steps_run: usize,
    pub s_diag: Vec<f64>,
    /// Steps whose batch diverged and was skipped.
    pub diverged_steps: Vec<usize>,
}

/// Observation variances: the configured ones, or estimates from `dataset`.
/// Smallest feature scale used by [`fit_feature_normalization`].
pub const MIN_FEATURE_SCALE: f64 = 1e-3;

/// Normalizes the distance-network features of `spec` to zero mean and unit
/// standard deviation over the points of `dataset`.
pub fn fit_feature_normalization(spec: &mut ModelSpec, dataset: &Dataset) -> Result<()> {
    let feats = spec.raw_feature_rows(&dataset.all_points())?;
    spec.diffusion.normalize_to(&feats, MIN_FEATURE_SCALE);
    spec.validate()
}

pub fn resolve_s_diag(loss: &LossConfig, dataset: &Dataset) -> Vec<f64> {
    loss.s_diag.clone().unwrap_or_else(|| dataset.step_difference_variance())
}

/// Trains on segment batches of `dataset` under the joint objective.
///
/// Held-out data loss is evaluated every `eval_every` steps and once at the end;
/// training stops after `patience` evaluations without improvement. A diverging
/// batch is skipped and the learning rate halved; two in a row abort the run.
pub fn train(
    model: &NeuralSdeModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
    loss: &LossConfig,
    solver: &SolverConfig,
) -> Result<TrainOutcome> {
    train_with_progress(model, dataset, cfg, loss, solver, |_| {})
}

pub fn train_with_progress(
    model: &NeuralSdeModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
    loss: &LossConfig,
    solver: &SolverConfig,
    mut on_eval: impl FnMut(&HistoryRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss.validate()?;
    solver.validate()?;
    dataset.validate()?;
    if dataset.trajectories.is_empty() {
        return Err(Error::config("training dataset is empty"));
    }
    let (train_set, eval_set) = split_dataset(dataset, cfg.eval_fraction, cfg.seed);
    let s_diag = resolve_s_diag(loss, &train_set);
    let loss = LossConfig { s_diag: Some(s_diag.clone()), ..loss.clone() };
    let eval_solver = SolverConfig { seed: derive_seed(cfg.seed, &[0xE7A1]), horizon: cfg.horizon, ..*solver };
    // Without a data term the monitored quantity is the training objective.
    let heldout = |m: &NeuralSdeModel, train: &LossBreakdown| -> Result<f64> {
        if loss.alpha == 0.0 {
            return Ok(train.total);
        }
        match heldout_loss(m, &eval_set, cfg.horizon, &eval_solver, &s_diag) {
            Err(Error::Diverged { .. }) => Ok(f64::INFINITY),
            other => other,
        }
    };

    let mut current = model.clone();
    let mut best = model.clone();
    let mut best_heldout = f64::INFINITY;
    let mut best_step = 0;
    let mut adam = AdamState::new(&current.params);
    let mut history = Vec::new();
    let mut diverged_steps = Vec::new();
    let mut lr_scale = 1.0;
    let mut last_diverged = false;
    let mut stale = 0;
    let mut last_train = LossBreakdown::default();
    let mut steps_run = 0;

    let mut record = |step: usize, lr: f64, train: LossBreakdown, m: &NeuralSdeModel| -> Result<bool> {
        let h = heldout(m, &train)?;
        let row = HistoryRow { step, lr, train, heldout: h };
        on_eval(&row);
        history.push(row);
        if h < best_heldout || history.len() == 1 {
            best_heldout = h;
            best = m.clone();
            best_step = step;
            stale = 0;
        } else {
            stale += 1;
        }
        Ok(stale >= cfg.patience)
    };

    for step in 0..cfg.max_steps {
        let lr = lr_at(step, cfg) * lr_scale;
        let segs = sample_segments(&train_set, cfg.horizon, cfg.batch_size, derive_seed(cfg.seed, &[step as u64, 1]))?;
        let batch = batch_from_segments(segs)?;
        let step_solver = SolverConfig { seed: derive_seed(cfg.seed, &[step as u64, 2]), horizon: cfg.horizon, ..*solver };
        let result = total_loss_grad(&current, &batch, &loss, &step_solver);
        let grads = match result {
            Ok((bd, g)) if bd.total.is_finite() && g.values().iter().all(|v| v.is_finite()) => {
                last_diverged = false;
                last_train = bd;
                Some(g)
            }
            Ok(_) | Err(Error::Diverged { .. }) => {
                if last_diverged {
                    return Err(Error::Aborted(format!("training diverged at consecutive steps {} and {step}", step - 1)));
                }
                last_diverged = true;
                lr_scale *= 0.5;
                diverged_steps.push(step);
                None
            }
            Err(e) => return Err(e),
        };
        if step % cfg.eval_every == 0 && record(step, lr, last_train, &current)? {
            steps_run = step;
            break;
        }
        if let Some(g) = grads {
            adam.step(&mut current.params, &g, lr)?;
        }
        steps_run = step + 1;
    }
    if cfg.max_steps > 0 && steps_run == cfg.max_steps {
        let lr = lr_at(steps_run, cfg) * lr_scale;
        record(steps_run, lr, last_train, &current)?;
    }
    Ok(TrainOutcome { model: best, history, best_step, best_heldout, steps_run, s_diag, diverged_steps })
}
