//! Initial learning-rate estimation.
//!
//! Three estimator families share this module: the exponential range test
//! with its steepest-descent proposal (optionally preceded by one epoch of
//! low-LR pretraining), a uniform grid search, and a 1-D TPE sampler with
//! median pruning of unpromising trials.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::data::{batches, LabeledDataset};
use crate::error::{CoreError, Result};
use crate::losses::cross_entropy;
use crate::models::{ClassifierModel, ModelKind};
use crate::rng::SeededRng;

pub const DEFAULT_TPE_GAMMA: f64 = 0.25;
pub const DEFAULT_TPE_CANDIDATES: usize = 24;
pub const DEFAULT_TPE_STARTUP: usize = 5;
pub const DEFAULT_TPE_MAX_TRIALS: usize = 15;
pub const DEFAULT_TPE_EPOCHS_PER_TRIAL: usize = 6;
pub const DEFAULT_GRID_POINTS: usize = 10;
pub const DEFAULT_GRID_EPOCHS_PER_TRIAL: usize = 9;
pub const DEFAULT_SMOOTHING_BETA: f64 = 0.98;
/// Raw-loss blowup factor that aborts a range-test sweep.
const SWEEP_ABORT_FACTOR: f64 = 4.0;
/// Fraction of trailing sweep points ignored by the proposal rule.
const PROPOSAL_TAIL_EXCLUDED: f64 = 0.1;
const GOLDEN_FRACTION: f64 = 0.618_033_988_749_894_9;

/// Search interval with optional discretization (`discrete_step == 0`
/// disables snapping).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LrBounds {
    pub low: f64,
    pub high: f64,
    pub discrete_step: f64,
}

impl LrBounds {
    pub fn new(low: f64, high: f64, discrete_step: f64) -> Result<Self> {
        if !(low > 0.0 && low < high) {
            return Err(CoreError::invalid(format!("need 0 < low < high, got [{low}, {high}]")));
        }
        if discrete_step < 0.0 {
            return Err(CoreError::invalid("discrete_step must be nonnegative".to_string()));
        }
        Ok(LrBounds { low, high, discrete_step })
    }

    /// Clamps into `[low, high]`, then snaps onto the `low + k*step` grid.
    pub fn clamp_and_snap(&self, lr: f64) -> f64 {
        let clamped = lr.clamp(self.low, self.high);
        if self.discrete_step == 0.0 {
            return clamped;
        }
        let k_max = ((self.high - self.low) / self.discrete_step + 1e-9).floor();
        let k = ((clamped - self.low) / self.discrete_step).round().clamp(0.0, k_max);
        self.low + k * self.discrete_step
    }
}

// ---------------------------------------------------------------------------
// Range test
// ---------------------------------------------------------------------------

/// A differentiable objective the range test can sweep. Parameters live
/// inside the objective; gradients use the flat layout of
/// `ModelParams::to_flat`.
pub trait SweepObjective {
    /// Mean loss and flat gradient on the iteration's batch.
    fn loss_and_grad(&mut self, iteration: usize) -> Result<(f64, Vec<f64>)>;
    /// Shift every parameter by `delta` (same layout as the gradient).
    fn offset_params(&mut self, delta: &[f64]) -> Result<()>;
    fn param_len(&self) -> usize;
}

#[derive(Debug, Clone, Copy)]
pub struct RangeTestConfig {
    pub lr_min: f64,
    pub lr_max: f64,
    pub iterations: usize,
    pub smoothing_beta: f64,
    /// Momentum of the sweep's SGD steps, as in the original finder.
    pub momentum: f64,
}

impl RangeTestConfig {
    pub fn new(lr_min: f64, lr_max: f64, iterations: usize) -> Result<Self> {
        let cfg = RangeTestConfig {
            lr_min,
            lr_max,
            iterations,
            smoothing_beta: DEFAULT_SMOOTHING_BETA,
            momentum: 0.9,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn without_momentum(mut self) -> Self {
        self.momentum = 0.0;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_max) {
            return Err(CoreError::invalid(format!(
                "need 0 < lr_min < lr_max, got [{}, {}]",
                self.lr_min, self.lr_max
            )));
        }
        if self.iterations < 10 {
            return Err(CoreError::invalid("range test needs at least 10 iterations".to_string()));
        }
        if !(0.0..1.0).contains(&self.smoothing_beta) {
            return Err(CoreError::invalid("smoothing_beta outside [0, 1)".to_string()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CoreError::invalid("momentum outside [0, 1)".to_string()));
        }
        Ok(())
    }
}

/// Paired, strictly increasing learning rates and bias-corrected smoothed
/// losses from a range-test sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct LrCurve {
    pub lrs: Vec<f64>,
    pub smoothed_loss: Vec<f64>,
}

/// Exponential LR sweep: `lr_t = lr_min * (lr_max/lr_min)^(t/(T-1))`, one
/// momentum-SGD step per iteration, EMA-smoothed loss with bias correction.
/// The sweep aborts (recording nothing further) once the raw loss exceeds
/// four times the best smoothed loss.
pub fn lr_range_test(objective: &mut dyn SweepObjective, cfg: &RangeTestConfig) -> Result<LrCurve> {
    cfg.validate()?;
    let ratio = cfg.lr_max / cfg.lr_min;
    let mut lrs = Vec::with_capacity(cfg.iterations);
    let mut smoothed = Vec::with_capacity(cfg.iterations);
    let mut ema = 0.0;
    let mut best = f64::INFINITY;
    let mut velocity = vec![0.0; objective.param_len()];
    for t in 0..cfg.iterations {
        let lr = cfg.lr_min * ratio.powf(t as f64 / (cfg.iterations - 1) as f64);
        let (loss, grad) = objective.loss_and_grad(t)?;
        if !loss.is_finite() {
            if t == 0 {
                return Err(CoreError::Diverged(format!(
                    "objective diverged at lr_min = {}",
                    cfg.lr_min
                )));
            }
            break;
        }
        if t > 0 && loss > SWEEP_ABORT_FACTOR * best {
            break;
        }
        ema = cfg.smoothing_beta * ema + (1.0 - cfg.smoothing_beta) * loss;
        let corrected = ema / (1.0 - cfg.smoothing_beta.powi(t as i32 + 1));
        lrs.push(lr);
        smoothed.push(corrected);
        best = best.min(corrected);
        let delta: Vec<f64> = grad
            .iter()
            .zip(velocity.iter_mut())
            .map(|(g, v)| {
                *v = cfg.momentum * *v + g;
                -lr * *v
            })
            .collect();
        objective.offset_params(&delta)?;
    }
    if lrs.len() < 2 {
        return Err(CoreError::Diverged("sweep aborted before producing a curve".to_string()));
    }
    Ok(LrCurve { lrs, smoothed_loss: smoothed })
}

/// The fast-ai selection rule: the LR at the steepest negative forward
/// difference of the smoothed loss, ignoring the final 10% of points.
pub fn propose_lr_fastai(curve: &LrCurve) -> Result<f64> {
    let n = curve.lrs.len();
    if n < 10 {
        return Err(CoreError::Search(format!("curve has {n} points, need at least 10")));
    }
    if curve.smoothed_loss.len() != n {
        return Err(CoreError::Search("curve lists must have equal lengths".to_string()));
    }
    let usable = n - ((PROPOSAL_TAIL_EXCLUDED * n as f64).ceil() as usize);
    // A drop must clear floating-point noise to count as descent.
    let scale = curve
        .smoothed_loss
        .iter()
        .map(|v| v.abs())
        .fold(0.0f64, f64::max)
        .max(1e-300);
    let mut best_idx = None;
    let mut best_slope = -1e-12 * scale;
    for i in 0..usable.saturating_sub(1) {
        let slope = curve.smoothed_loss[i + 1] - curve.smoothed_loss[i];
        if slope < best_slope {
            best_slope = slope;
            best_idx = Some(i);
        }
    }
    match best_idx {
        Some(i) => Ok(curve.lrs[i]),
        None => Err(CoreError::Search("no descending region in the loss curve".to_string())),
    }
}

/// Range-test adapter for a classifier trained with cross-entropy: cycles
/// seeded epoch permutations of the dataset, one batch per iteration.
pub struct ClassifierSweep {
    model: ModelKind,
    data: LabeledDataset,
    batch_size: usize,
    seed: u64,
    epoch_batches: Vec<Vec<usize>>,
    epoch: usize,
}

impl ClassifierSweep {
    pub fn new(model: ModelKind, data: LabeledDataset, batch_size: usize, seed: u64) -> Self {
        let epoch_batches = batches(data.len(), batch_size, seed, 0);
        ClassifierSweep { model, data, batch_size, seed, epoch_batches, epoch: 0 }
    }
}

impl SweepObjective for ClassifierSweep {
    fn loss_and_grad(&mut self, iteration: usize) -> Result<(f64, Vec<f64>)> {
        let per_epoch = self.epoch_batches.len();
        let epoch = iteration / per_epoch;
        if epoch != self.epoch {
            self.epoch = epoch;
            self.epoch_batches = batches(self.data.len(), self.batch_size, self.seed, epoch);
        }
        let idx = &self.epoch_batches[iteration % per_epoch];
        let (x, y) = self.data.gather(idx);
        let fwd = self.model.forward(&x)?;
        if !fwd.logits.all_finite() {
            return Ok((f64::INFINITY, vec![0.0; self.param_len()]));
        }
        let out = cross_entropy(&fwd.logits, &y)?;
        let grads = self.model.backward(&x, &fwd, &out.dlogits)?;
        Ok((out.value, grads.to_flat()))
    }

    fn offset_params(&mut self, delta: &[f64]) -> Result<()> {
        self.model.params_mut().add_flat(delta)
    }

    fn param_len(&self) -> usize {
        self.model.params().element_count()
    }
}

/// How the fast-ai estimators drive their sweep and pretraining epoch.
#[derive(Debug, Clone, Copy)]
pub struct FastaiEstimateConfig {
    /// Batch size for the sweep iterations; 0 means full-batch, which keeps
    /// the loss curve free of sampling noise at desk scale.
    pub sweep_batch_size: usize,
    /// Mini-batch size for the one pretraining epoch.
    pub pretrain_batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl FastaiEstimateConfig {
    pub fn new(iterations: usize, seed: u64) -> Self {
        FastaiEstimateConfig {
            sweep_batch_size: 0,
            pretrain_batch_size: 32,
            iterations,
            seed,
        }
    }

    fn sweep_batch(&self, n: usize) -> usize {
        if self.sweep_batch_size == 0 {
            n
        } else {
            self.sweep_batch_size.min(n)
        }
    }
}

/// Plain fast-ai estimate: sweep `[low/10, high*10]`, propose, clamp into
/// bounds. The model is copied; the caller's weights are untouched.
pub fn estimate_lr_fastai(
    model: &ModelKind,
    train: &LabeledDataset,
    bounds: &LrBounds,
    cfg: &FastaiEstimateConfig,
) -> Result<f64> {
    let range = RangeTestConfig::new(bounds.low / 10.0, bounds.high * 10.0, cfg.iterations)?;
    let mut sweep = ClassifierSweep::new(
        model.clone(),
        train.clone(),
        cfg.sweep_batch(train.len()),
        cfg.seed,
    );
    let curve = lr_range_test(&mut sweep, &range)?;
    Ok(bounds.clamp_and_snap(propose_lr_fastai(&curve)?))
}

/// Fast-ai estimate after one epoch of low-LR finetuning (momentum 0.9, no
/// weight decay). The warmed weights make the sweep react more smoothly, so
/// the proposal lands lower; one extra epoch is the only overhead.
pub fn estimate_lr_with_pretrain(
    model: &ModelKind,
    train: &LabeledDataset,
    small_lr: f64,
    bounds: &LrBounds,
    cfg: &FastaiEstimateConfig,
) -> Result<f64> {
    if !(0.0..=bounds.low).contains(&small_lr) {
        return Err(CoreError::invalid(format!(
            "pretrain lr {small_lr} must lie in [0, bounds.low]"
        )));
    }
    let mut warmed = model.clone();
    let mut groups = crate::optim::build_single_group(warmed.params(), 0.0, 0.9)?;
    let batch = cfg.pretrain_batch_size.clamp(1, train.len());
    for idx in batches(train.len(), batch, cfg.seed, 0) {
        let (x, y) = train.gather(&idx);
        let fwd = warmed.forward(&x)?;
        let out = cross_entropy(&fwd.logits, &y)?;
        let grads = warmed.backward(&x, &fwd, &out.dlogits)?;
        crate::optim::sgd_step(warmed.params_mut(), &mut groups, &grads, small_lr)?;
    }
    estimate_lr_fastai(&warmed, train, bounds, cfg)
}

// ---------------------------------------------------------------------------
// Trials, pruning, TPE
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Running,
    Pruned,
    Complete,
    Diverged,
}

/// One LR trial: the candidate, per-epoch validation top-1, and the final
/// objective (set only for completed trials).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Trial {
    pub lr: f64,
    pub intermediates: Vec<f64>,
    pub status: TrialStatus,
    pub objective: Option<f64>,
}

impl Trial {
    fn running(lr: f64) -> Self {
        Trial { lr, intermediates: Vec::new(), status: TrialStatus::Running, objective: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StudyHistory {
    pub trials: Vec<Trial>,
}

impl StudyHistory {
    pub fn completed(&self) -> impl Iterator<Item = &Trial> {
        self.trials.iter().filter(|t| t.status == TrialStatus::Complete)
    }

    pub fn best_completed(&self) -> Option<&Trial> {
        self.completed().max_by(|a, b| {
            a.objective.unwrap().partial_cmp(&b.objective.unwrap()).unwrap()
        })
    }
}

/// Writes one trial per line as JSON (resumable study format).
pub fn save_history_jsonl(history: &StudyHistory, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for trial in &history.trials {
        serde_json::to_writer(&mut f, trial)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_history_jsonl(path: &Path) -> Result<StudyHistory> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut trials = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        trials.push(serde_json::from_str(&line)?);
    }
    Ok(StudyHistory { trials })
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median pruning rule over raw intermediate values: prune iff the best
/// intermediate so far is below the median of completed prior trials'
/// values at the same step. Never prunes at step 0 or without priors.
pub fn median_prune_values(
    history: &StudyHistory,
    current_intermediates: &[f64],
    epoch_index: usize,
) -> bool {
    if epoch_index < 1 || current_intermediates.is_empty() {
        return false;
    }
    let priors: Vec<f64> = history
        .completed()
        .filter_map(|t| t.intermediates.get(epoch_index).copied())
        .collect();
    if priors.is_empty() {
        return false;
    }
    let upto = current_intermediates.len().min(epoch_index + 1);
    let best = current_intermediates[..upto]
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    best < median(priors)
}

/// [`median_prune_values`] over a trial record.
pub fn median_prune(history: &StudyHistory, current: &Trial, epoch_index: usize) -> bool {
    median_prune_values(history, &current.intermediates, epoch_index)
}

#[derive(Debug, Clone, Copy)]
pub struct TpeConfig {
    /// Quantile separating good from bad completed trials.
    pub gamma: f64,
    /// Candidates drawn from the good-trial density per suggestion.
    pub n_candidates: usize,
    /// Suggestions served from the low-discrepancy sequence before the
    /// density model kicks in.
    pub startup_trials: usize,
}

impl Default for TpeConfig {
    fn default() -> Self {
        TpeConfig {
            gamma: DEFAULT_TPE_GAMMA,
            n_candidates: DEFAULT_TPE_CANDIDATES,
            startup_trials: DEFAULT_TPE_STARTUP,
        }
    }
}

/// Gaussian kernel density with a wide prior component at the bounds
/// midpoint (weight `1/(n+1)`), which regularizes tiny observation sets.
struct Kde {
    centers: Vec<f64>,
    bandwidths: Vec<f64>,
}

impl Kde {
    fn fit(observations: &[f64], bounds: &LrBounds) -> Kde {
        let range = bounds.high - bounds.low;
        let mut centers = vec![0.5 * (bounds.low + bounds.high)];
        let mut bandwidths = vec![range];
        if !observations.is_empty() {
            let n = observations.len() as f64;
            let mean = observations.iter().sum::<f64>() / n;
            let var = observations.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            // Scott's rule, floored by the discretization step.
            let scott = var.sqrt() * n.powf(-0.2);
            let bw = scott.max(bounds.discrete_step).max(1e-3 * range);
            for &x in observations {
                centers.push(x);
                bandwidths.push(bw);
            }
        }
        Kde { centers, bandwidths }
    }

    fn log_density(&self, x: f64) -> f64 {
        let n = self.centers.len() as f64;
        let logs: Vec<f64> = self
            .centers
            .iter()
            .zip(&self.bandwidths)
            .map(|(&c, &bw)| {
                let z = (x - c) / bw;
                -0.5 * z * z - bw.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
            })
            .collect();
        let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln() - n.ln()
    }

    fn sample(&self, rng: &mut SeededRng) -> f64 {
        let i = rng.index(self.centers.len());
        self.centers[i] + self.bandwidths[i] * rng.normal()
    }
}

/// Low-discrepancy startup point `i` within the bounds.
fn quasi_random_point(i: usize, bounds: &LrBounds) -> f64 {
    let frac = (0.5 + i as f64 * GOLDEN_FRACTION).fract();
    bounds.clamp_and_snap(bounds.low + frac * (bounds.high - bounds.low))
}

/// Proposes the next LR. The first `startup_trials` suggestions walk a
/// golden-ratio sequence; afterwards completed trials are split at the
/// `gamma` quantile of the objective into good and bad sets, a kernel
/// density is fit over each, and the best of `n_candidates` draws from the
/// good density by density ratio `l(x)/g(x)` wins. Suggestions always lie
/// within bounds and on the discretization grid.
pub fn tpe_suggest(
    history: &StudyHistory,
    bounds: &LrBounds,
    cfg: &TpeConfig,
    rng: &mut SeededRng,
) -> f64 {
    if history.trials.len() < cfg.startup_trials {
        return quasi_random_point(history.trials.len(), bounds);
    }
    let mut completed: Vec<(f64, f64)> =
        history.completed().map(|t| (t.lr, t.objective.unwrap())).collect();
    if completed.len() < 2 {
        return quasi_random_point(history.trials.len(), bounds);
    }
    // Maximize the objective: best trials first.
    completed.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let n_good = ((cfg.gamma * completed.len() as f64).ceil() as usize)
        .clamp(1, completed.len() - 1);
    let good: Vec<f64> = completed[..n_good].iter().map(|t| t.0).collect();
    let bad: Vec<f64> = completed[n_good..].iter().map(|t| t.0).collect();
    let l = Kde::fit(&good, bounds);
    let g = Kde::fit(&bad, bounds);
    let mut best_x = quasi_random_point(history.trials.len(), bounds);
    let mut best_score = f64::NEG_INFINITY;
    for _ in 0..cfg.n_candidates {
        let x = bounds.clamp_and_snap(l.sample(rng));
        let score = l.log_density(x) - g.log_density(x);
        if score > best_score {
            best_score = score;
            best_x = x;
        }
    }
    best_x
}

/// Drives one training trial at a fixed LR, reporting validation top-1
/// after each epoch. Returning `false` from `on_epoch` stops the trial
/// early. The return value is the final epoch's objective; `Err` signals
/// divergence.
pub trait TrialRunner {
    fn run_trial(
        &mut self,
        lr: f64,
        epoch_budget: usize,
        trial_seed: u64,
        on_epoch: &mut dyn FnMut(usize, f64) -> bool,
    ) -> Result<f64>;
}

fn execute_trial(
    runner: &mut dyn TrialRunner,
    history: &StudyHistory,
    lr: f64,
    epoch_budget: usize,
    trial_seed: u64,
    prune: bool,
) -> Trial {
    let mut trial = Trial::running(lr);
    let mut intermediates: Vec<f64> = Vec::new();
    let mut pruned = false;
    let result = runner.run_trial(lr, epoch_budget, trial_seed, &mut |epoch, top1| {
        intermediates.push(top1);
        if prune && median_prune_values(history, &intermediates, epoch) {
            pruned = true;
            return false;
        }
        true
    });
    trial.intermediates = intermediates;
    match result {
        Err(_) => trial.status = TrialStatus::Diverged,
        Ok(_) if pruned => trial.status = TrialStatus::Pruned,
        Ok(objective) => {
            trial.status = TrialStatus::Complete;
            trial.objective = Some(objective);
        }
    }
    trial
}

/// Uniform linear grid over the bounds, full-budget trials, best completed
/// objective wins. Fails (listing per-trial statuses) when nothing
/// completes.
pub fn grid_search_lr(
    runner: &mut dyn TrialRunner,
    bounds: &LrBounds,
    points: usize,
    epochs_per_trial: usize,
    seed: u64,
) -> Result<(f64, StudyHistory)> {
    if points < 2 {
        return Err(CoreError::invalid("grid search needs at least 2 points".to_string()));
    }
    let mut history = StudyHistory::default();
    let seeds = SeededRng::new(seed);
    for i in 0..points {
        let lr = bounds.low + i as f64 * (bounds.high - bounds.low) / (points - 1) as f64;
        let trial_seed = seeds.substream(&format!("trial{i}")).next_u64();
        let trial = execute_trial(runner, &history, lr, epochs_per_trial, trial_seed, false);
        history.trials.push(trial);
    }
    match history.best_completed() {
        Some(best) => Ok((best.lr, history)),
        None => {
            let statuses: Vec<String> = history
                .trials
                .iter()
                .map(|t| format!("lr={:.6}: {:?}", t.lr, t.status))
                .collect();
            Err(CoreError::Search(format!(
                "no grid trial completed: [{}]",
                statuses.join(", ")
            )))
        }
    }
}

#[derive(Debug, Clone)]
pub struct TpeSearchOutcome {
    pub best_lr: f64,
    pub history: StudyHistory,
    /// Set when every trial was pruned and `best_lr` falls back to the best
    /// pruned trial.
    pub all_pruned: bool,
}

/// TPE loop: suggest, train up to `epochs_per_trial` epochs with per-epoch
/// median pruning, record, repeat. Returns the best completed trial's LR,
/// or (flagged) the best pruned trial's when nothing completed.
pub fn tpe_search(
    runner: &mut dyn TrialRunner,
    bounds: &LrBounds,
    max_trials: usize,
    epochs_per_trial: usize,
    cfg: &TpeConfig,
    seed: u64,
) -> Result<TpeSearchOutcome> {
    if max_trials < 1 {
        return Err(CoreError::invalid("tpe_search needs at least one trial".to_string()));
    }
    let root = SeededRng::new(seed);
    let mut suggest_rng = root.substream("tpe/suggest");
    let mut history = StudyHistory::default();
    for i in 0..max_trials {
        let lr = tpe_suggest(&history, bounds, cfg, &mut suggest_rng);
        let trial_seed = root.substream(&format!("trial{i}")).next_u64();
        let trial = execute_trial(runner, &history, lr, epochs_per_trial, trial_seed, true);
        history.trials.push(trial);
    }
    if let Some(best) = history.best_completed() {
        return Ok(TpeSearchOutcome { best_lr: best.lr, history: history.clone(), all_pruned: false });
    }
    let best_pruned = history
        .trials
        .iter()
        .filter(|t| t.status == TrialStatus::Pruned)
        .max_by(|a, b| {
            let ba = a.intermediates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let bb = b.intermediates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            ba.partial_cmp(&bb).unwrap()
        });
    match best_pruned {
        Some(t) => Ok(TpeSearchOutcome { best_lr: t.lr, history: history.clone(), all_pruned: true }),
        None => Err(CoreError::Search("every TPE trial diverged".to_string())),
    }
}
