//! The training loop: linear warmup, plateau-driven LR decay with a forced
//! first decay and early stopping, a cosine baseline schedule, and the
//! dual-student mutual-learning orchestration.
//!
//! The scheduler watches the epoch-mean training loss to decide LR drops and
//! the validation top-1 to decide when to stop: once the LR has reached its
//! floor and validation stalls for `patience` epochs, training ends. If no
//! drop has happened by `forced_decay_fraction` of the epoch budget, one is
//! forced so the model converges even when the loss signal is noisy.

use crate::augment::{augmix, cutmix, mixup, AugmentPlan};
use crate::data::{batches, LabeledDataset, TrainValSplit};
use crate::error::{CoreError, Result};
use crate::eval::{evaluate_probs, EvalResult};
use crate::losses::{
    am_softmax_on_logits, cross_entropy, cross_entropy_pair, dml_losses, AmSoftmaxParams,
};
use crate::models::{
    cosine_logits_backward, cosine_logits_lenient, ClassifierModel, HeadMode, ModelKind,
    ModelParams, predict_probs,
};
use crate::optim::{build_nbd_groups, build_single_group, sam_step, sgd_step, ParamGroup, SamConfig};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const DEFAULT_MAX_EPOCHS: usize = 200;
pub const DEFAULT_WARMUP_EPOCHS: usize = 5;
pub const DEFAULT_PATIENCE: usize = 5;
pub const DEFAULT_DECAY_FACTOR: f64 = 0.1;
pub const DEFAULT_FORCED_DECAY_FRACTION: f64 = 0.75;
pub const DEFAULT_MIN_LR_RATIO: f64 = 1e-3;
pub const DEFAULT_TRAIN_IMPROVE_REL_THRESHOLD: f64 = 1e-4;
const HIST_BINS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    AmSoftmax,
    DmlPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    PlateauV2,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Sam { rho: f64 },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainLoopConfig {
    pub max_epochs: usize,
    pub warmup_epochs: usize,
    /// Shared by LR decay (train-loss plateau) and early stop (val stall).
    pub patience: usize,
    pub decay_factor: f64,
    pub min_lr: f64,
    pub forced_decay_fraction: f64,
    pub initial_lr: f64,
    pub batch_size: usize,
    pub schedule_kind: ScheduleKind,
    pub loss_kind: LossKind,
    /// Relative train-loss improvement below which an epoch counts as flat.
    pub train_improve_rel_threshold: f64,
}

impl TrainLoopConfig {
    /// The pipeline defaults: 200 epochs, 5-epoch warmup, patience 5,
    /// decay 0.1, forced decay at 75%, `min_lr = initial_lr / 1000`.
    pub fn defaults(initial_lr: f64, batch_size: usize) -> Self {
        TrainLoopConfig {
            max_epochs: DEFAULT_MAX_EPOCHS,
            warmup_epochs: DEFAULT_WARMUP_EPOCHS,
            patience: DEFAULT_PATIENCE,
            decay_factor: DEFAULT_DECAY_FACTOR,
            min_lr: initial_lr * DEFAULT_MIN_LR_RATIO,
            forced_decay_fraction: DEFAULT_FORCED_DECAY_FRACTION,
            initial_lr,
            batch_size,
            schedule_kind: ScheduleKind::PlateauV2,
            loss_kind: LossKind::Ce,
            train_improve_rel_threshold: DEFAULT_TRAIN_IMPROVE_REL_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.min_lr > 0.0 && self.min_lr < self.initial_lr) {
            return Err(CoreError::invalid(format!(
                "need 0 < min_lr < initial_lr, got min_lr={} initial_lr={}",
                self.min_lr, self.initial_lr
            )));
        }
        if !(self.forced_decay_fraction > 0.0 && self.forced_decay_fraction < 1.0) {
            return Err(CoreError::invalid(format!(
                "forced_decay_fraction {} outside (0, 1)",
                self.forced_decay_fraction
            )));
        }
        if self.warmup_epochs >= self.max_epochs {
            return Err(CoreError::invalid(format!(
                "warmup_epochs {} must be < max_epochs {}",
                self.warmup_epochs, self.max_epochs
            )));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(CoreError::invalid(format!(
                "decay_factor {} outside (0, 1)",
                self.decay_factor
            )));
        }
        if self.batch_size == 0 || self.patience == 0 {
            return Err(CoreError::invalid("batch_size and patience must be >= 1".to_string()));
        }
        Ok(())
    }

    /// Epoch index at which the forced decay becomes eligible.
    pub fn forced_decay_epoch(&self) -> usize {
        (self.forced_decay_fraction * self.max_epochs as f64).ceil() as usize
    }
}

/// Linear warmup: `initial_lr * (e+1) / warmup_epochs` for the first
/// `warmup_epochs` epochs, then the scheduler's current value applies.
pub fn warmup_lr(epoch_index: usize, config: &TrainLoopConfig) -> f64 {
    if config.warmup_epochs == 0 || epoch_index >= config.warmup_epochs {
        config.initial_lr
    } else {
        config.initial_lr * ((epoch_index + 1) as f64 / config.warmup_epochs as f64)
    }
}

/// Cosine annealing to zero over the full budget:
/// `0.5 * initial_lr * (1 + cos(pi * e / max_epochs))`.
pub fn cosine_lr(epoch_index: usize, config: &TrainLoopConfig) -> f64 {
    0.5 * config.initial_lr
        * (1.0 + (std::f64::consts::PI * epoch_index as f64 / config.max_epochs as f64).cos())
}

/// Mutable scheduler state across epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerState {
    pub current_lr: f64,
    pub best_avg_train_loss: Option<f64>,
    pub epochs_since_train_improve: usize,
    pub best_val_top1: Option<f64>,
    pub epochs_since_val_improve: usize,
    pub decays_done: usize,
    pub forced_decay_fired: bool,
}

impl SchedulerState {
    pub fn new(initial_lr: f64) -> Self {
        SchedulerState {
            current_lr: initial_lr,
            best_avg_train_loss: None,
            epochs_since_train_improve: 0,
            best_val_top1: None,
            epochs_since_val_improve: 0,
            decays_done: 0,
            forced_decay_fired: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulerAction {
    None,
    Decay { forced: bool },
    Stop { diverged: bool },
}

/// One post-warmup scheduler tick. In priority order: divergence stop,
/// early stop (LR at floor and validation stalled for `patience`), plateau
/// decay (train loss flat for `patience`), forced decay (past
/// `forced_decay_fraction` of the budget with no decay done yet).
pub fn plateau_v2_update(
    state: &mut SchedulerState,
    epoch_index: usize,
    avg_train_loss: f64,
    val_top1: f64,
    config: &TrainLoopConfig,
) -> SchedulerAction {
    if !avg_train_loss.is_finite() {
        return SchedulerAction::Stop { diverged: true };
    }

    let improved_train = match state.best_avg_train_loss {
        None => true,
        Some(best) => {
            avg_train_loss < best - config.train_improve_rel_threshold * best.abs()
        }
    };
    if improved_train {
        state.best_avg_train_loss = Some(avg_train_loss);
        state.epochs_since_train_improve = 0;
    } else {
        state.epochs_since_train_improve += 1;
    }

    let improved_val = match state.best_val_top1 {
        None => true,
        Some(best) => val_top1 > best,
    };
    if improved_val {
        state.best_val_top1 = Some(val_top1);
        state.epochs_since_val_improve = 0;
    } else {
        state.epochs_since_val_improve += 1;
    }

    if state.current_lr <= config.min_lr && state.epochs_since_val_improve >= config.patience {
        return SchedulerAction::Stop { diverged: false };
    }

    if state.epochs_since_train_improve >= config.patience && state.current_lr > config.min_lr {
        state.current_lr = (state.current_lr * config.decay_factor).max(config.min_lr);
        state.decays_done += 1;
        state.epochs_since_train_improve = 0;
        return SchedulerAction::Decay { forced: false };
    }

    if state.decays_done == 0
        && !state.forced_decay_fired
        && epoch_index >= config.forced_decay_epoch()
    {
        state.current_lr = (state.current_lr * config.decay_factor).max(config.min_lr);
        state.decays_done += 1;
        state.forced_decay_fired = true;
        state.epochs_since_train_improve = 0;
        return SchedulerAction::Decay { forced: true };
    }

    SchedulerAction::None
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Loss the second student of a mutual-learning pair trains with. The
/// regularizing setup pairs a cross-entropy fast student with an
/// AM-Softmax slow student; the symmetric variant trains two plain
/// cross-entropy students against each other's distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlowStudentObjective {
    #[default]
    AmSoftmax,
    CrossEntropy,
}

/// Everything `train` needs beyond the models and data.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainSetup {
    pub config: TrainLoopConfig,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    /// No-bias-decay grouping (zero decay and 2x LR for biases).
    pub nbd: bool,
    /// AM-Softmax settings: the slow student / direct AM-Softmax loss.
    pub am: AmSoftmaxParams,
    pub augment: AugmentPlan,
    #[serde(default)]
    pub slow_objective: SlowStudentObjective,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.augment.validate()?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CoreError::invalid(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(CoreError::invalid("weight_decay must be nonnegative".to_string()));
        }
        if let OptimizerKind::Sam { rho } = self.optimizer {
            SamConfig::new(rho)?;
        }
        if self.config.loss_kind != LossKind::Ce
            && (self.augment.mixup_alpha > 0.0 || self.augment.cutmix_alpha > 0.0)
        {
            return Err(CoreError::invalid(
                "mixup/cutmix targets are only defined for the cross-entropy loss".to_string(),
            ));
        }
        Ok(())
    }
}

/// Per-epoch callback: receives `(epoch_index, record)`; returning `false`
/// aborts the run (LR-search pruning uses this).
pub type EpochObserver<'a> = &'a mut dyn FnMut(usize, &EpochRecord) -> bool;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub avg_train_loss: f64,
    pub val_top1: f64,
    pub val_map: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
    Diverged,
    /// An external observer (LR-search pruning) requested the stop.
    Aborted,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainReport {
    /// Which member of a run this is: "single", "fast", or "slow".
    pub student: String,
    pub seed: u64,
    pub config: TrainLoopConfig,
    pub epochs: Vec<EpochRecord>,
    pub epochs_run: usize,
    pub stop_reason: StopReason,
    pub diverged: bool,
    pub final_eval: Option<EvalResult>,
}

/// Fast/slow pair of reports sharing `epochs_run` and `stop_reason`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PairReport {
    pub fast: TrainReport,
    pub slow: TrainReport,
}

enum PreparedTargets {
    Hard(Vec<usize>),
    Pair { y1: Vec<usize>, y2: Vec<usize>, w1: Vec<f64> },
}

struct PreparedBatch {
    x: Tensor,
    targets: PreparedTargets,
}

/// Applies AugMix per sample, then optionally MixUp/CutMix against a
/// shuffled partner (one Beta draw per batch).
fn prepare_batch(
    x: Tensor,
    labels: Vec<usize>,
    plan: &AugmentPlan,
    rng: &mut SeededRng,
) -> Result<PreparedBatch> {
    let mut x = x;
    if let Some(policy) = &plan.augmix {
        let sample_shape = x.shape()[1..].to_vec();
        for i in 0..x.rows() {
            let sample = Tensor::new(sample_shape.clone(), x.row(i).to_vec())?;
            let augmented = augmix(&sample, policy, rng)?;
            x.row_mut(i).copy_from_slice(augmented.values());
        }
    }
    let n = x.rows();
    let mixing = if plan.mixup_alpha > 0.0 {
        Some((plan.mixup_alpha, false))
    } else if plan.cutmix_alpha > 0.0 {
        Some((plan.cutmix_alpha, true))
    } else {
        None
    };
    let Some((alpha, is_cutmix)) = mixing else {
        return Ok(PreparedBatch { x, targets: PreparedTargets::Hard(labels) });
    };
    let lambda = rng.beta(alpha, alpha);
    let mut partner: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut partner);
    let sample_shape = x.shape()[1..].to_vec();
    let original = x.clone();
    let mut y2 = vec![0usize; n];
    let mut w1 = vec![0.0; n];
    for i in 0..n {
        let a = Tensor::new(sample_shape.clone(), original.row(i).to_vec())?;
        let b = Tensor::new(sample_shape.clone(), original.row(partner[i]).to_vec())?;
        let mixed = if is_cutmix {
            cutmix(&a, labels[i], &b, labels[partner[i]], lambda, rng)?
        } else {
            mixup(&a, labels[i], &b, labels[partner[i]], lambda)?
        };
        x.row_mut(i).copy_from_slice(mixed.x.values());
        y2[i] = mixed.label2;
        w1[i] = mixed.weight1;
    }
    Ok(PreparedBatch { x, targets: PreparedTargets::Pair { y1: labels, y2, w1 } })
}

/// Loss value and parameter gradients for a single-student batch.
fn single_loss_and_grads(
    model: &ModelKind,
    batch: &PreparedBatch,
    setup: &TrainSetup,
) -> Result<(f64, ModelParams)> {
    match setup.config.loss_kind {
        LossKind::Ce => {
            let fwd = model.forward(&batch.x)?;
            let out = match &batch.targets {
                PreparedTargets::Hard(y) => cross_entropy(&fwd.logits, y)?,
                PreparedTargets::Pair { y1, y2, w1 } => {
                    cross_entropy_pair(&fwd.logits, y1, y2, w1)?
                }
            };
            let grads = model.backward(&batch.x, &fwd, &out.dlogits)?;
            Ok((out.value, grads))
        }
        LossKind::AmSoftmax => {
            let PreparedTargets::Hard(y) = &batch.targets else {
                return Err(CoreError::invalid("soft targets unsupported for am_softmax".to_string()));
            };
            let fwd = model.forward(&batch.x)?;
            let head = model.head_weight_name().to_string();
            let weights = model
                .params()
                .get(&head)
                .ok_or_else(|| CoreError::invalid("missing head weight".to_string()))?;
            let z = cosine_logits_lenient(&fwd.features, weights, setup.am.scale)?;
            let out = am_softmax_on_logits(&z, y, &setup.am)?;
            let (dfeat, dweights) =
                cosine_logits_backward(&fwd.features, weights, setup.am.scale, &out.dlogits)?;
            let mut grads = model.backward_from_features(&batch.x, &fwd, &dfeat)?;
            let gw = grads.get_mut(&head).unwrap();
            for (g, &d) in gw.values_mut().iter_mut().zip(dweights.values()) {
                *g += d;
            }
            Ok((out.value, grads))
        }
        LossKind::DmlPair => Err(CoreError::invalid(
            "dml_pair requires train_pair with two students".to_string(),
        )),
    }
}

/// Fast student's mutual-learning loss against a frozen partner
/// distribution source (the slow student's pre-step cosine logits).
fn fast_loss_and_grads(
    model: &ModelKind,
    x: &Tensor,
    labels: &[usize],
    slow_logits_snapshot: &Tensor,
    am: &AmSoftmaxParams,
) -> Result<(f64, ModelParams)> {
    let fwd = model.forward(x)?;
    let (fast, _) = dml_losses(&fwd.logits, slow_logits_snapshot, labels, am)?;
    let grads = model.backward(x, &fwd, &fast.dlogits)?;
    Ok((fast.value, grads))
}

/// Slow student's mutual-learning loss against the fast student's frozen
/// affine logits, differentiated through the cosine head.
fn slow_loss_and_grads(
    model: &ModelKind,
    x: &Tensor,
    labels: &[usize],
    fast_logits_snapshot: &Tensor,
    am: &AmSoftmaxParams,
) -> Result<(f64, ModelParams)> {
    let fwd = model.forward(x)?;
    let head = model.head_weight_name().to_string();
    let weights = model
        .params()
        .get(&head)
        .ok_or_else(|| CoreError::invalid("missing head weight".to_string()))?;
    let z = cosine_logits_lenient(&fwd.features, weights, am.scale)?;
    let (_, slow) = dml_losses(fast_logits_snapshot, &z, labels, am)?;
    let (dfeat, dweights) = cosine_logits_backward(&fwd.features, weights, am.scale, &slow.dlogits)?;
    let mut grads = model.backward_from_features(x, &fwd, &dfeat)?;
    let gw = grads.get_mut(&head).unwrap();
    for (g, &d) in gw.values_mut().iter_mut().zip(dweights.values()) {
        *g += d;
    }
    Ok((slow.value, grads))
}

fn is_divergence(err: &CoreError) -> bool {
    matches!(err, CoreError::Diverged(_) | CoreError::NonFinite(_))
}

/// One optimizer step for one student; returns the batch loss at the
/// unperturbed weights.
fn step_student<F>(
    model: &mut ModelKind,
    groups: &mut [ParamGroup],
    setup: &TrainSetup,
    lr: f64,
    mut grad_fn: F,
) -> Result<f64>
where
    F: FnMut(&ModelKind) -> Result<(f64, ModelParams)>,
{
    match setup.optimizer {
        OptimizerKind::Sgd => {
            let (loss, grads) = grad_fn(model)?;
            if !loss.is_finite() {
                return Err(CoreError::Diverged(format!("non-finite batch loss {loss}")));
            }
            sgd_step(model.params_mut(), groups, &grads, lr)?;
            Ok(loss)
        }
        OptimizerKind::Sam { rho } => {
            let info = sam_step(model, groups, SamConfig { rho }, lr, grad_fn)?;
            Ok(info.loss)
        }
    }
}

/// Head used for validation/eval per loss kind. Cosine-trained students
/// (direct AM-Softmax, the default DML slow student) predict with their
/// scaled cosine logits; everything else uses the affine head.
pub fn eval_head(setup: &TrainSetup, student_is_slow: bool) -> HeadMode {
    let cosine = HeadMode::Cosine { scale: setup.am.scale };
    match (setup.config.loss_kind, student_is_slow) {
        (LossKind::AmSoftmax, _) => cosine,
        (LossKind::DmlPair, true) if setup.slow_objective == SlowStudentObjective::AmSoftmax => {
            cosine
        }
        _ => HeadMode::Affine,
    }
}

/// Evaluates a model on a dataset under the given head.
pub fn evaluate_model(model: &ModelKind, data: &LabeledDataset, head: HeadMode) -> Result<EvalResult> {
    let probs = predict_probs(model, &data.features, head)?;
    evaluate_probs(&probs, &data.labels, HIST_BINS)
}

fn build_groups(model: &ModelKind, setup: &TrainSetup) -> Result<Vec<ParamGroup>> {
    if setup.nbd {
        build_nbd_groups(model.params(), setup.weight_decay, setup.momentum)
    } else {
        build_single_group(model.params(), setup.weight_decay, setup.momentum)
    }
}

/// Trains one student. The model arrives pre-initialized; `seed` drives
/// batching and augmentation, so identical `(model, setup, seed)` triples
/// reproduce the run exactly. The observer, when present, sees each epoch
/// record and may return `false` to abort (used by trial pruning).
pub fn train_single_with_observer(
    model: &mut ModelKind,
    data: &TrainValSplit,
    setup: &TrainSetup,
    seed: u64,
    mut observer: Option<EpochObserver<'_>>,
) -> Result<TrainReport> {
    setup.validate()?;
    if setup.config.loss_kind == LossKind::DmlPair {
        return Err(CoreError::invalid("dml_pair needs train_pair".to_string()));
    }
    let root = SeededRng::new(seed);
    let mut groups = build_groups(model, setup)?;
    let mut state = SchedulerState::new(setup.config.initial_lr);
    let head = eval_head(setup, false);
    let mut epochs: Vec<EpochRecord> = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let mut diverged = false;

    'outer: for epoch in 0..setup.config.max_epochs {
        let lr = schedule_lr(epoch, &setup.config, &state);
        let mut loss_sum = 0.0;
        let mut samples = 0usize;
        for (bi, idx) in batches(data.train.len(), setup.config.batch_size, seed, epoch)
            .into_iter()
            .enumerate()
        {
            let (x, y) = data.train.gather(&idx);
            let mut aug_rng = root.substream(&format!("augment/e{epoch}/b{bi}"));
            let batch = prepare_batch(x, y, &setup.augment, &mut aug_rng)?;
            match step_student(model, &mut groups, setup, lr, |m| {
                single_loss_and_grads(m, &batch, setup)
            }) {
                Ok(loss) => {
                    loss_sum += loss * idx.len() as f64;
                    samples += idx.len();
                }
                Err(e) if is_divergence(&e) => {
                    diverged = true;
                    stop_reason = StopReason::Diverged;
                    break 'outer;
                }
                Err(e) => return Err(e),
            }
        }
        let avg_train_loss = loss_sum / samples as f64;
        let val = evaluate_model(model, &data.val, head)?;
        let record = EpochRecord {
            epoch,
            lr,
            avg_train_loss,
            val_top1: val.top1,
            val_map: val.map,
        };
        epochs.push(record.clone());

        if setup.config.schedule_kind == ScheduleKind::PlateauV2
            && epoch >= setup.config.warmup_epochs
        {
            match plateau_v2_update(&mut state, epoch, avg_train_loss, val.top1, &setup.config) {
                SchedulerAction::Stop { diverged: d } => {
                    diverged |= d;
                    stop_reason = if d { StopReason::Diverged } else { StopReason::EarlyStop };
                    break;
                }
                SchedulerAction::Decay { .. } | SchedulerAction::None => {}
            }
        }
        if let Some(obs) = observer.as_mut() {
            if !obs(epoch, &record) {
                stop_reason = StopReason::Aborted;
                break;
            }
        }
    }

    let final_eval = if diverged { None } else { Some(evaluate_model(model, &data.val, head)?) };
    Ok(TrainReport {
        student: "single".to_string(),
        seed,
        config: setup.config.clone(),
        epochs_run: epochs.len(),
        epochs,
        stop_reason,
        diverged,
        final_eval,
    })
}

pub fn train_single(
    model: &mut ModelKind,
    data: &TrainValSplit,
    setup: &TrainSetup,
    seed: u64,
) -> Result<TrainReport> {
    train_single_with_observer(model, data, setup, seed, None)
}

/// Trains the fast/slow mutual-learning pair. Both students step from the
/// same pre-step snapshot each batch, so the update is order-independent.
/// The scheduler follows the mean of the two training losses and the fast
/// student's validation top-1.
pub fn train_pair(
    fast: &mut ModelKind,
    slow: &mut ModelKind,
    data: &TrainValSplit,
    setup: &TrainSetup,
    seed: u64,
) -> Result<PairReport> {
    setup.validate()?;
    if setup.config.loss_kind != LossKind::DmlPair {
        return Err(CoreError::invalid("train_pair requires loss_kind = dml_pair".to_string()));
    }
    if fast.class_count() != slow.class_count() {
        return Err(CoreError::invalid("students must share the class count".to_string()));
    }
    let root = SeededRng::new(seed);
    let mut fast_groups = build_groups(fast, setup)?;
    let mut slow_groups = build_groups(slow, setup)?;
    let mut state = SchedulerState::new(setup.config.initial_lr);
    let fast_head = eval_head(setup, false);
    let slow_head = eval_head(setup, true);
    let mut fast_epochs: Vec<EpochRecord> = Vec::new();
    let mut slow_epochs: Vec<EpochRecord> = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let mut diverged = false;

    'outer: for epoch in 0..setup.config.max_epochs {
        let lr = schedule_lr(epoch, &setup.config, &state);
        let mut fast_loss_sum = 0.0;
        let mut slow_loss_sum = 0.0;
        let mut samples = 0usize;
        for (bi, idx) in batches(data.train.len(), setup.config.batch_size, seed, epoch)
            .into_iter()
            .enumerate()
        {
            let (x, y) = data.train.gather(&idx);
            let mut aug_rng = root.substream(&format!("augment/e{epoch}/b{bi}"));
            let batch = prepare_batch(x, y, &setup.augment, &mut aug_rng)?;
            let PreparedTargets::Hard(labels) = &batch.targets else {
                unreachable!("validate() rejects soft targets for dml_pair");
            };
            // Pre-step partner snapshots keep each KL target constant across
            // both SAM passes and make the two updates simultaneous.
            let step = (|| -> Result<(f64, f64)> {
                let fast_fwd = fast.forward(&batch.x)?;
                let slow_fwd = slow.forward(&batch.x)?;
                let slow_weights = slow.params().get(slow.head_weight_name()).unwrap();
                let fast_snapshot = fast_fwd.logits.clone();
                let slow_snapshot = match setup.slow_objective {
                    SlowStudentObjective::AmSoftmax => {
                        cosine_logits_lenient(&slow_fwd.features, slow_weights, setup.am.scale)?
                    }
                    SlowStudentObjective::CrossEntropy => slow_fwd.logits.clone(),
                };
                let fl = step_student(fast, &mut fast_groups, setup, lr, |m| {
                    fast_loss_and_grads(m, &batch.x, labels, &slow_snapshot, &setup.am)
                })?;
                let sl = step_student(slow, &mut slow_groups, setup, lr, |m| {
                    match setup.slow_objective {
                        SlowStudentObjective::AmSoftmax => {
                            slow_loss_and_grads(m, &batch.x, labels, &fast_snapshot, &setup.am)
                        }
                        // The symmetric pair trains the partner with the
                        // same CE + KL objective on its affine head.
                        SlowStudentObjective::CrossEntropy => {
                            fast_loss_and_grads(m, &batch.x, labels, &fast_snapshot, &setup.am)
                        }
                    }
                })?;
                Ok((fl, sl))
            })();
            match step {
                Ok((fl, sl)) => {
                    fast_loss_sum += fl * idx.len() as f64;
                    slow_loss_sum += sl * idx.len() as f64;
                    samples += idx.len();
                }
                Err(e) if is_divergence(&e) => {
                    diverged = true;
                    stop_reason = StopReason::Diverged;
                    break 'outer;
                }
                Err(e) => return Err(e),
            }
        }
        let fast_avg = fast_loss_sum / samples as f64;
        let slow_avg = slow_loss_sum / samples as f64;
        let fast_val = evaluate_model(fast, &data.val, fast_head)?;
        let slow_val = evaluate_model(slow, &data.val, slow_head)?;
        fast_epochs.push(EpochRecord {
            epoch,
            lr,
            avg_train_loss: fast_avg,
            val_top1: fast_val.top1,
            val_map: fast_val.map,
        });
        slow_epochs.push(EpochRecord {
            epoch,
            lr,
            avg_train_loss: slow_avg,
            val_top1: slow_val.top1,
            val_map: slow_val.map,
        });

        if setup.config.schedule_kind == ScheduleKind::PlateauV2
            && epoch >= setup.config.warmup_epochs
        {
            let combined = 0.5 * (fast_avg + slow_avg);
            match plateau_v2_update(&mut state, epoch, combined, fast_val.top1, &setup.config) {
                SchedulerAction::Stop { diverged: d } => {
                    diverged |= d;
                    stop_reason = if d { StopReason::Diverged } else { StopReason::EarlyStop };
                    break;
                }
                SchedulerAction::Decay { .. } | SchedulerAction::None => {}
            }
        }
    }

    let mk_report = |student: &str, epochs: Vec<EpochRecord>, final_eval: Option<EvalResult>| {
        TrainReport {
            student: student.to_string(),
            seed,
            config: setup.config.clone(),
            epochs_run: epochs.len(),
            epochs,
            stop_reason,
            diverged,
            final_eval,
        }
    };
    let (fast_final, slow_final) = if diverged {
        (None, None)
    } else {
        (
            Some(evaluate_model(fast, &data.val, fast_head)?),
            Some(evaluate_model(slow, &data.val, slow_head)?),
        )
    };
    Ok(PairReport {
        fast: mk_report("fast", fast_epochs, fast_final),
        slow: mk_report("slow", slow_epochs, slow_final),
    })
}

fn schedule_lr(epoch: usize, config: &TrainLoopConfig, state: &SchedulerState) -> f64 {
    match config.schedule_kind {
        ScheduleKind::Cosine => cosine_lr(epoch, config),
        ScheduleKind::PlateauV2 => {
            if epoch < config.warmup_epochs {
                warmup_lr(epoch, config)
            } else {
                state.current_lr
            }
        }
    }
}
