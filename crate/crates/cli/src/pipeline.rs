//! Run orchestration: dataset loading, model init, LR resolution through
//! the search module, training, and multi-arm comparison matrices.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use adaptune_core::control::{
    train_pair, train_single, train_single_with_observer, EpochRecord, LossKind, TrainReport,
    TrainSetup,
};
use adaptune_core::data::{stratified_split, SplitSpec, TrainValSplit};
use adaptune_core::error::{CoreError, Result as CoreResult};
use adaptune_core::models::{ClassifierModel, ModelKind, ModelParams};
use adaptune_core::rng::SeededRng;
use adaptune_core::search::{
    estimate_lr_fastai, estimate_lr_with_pretrain, grid_search_lr, tpe_search,
    FastaiEstimateConfig, StudyHistory, TpeConfig, TrialRunner,
};

use crate::config::{LrSource, RunConfig};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Serialized as `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReportFile {
    pub schema_version: u32,
    pub kind: String,
    pub created_unix: u64,
    pub dataset: String,
    pub seed: u64,
    pub lr_source: String,
    pub chosen_lr: f64,
    /// Set when every LR-search trial was pruned and the chosen LR fell
    /// back to the best pruned trial.
    pub all_trials_pruned: bool,
    pub trials_recorded: usize,
    /// Relative path of the trial history (JSON lines), when a search ran.
    pub trials_path: Option<String>,
    pub config: RunConfig,
    /// One report for single-student runs, fast + slow for the DML pair.
    pub reports: Vec<TrainReport>,
}

pub struct RunArtifacts {
    pub report: RunReportFile,
    /// `(file name, parameters)` pairs to persist.
    pub weights: Vec<(String, ModelParams)>,
    pub history: Option<StudyHistory>,
}

impl RunArtifacts {
    pub fn diverged(&self) -> bool {
        self.report.reports.iter().any(|r| r.diverged)
    }

    /// The deployable student's report (fast student for DML pairs).
    pub fn primary_report(&self) -> &TrainReport {
        &self.report.reports[0]
    }
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Trial-budgeted variant of the run's setup: constant LR after (possibly
/// shortened) warmup, plateau and forced decay disabled, early stop
/// impossible within the budget.
fn trial_setup(base: &TrainSetup, lr: f64, budget: usize) -> TrainSetup {
    let mut s = base.clone();
    let min_ratio = base.config.min_lr / base.config.initial_lr;
    s.config.initial_lr = lr;
    s.config.min_lr = lr * min_ratio;
    s.config.max_epochs = budget;
    s.config.warmup_epochs = s.config.warmup_epochs.min(budget.saturating_sub(1));
    s.config.patience = budget + 1;
    s.config.forced_decay_fraction = 0.99;
    // Search trials always score a single student; the pair objective is
    // reserved for the final training run.
    if s.config.loss_kind == LossKind::DmlPair {
        s.config.loss_kind = LossKind::Ce;
    }
    s
}

/// Runs LR-search trials by training a fresh copy of the base model.
pub struct TrialTrainer<'a> {
    pub base_model: &'a ModelKind,
    pub data: &'a TrainValSplit,
    pub base_setup: &'a TrainSetup,
}

impl TrialRunner for TrialTrainer<'_> {
    fn run_trial(
        &mut self,
        lr: f64,
        epoch_budget: usize,
        trial_seed: u64,
        on_epoch: &mut dyn FnMut(usize, f64) -> bool,
    ) -> CoreResult<f64> {
        let mut model = self.base_model.clone();
        let setup = trial_setup(self.base_setup, lr, epoch_budget);
        let mut last = 0.0;
        let mut obs = |epoch: usize, record: &EpochRecord| {
            last = record.val_top1;
            on_epoch(epoch, record.val_top1)
        };
        let report =
            train_single_with_observer(&mut model, self.data, &setup, trial_seed, Some(&mut obs))?;
        if report.diverged {
            return Err(CoreError::Diverged(format!("trial at lr {lr} diverged")));
        }
        Ok(last)
    }
}

pub struct LrResolution {
    pub lr: f64,
    pub history: Option<StudyHistory>,
    pub all_pruned: bool,
}

/// Resolves the initial learning rate per `lr.source`, running the search
/// module when needed.
pub fn resolve_lr(
    config: &RunConfig,
    model: &ModelKind,
    split: &TrainValSplit,
    base_setup: &TrainSetup,
) -> anyhow::Result<LrResolution> {
    let bounds = config.lr_bounds()?;
    let search_seed = SeededRng::new(config.seed).substream("lr-search").next_u64();
    let mut fastai_cfg = FastaiEstimateConfig::new(config.lr.range_iterations, search_seed);
    fastai_cfg.pretrain_batch_size = config.train.batch_size;
    match config.lr_source()? {
        LrSource::Fixed => {
            if config.lr.value <= 0.0 || config.lr.value.is_nan() {
                bail!("lr.source = \"fixed\" needs a positive lr.value");
            }
            Ok(LrResolution { lr: config.lr.value, history: None, all_pruned: false })
        }
        LrSource::Fastai => {
            let lr = estimate_lr_fastai(model, &split.train, &bounds, &fastai_cfg)?;
            Ok(LrResolution { lr, history: None, all_pruned: false })
        }
        LrSource::FastaiPretrain => {
            let lr = estimate_lr_with_pretrain(
                model,
                &split.train,
                bounds.low,
                &bounds,
                &fastai_cfg,
            )?;
            Ok(LrResolution { lr, history: None, all_pruned: false })
        }
        LrSource::Grid => {
            let mut runner = TrialTrainer { base_model: model, data: split, base_setup };
            let (lr, history) = grid_search_lr(
                &mut runner,
                &bounds,
                config.lr.grid_points,
                config.lr.grid_epochs,
                search_seed,
            )?;
            Ok(LrResolution { lr, history: Some(history), all_pruned: false })
        }
        LrSource::Tpe => {
            let mut runner = TrialTrainer { base_model: model, data: split, base_setup };
            let out = tpe_search(
                &mut runner,
                &bounds,
                config.lr.tpe_trials,
                config.lr.tpe_epochs,
                &TpeConfig::default(),
                search_seed,
            )?;
            Ok(LrResolution { lr: out.best_lr, history: Some(out.history), all_pruned: out.all_pruned })
        }
    }
}

/// Full run: load data, split, init models, resolve LR, train, package the
/// report and final weights.
pub fn execute_run(config: &RunConfig) -> anyhow::Result<RunArtifacts> {
    config.validate()?;
    let dataset = config.load_dataset()?;
    let dataset_name = dataset.name.clone();
    let split = stratified_split(
        &dataset,
        SplitSpec { train_fraction: config.dataset.train_fraction, seed: config.seed },
    )?;
    let image_shaped = dataset.sample_shape().len() == 2;
    let class_count = dataset.class_count;
    let spec = config.model_spec()?;
    let root = SeededRng::new(config.seed);
    let loss_kind = config.loss_kind()?;

    // The search phase needs a fully-formed setup; the initial LR in it is
    // a placeholder that trial runs replace.
    let placeholder_lr = if config.lr.value > 0.0 {
        config.lr.value
    } else {
        0.5 * (config.lr.low + config.lr.high)
    };
    let base_setup = config.train_setup(placeholder_lr, class_count, image_shaped)?;

    let mut primary = spec.build(
        dataset.sample_shape(),
        class_count,
        &mut root.substream(if loss_kind == LossKind::DmlPair { "init/fast" } else { "init" }),
    )?;

    let resolution = resolve_lr(config, &primary, &split, &base_setup)
        .context("resolving the initial learning rate")?;
    let setup = config.train_setup(resolution.lr, class_count, image_shaped)?;

    let (reports, weights) = if loss_kind == LossKind::DmlPair {
        let mut slow =
            spec.build(dataset.sample_shape(), class_count, &mut root.substream("init/slow"))?;
        let pair = train_pair(&mut primary, &mut slow, &split, &setup, config.seed)?;
        (
            vec![pair.fast, pair.slow],
            vec![
                ("weights.bin".to_string(), primary.params().clone()),
                ("weights_slow.bin".to_string(), slow.params().clone()),
            ],
        )
    } else {
        let report = train_single(&mut primary, &split, &setup, config.seed)?;
        (vec![report], vec![("weights.bin".to_string(), primary.params().clone())])
    };

    let report = RunReportFile {
        schema_version: REPORT_SCHEMA_VERSION,
        kind: "train_report".to_string(),
        created_unix: now_unix(),
        dataset: dataset_name,
        seed: config.seed,
        lr_source: config.lr_source()?.as_str().to_string(),
        chosen_lr: resolution.lr,
        all_trials_pruned: resolution.all_pruned,
        trials_recorded: resolution.history.as_ref().map_or(0, |h| h.trials.len()),
        trials_path: resolution.history.as_ref().map(|_| "trials.jsonl".to_string()),
        config: config.clone(),
        reports,
    };
    Ok(RunArtifacts { report, weights, history: resolution.history })
}

/// Replaces a freshly built model's parameters with loaded ones, checking
/// names and shapes.
pub fn apply_weights(model: &mut ModelKind, loaded: ModelParams) -> anyhow::Result<()> {
    let current = model.params();
    if loaded.len() != current.len() {
        bail!("weights file has {} tensors, model expects {}", loaded.len(), current.len());
    }
    for p in current.iter() {
        let l = loaded
            .get(&p.name)
            .with_context(|| format!("weights file is missing tensor {:?}", p.name))?;
        if l.shape() != p.tensor.shape() {
            bail!(
                "tensor {:?} has shape {:?} in file, model expects {:?}",
                p.name,
                l.shape(),
                p.tensor.shape()
            );
        }
    }
    *model.params_mut() = loaded;
    Ok(())
}

// ---------------------------------------------------------------------------
// Comparison matrix
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Arm {
    pub name: String,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellResult {
    pub arm: String,
    pub dataset: String,
    pub seed: u64,
    /// `ok`, `diverged`, or `error: ...`.
    pub status: String,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub map: Option<f64>,
    pub epochs: Option<usize>,
    pub chosen_lr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonRow {
    pub arm: String,
    pub avg_top1: f64,
    pub avg_top5: f64,
    pub avg_map: f64,
    pub avg_epochs: f64,
    pub failed_cells: usize,
}

/// Serialized as `comparison.json` by `compare` and `ablate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonReport {
    pub schema_version: u32,
    pub kind: String,
    pub created_unix: u64,
    pub datasets: Vec<String>,
    pub seeds: Vec<u64>,
    pub rows: Vec<ComparisonRow>,
    /// `adaptive avg_epochs / baseline avg_epochs` for two-arm comparisons.
    pub epoch_savings_ratio: Option<f64>,
    pub cells: Vec<CellResult>,
}

fn run_cell(arm: &Arm, dataset: &str, seed: u64) -> CellResult {
    let mut config = arm.config.clone();
    config.dataset.uri = dataset.to_string();
    config.seed = seed;
    let base = CellResult {
        arm: arm.name.clone(),
        dataset: dataset.to_string(),
        seed,
        status: String::new(),
        top1: None,
        top5: None,
        map: None,
        epochs: None,
        chosen_lr: None,
    };
    match execute_run(&config) {
        Err(e) => CellResult { status: format!("error: {e:#}"), ..base },
        Ok(artifacts) => {
            let report = artifacts.primary_report();
            if artifacts.diverged() {
                return CellResult {
                    status: "diverged".to_string(),
                    epochs: Some(report.epochs_run),
                    chosen_lr: Some(artifacts.report.chosen_lr),
                    ..base
                };
            }
            let eval = report.final_eval.as_ref().expect("non-diverged run has an eval");
            CellResult {
                status: "ok".to_string(),
                top1: Some(eval.top1),
                top5: Some(eval.top5),
                map: Some(eval.map),
                epochs: Some(report.epochs_run),
                chosen_lr: Some(artifacts.report.chosen_lr),
                ..base
            }
        }
    }
}

/// Worker-count from `ADAPTUNE_THREADS` (default 1).
pub fn configured_threads() -> usize {
    std::env::var("ADAPTUNE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Runs every `(arm, dataset, seed)` cell, optionally across worker
/// threads. Each cell is independently seeded, so the outcome is identical
/// regardless of the thread count; assembly order is fixed.
pub fn run_matrix(arms: &[Arm], datasets: &[String], seeds: &[u64], threads: usize) -> Vec<CellResult> {
    let mut jobs: Vec<(usize, &Arm, &str, u64)> = Vec::new();
    let mut k = 0;
    for arm in arms {
        for dataset in datasets {
            for &seed in seeds {
                jobs.push((k, arm, dataset.as_str(), seed));
                k += 1;
            }
        }
    }
    let results: Mutex<Vec<Option<CellResult>>> = Mutex::new(vec![None; jobs.len()]);
    let cursor = AtomicUsize::new(0);
    let workers = threads.clamp(1, jobs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = cursor.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let (slot, arm, dataset, seed) = jobs[i];
                let cell = run_cell(arm, dataset, seed);
                results.lock().unwrap()[slot] = Some(cell);
            });
        }
    });
    results.into_inner().unwrap().into_iter().map(|c| c.expect("all cells ran")).collect()
}

/// Aggregates cells into per-arm rows: seeds average within a dataset,
/// datasets contribute equally to the final mean.
pub fn summarize(arms: &[Arm], datasets: &[String], cells: &[CellResult]) -> Vec<ComparisonRow> {
    arms.iter()
        .map(|arm| {
            let mut per_dataset: Vec<(f64, f64, f64, f64)> = Vec::new();
            let mut failed = 0usize;
            for dataset in datasets {
                let ok: Vec<&CellResult> = cells
                    .iter()
                    .filter(|c| c.arm == arm.name && &c.dataset == dataset)
                    .inspect(|c| {
                        if c.status != "ok" {
                            failed += 1;
                        }
                    })
                    .filter(|c| c.status == "ok")
                    .collect();
                if ok.is_empty() {
                    continue;
                }
                let n = ok.len() as f64;
                per_dataset.push((
                    ok.iter().map(|c| c.top1.unwrap()).sum::<f64>() / n,
                    ok.iter().map(|c| c.top5.unwrap()).sum::<f64>() / n,
                    ok.iter().map(|c| c.map.unwrap()).sum::<f64>() / n,
                    ok.iter().map(|c| c.epochs.unwrap() as f64).sum::<f64>() / n,
                ));
            }
            let n = per_dataset.len().max(1) as f64;
            ComparisonRow {
                arm: arm.name.clone(),
                avg_top1: per_dataset.iter().map(|d| d.0).sum::<f64>() / n,
                avg_top5: per_dataset.iter().map(|d| d.1).sum::<f64>() / n,
                avg_map: per_dataset.iter().map(|d| d.2).sum::<f64>() / n,
                avg_epochs: per_dataset.iter().map(|d| d.3).sum::<f64>() / n,
                failed_cells: failed,
            }
        })
        .collect()
}

/// Two-arm (or N-arm for ablation) comparison over datasets x seeds.
pub fn compare_arms(arms: &[Arm], datasets: &[String], seeds: &[u64]) -> ComparisonReport {
    let cells = run_matrix(arms, datasets, seeds, configured_threads());
    let rows = summarize(arms, datasets, &cells);
    let epoch_savings_ratio = if rows.len() == 2 && rows[0].avg_epochs > 0.0 {
        Some(rows[1].avg_epochs / rows[0].avg_epochs)
    } else {
        None
    };
    ComparisonReport {
        schema_version: REPORT_SCHEMA_VERSION,
        kind: "comparison_report".to_string(),
        created_unix: now_unix(),
        datasets: datasets.to_vec(),
        seeds: seeds.to_vec(),
        rows,
        epoch_savings_ratio,
        cells,
    }
}

/// Ablation arms: the full configuration plus one arm per enabled
/// component with that component turned off.
pub fn ablation_arms(base: &RunConfig) -> Vec<Arm> {
    let mut arms = vec![Arm { name: "full".to_string(), config: base.clone() }];
    if base.optimizer.kind == "sam" {
        let mut c = base.clone();
        c.optimizer.kind = "sgd".to_string();
        arms.push(Arm { name: "w/o SAM".to_string(), config: c });
    }
    if base.loss.kind == "dml_pair" {
        let mut c = base.clone();
        c.loss.kind = "ce".to_string();
        arms.push(Arm { name: "w/o Mutual Learning".to_string(), config: c });
    }
    if base.loss.kind == "am_softmax" {
        let mut c = base.clone();
        c.loss.kind = "ce".to_string();
        arms.push(Arm { name: "w/o AM-Softmax".to_string(), config: c });
    }
    if base.augment.augmix {
        let mut c = base.clone();
        c.augment.augmix = false;
        arms.push(Arm { name: "w/o AugMix".to_string(), config: c });
    }
    if base.optimizer.nbd {
        let mut c = base.clone();
        c.optimizer.nbd = false;
        arms.push(Arm { name: "w/o NBD".to_string(), config: c });
    }
    if base.schedule.kind == "plateau_v2" || base.lr.source != "fixed" {
        let mut c = base.clone();
        c.schedule.kind = "cosine".to_string();
        c.lr.source = "fixed".to_string();
        if c.lr.value <= 0.0 || c.lr.value.is_nan() {
            c.lr.value = 0.5 * (c.lr.low + c.lr.high);
        }
        arms.push(Arm { name: "w/o adaptive learning rate strategy".to_string(), config: c });
    }
    arms
}
