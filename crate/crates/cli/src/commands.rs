//! Subcommand implementations shared by the binary and the test suites.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};

use adaptune_core::control::{eval_head, evaluate_model};
use adaptune_core::data::{save_csv, stratified_split, SplitSpec};
use adaptune_core::eval::true_class_ranks;
use adaptune_core::models::predict_probs;
use adaptune_core::rng::SeededRng;
use adaptune_core::search::save_history_jsonl;

use crate::config::{load_dataset_uri, RunConfig};
use crate::pipeline::{
    ablation_arms, apply_weights, compare_arms, execute_run, Arm, ComparisonReport, RunArtifacts,
};
use crate::weights::{load_weights, save_weights};

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn ensure_out_dir(out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

/// `train`: resolve the LR, train, write `report.json`, weights, and (when
/// a search ran) `trials.jsonl`. Returns the artifacts for callers that
/// want the in-memory report.
pub fn cmd_train(config: &RunConfig, out: &Path) -> anyhow::Result<RunArtifacts> {
    ensure_out_dir(out)?;
    let artifacts = execute_run(config)?;
    write_json(&artifacts.report, &out.join("report.json"))?;
    for (name, params) in &artifacts.weights {
        save_weights(params, &out.join(name))?;
    }
    if let Some(history) = &artifacts.history {
        save_history_jsonl(history, &out.join("trials.jsonl"))?;
    }
    let primary = artifacts.primary_report();
    println!(
        "trained {} for {} epochs (stop: {:?}, lr {:.6}){}",
        artifacts.report.dataset,
        primary.epochs_run,
        primary.stop_reason,
        artifacts.report.chosen_lr,
        primary
            .final_eval
            .as_ref()
            .map(|e| format!(", top-1 {:.4}, mAP {:.4}", e.top1, e.map))
            .unwrap_or_default(),
    );
    Ok(artifacts)
}

/// `lr-find`: run one estimator and report the proposal without training to
/// completion. Writes `lr.json` plus `trials.jsonl` for grid/tpe.
pub fn cmd_lr_find(config: &RunConfig, method: &str, out: &Path) -> anyhow::Result<f64> {
    ensure_out_dir(out)?;
    let mut config = config.clone();
    config.lr.source = match method {
        "fastai" | "fastai-pretrain" | "grid" | "tpe" => method.replace('-', "_"),
        other => bail!("unknown lr-find method {other:?} (fastai | fastai-pretrain | grid | tpe)"),
    };
    config.validate()?;

    let dataset = config.load_dataset()?;
    let split = stratified_split(
        &dataset,
        SplitSpec { train_fraction: config.dataset.train_fraction, seed: config.seed },
    )?;
    let image_shaped = dataset.sample_shape().len() == 2;
    let spec = config.model_spec()?;
    let root = SeededRng::new(config.seed);
    let model = spec.build(dataset.sample_shape(), dataset.class_count, &mut root.substream("init"))?;
    let placeholder_lr = 0.5 * (config.lr.low + config.lr.high);
    let base_setup = config.train_setup(placeholder_lr, dataset.class_count, image_shaped)?;
    let resolution = crate::pipeline::resolve_lr(&config, &model, &split, &base_setup)?;

    if let Some(history) = &resolution.history {
        save_history_jsonl(history, &out.join("trials.jsonl"))?;
    }
    let summary = serde_json::json!({
        "schema_version": crate::pipeline::REPORT_SCHEMA_VERSION,
        "kind": "lr_find",
        "method": config.lr.source,
        "dataset": dataset.name,
        "seed": config.seed,
        "lr": resolution.lr,
        "all_trials_pruned": resolution.all_pruned,
        "trials_recorded": resolution.history.as_ref().map_or(0, |h| h.trials.len()),
    });
    write_json(&summary, &out.join("lr.json"))?;
    println!("proposed lr: {:.6} ({})", resolution.lr, config.lr.source);
    Ok(resolution.lr)
}

/// `eval`: load weights, evaluate on the config's validation split, write
/// `eval.json` and optionally per-sample ranks as CSV.
pub fn cmd_eval(
    config: &RunConfig,
    weights_path: &Path,
    out: &Path,
    ranks_csv: Option<&Path>,
) -> anyhow::Result<()> {
    ensure_out_dir(out)?;
    let dataset = config.load_dataset()?;
    let split = stratified_split(
        &dataset,
        SplitSpec { train_fraction: config.dataset.train_fraction, seed: config.seed },
    )?;
    let spec = config.model_spec()?;
    let root = SeededRng::new(config.seed);
    let mut model =
        spec.build(dataset.sample_shape(), dataset.class_count, &mut root.substream("init"))?;
    apply_weights(&mut model, load_weights(weights_path)?)?;
    let image_shaped = dataset.sample_shape().len() == 2;
    let setup = config.train_setup(config.lr.value.max(0.01), dataset.class_count, image_shaped)?;
    let head = eval_head(&setup, false);
    let result = evaluate_model(&model, &split.val, head)?;
    let summary = serde_json::json!({
        "schema_version": crate::pipeline::REPORT_SCHEMA_VERSION,
        "kind": "eval",
        "dataset": dataset.name,
        "seed": config.seed,
        "weights": weights_path.display().to_string(),
        "result": result,
    });
    write_json(&summary, &out.join("eval.json"))?;
    if let Some(csv_path) = ranks_csv {
        let probs = predict_probs(&model, &split.val.features, head)?;
        let ranks = true_class_ranks(&probs, &split.val.labels)?;
        let mut text = String::from("index,label,rank,max_prob\n");
        for (i, rank) in ranks.iter().enumerate() {
            let maxp = probs.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            text.push_str(&format!("{i},{},{rank},{maxp}\n", split.val.labels[i]));
        }
        std::fs::write(csv_path, text)?;
    }
    println!(
        "eval on {}: top-1 {:.4}, top-5 {:.4}, mAP {:.4} ({} samples)",
        dataset.name, result.top1, result.top5, result.map, result.n_samples
    );
    Ok(())
}

fn print_comparison(report: &ComparisonReport) {
    println!(
        "{:<40} {:>10} {:>10} {:>10} {:>12} {:>8}",
        "arm", "AVG top-1", "AVG top-5", "AVG mAP", "AVG epochs", "failed"
    );
    for row in &report.rows {
        println!(
            "{:<40} {:>10.4} {:>10.4} {:>10.4} {:>12.1} {:>8}",
            row.arm, row.avg_top1, row.avg_top5, row.avg_map, row.avg_epochs, row.failed_cells
        );
    }
    if let Some(ratio) = report.epoch_savings_ratio {
        println!("epoch ratio (adaptive / baseline): {ratio:.3}");
    }
}

/// `compare`: baseline vs adaptive over datasets x seeds.
pub fn cmd_compare(
    baseline: &RunConfig,
    adaptive: &RunConfig,
    datasets: &[String],
    seeds: &[u64],
    out: &Path,
) -> anyhow::Result<ComparisonReport> {
    ensure_out_dir(out)?;
    if datasets.is_empty() || seeds.is_empty() {
        bail!("compare needs at least one dataset and one seed");
    }
    let arms = vec![
        Arm { name: "baseline".to_string(), config: baseline.clone() },
        Arm { name: "adaptive".to_string(), config: adaptive.clone() },
    ];
    let report = compare_arms(&arms, datasets, seeds);
    write_json(&report, &out.join("comparison.json"))?;
    print_comparison(&report);
    Ok(report)
}

/// `ablate`: the full config against single-component removals.
pub fn cmd_ablate(
    config: &RunConfig,
    datasets: &[String],
    seeds: &[u64],
    out: &Path,
) -> anyhow::Result<ComparisonReport> {
    ensure_out_dir(out)?;
    if datasets.is_empty() || seeds.is_empty() {
        bail!("ablate needs at least one dataset and one seed");
    }
    let arms = ablation_arms(config);
    if arms.len() < 2 {
        bail!("nothing to ablate: enable sam/dml/am_softmax/augmix/nbd or the adaptive schedule");
    }
    let report = compare_arms(&arms, datasets, seeds);
    write_json(&report, &out.join("comparison.json"))?;
    print_comparison(&report);
    Ok(report)
}

/// `gen-data`: materialize a synthetic dataset as CSV.
pub fn cmd_gen_data(uri: &str, out_file: &Path) -> anyhow::Result<()> {
    let dataset = load_dataset_uri(uri)?;
    if let Some(parent) = out_file.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    save_csv(&dataset, out_file)?;
    println!(
        "wrote {} samples x {:?} features, C={} -> {}",
        dataset.len(),
        dataset.sample_shape(),
        dataset.class_count,
        out_file.display()
    );
    Ok(())
}

/// Parses `--datasets a,b,c` / `--seeds 1,2,3` lists.
pub fn parse_list(raw: &str) -> Vec<String> {
    raw.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

pub fn parse_seeds(raw: &str) -> anyhow::Result<Vec<u64>> {
    parse_list(raw)
        .into_iter()
        .map(|s| s.parse::<u64>().with_context(|| format!("bad seed {s:?}")))
        .collect()
}

/// Default datasets bundled for `compare`/`ablate` when none are given.
pub fn default_datasets() -> Vec<String> {
    vec![
        "synthetic:gaussian_blobs?C=3&dims=2&n=60&seed=11&difficulty=2.2".to_string(),
        "synthetic:gaussian_blobs?C=5&dims=4&n=40&seed=12&difficulty=2.0".to_string(),
        "synthetic:ring_classes?C=3&dims=2&n=60&seed=13&difficulty=3.0".to_string(),
        "synthetic:noisy_blobs?C=3&dims=2&n=60&seed=14&difficulty=2.5&noise=0.1".to_string(),
        "synthetic:gaussian_blobs?C=4&dims=3&n=50&seed=15&difficulty=1.8".to_string(),
    ]
}

pub fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.unwrap_or_else(|| PathBuf::from("out"))
}
