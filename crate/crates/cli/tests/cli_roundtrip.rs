//! Integration tests for the command layer: file outputs, determinism of
//! report bytes, weights round-trips through `eval`, ablation shape, and
//! the binary's exit codes.

use std::path::Path;
use std::process::Command;

use adaptune::commands::{cmd_ablate, cmd_eval, cmd_gen_data, cmd_lr_find, cmd_train};
use adaptune::config::RunConfig;
use adaptune::pipeline::{run_matrix, summarize, Arm, RunReportFile};
use adaptune::weights::load_weights;

const BLOBS: &str = "synthetic:gaussian_blobs?C=3&dims=2&n=60&seed=11&difficulty=2.5";

fn quick_config(extra: &str) -> RunConfig {
    let text = format!(
        r#"
seed = 7
[dataset]
uri = "{BLOBS}"
[model]
kind = "mlp"
hidden = 8
[schedule]
kind = "plateau_v2"
max_epochs = 12
warmup_epochs = 2
[lr]
source = "fixed"
value = 0.05
[train]
batch_size = 16
{extra}
"#
    );
    RunConfig::parse(&text, &[]).unwrap()
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn train_writes_report_and_weights() {
    let dir = tempfile::tempdir().unwrap();
    let artifacts = cmd_train(&quick_config(""), dir.path()).unwrap();
    assert!(!artifacts.diverged());
    let report: RunReportFile = serde_json::from_value(read_json(&dir.path().join("report.json"))).unwrap();
    assert_eq!(report.kind, "train_report");
    assert_eq!(report.reports.len(), 1);
    assert_eq!(report.reports[0].epochs_run, report.reports[0].epochs.len());
    let weights = load_weights(&dir.path().join("weights.bin")).unwrap();
    assert_eq!(weights.len(), 4); // two dense layers, weight + bias each
}

#[test]
fn train_report_bytes_deterministic_modulo_timestamp() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    cmd_train(&quick_config(""), a.path()).unwrap();
    cmd_train(&quick_config(""), b.path()).unwrap();
    let mut ja = read_json(&a.path().join("report.json"));
    let mut jb = read_json(&b.path().join("report.json"));
    ja["created_unix"] = serde_json::json!(0);
    jb["created_unix"] = serde_json::json!(0);
    assert_eq!(
        serde_json::to_string(&ja).unwrap(),
        serde_json::to_string(&jb).unwrap()
    );
    // Weights files are byte-identical outright.
    assert_eq!(
        std::fs::read(a.path().join("weights.bin")).unwrap(),
        std::fs::read(b.path().join("weights.bin")).unwrap()
    );
}

#[test]
fn train_report_matches_published_schema() {
    let dir = tempfile::tempdir().unwrap();
    cmd_train(&quick_config(""), dir.path()).unwrap();
    let report = read_json(&dir.path().join("report.json"));
    let schema_path =
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/schemas/train_report.schema.json");
    let schema: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(schema_path).unwrap()).unwrap();
    let required = schema["required"].as_array().unwrap();
    for key in required {
        assert!(
            report.get(key.as_str().unwrap()).is_some(),
            "report.json missing {key}"
        );
    }
}

#[test]
fn eval_reproduces_training_final_metrics_and_ranks() {
    let dir = tempfile::tempdir().unwrap();
    let config = quick_config("");
    let artifacts = cmd_train(&config, dir.path()).unwrap();
    let trained_eval = artifacts.primary_report().final_eval.clone().unwrap();
    let ranks_csv = dir.path().join("ranks.csv");
    cmd_eval(&config, &dir.path().join("weights.bin"), dir.path(), Some(&ranks_csv)).unwrap();
    let eval_json = read_json(&dir.path().join("eval.json"));
    assert_eq!(eval_json["result"]["top1"].as_f64().unwrap(), trained_eval.top1);
    assert_eq!(eval_json["result"]["map"].as_f64().unwrap(), trained_eval.map);
    let ranks = std::fs::read_to_string(&ranks_csv).unwrap();
    let mut lines = ranks.lines();
    assert_eq!(lines.next(), Some("index,label,rank,max_prob"));
    assert_eq!(lines.count(), trained_eval.n_samples);
}

#[test]
fn lr_find_tpe_writes_history_and_proposal() {
    let dir = tempfile::tempdir().unwrap();
    let config = quick_config(
        r#"
"#,
    );
    let lr = cmd_lr_find(&config, "tpe", dir.path()).unwrap();
    assert!((0.005..=0.03).contains(&lr));
    let summary = read_json(&dir.path().join("lr.json"));
    assert_eq!(summary["method"], "tpe");
    assert_eq!(summary["trials_recorded"], 15);
    let history = std::fs::read_to_string(dir.path().join("trials.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 15);
    // Every proposal lies on the discretization grid.
    for line in history.lines() {
        let trial: serde_json::Value = serde_json::from_str(line).unwrap();
        let lr = trial["lr"].as_f64().unwrap();
        let steps = (lr - 0.005) / 0.001;
        assert!((steps - steps.round()).abs() < 1e-9, "off-grid trial lr {lr}");
    }
    assert!(cmd_lr_find(&config, "warp", dir.path()).is_err());
}

#[test]
fn tpe_run_report_names_trials_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = quick_config("");
    config.lr.source = "tpe".to_string();
    config.lr.tpe_trials = 5;
    config.lr.tpe_epochs = 3;
    cmd_train(&config, dir.path()).unwrap();
    let report = read_json(&dir.path().join("report.json"));
    assert_eq!(report["trials_path"], "trials.jsonl");
    assert!(report["chosen_lr"].as_f64().unwrap() > 0.0);
    assert!(dir.path().join("trials.jsonl").exists());
}

#[test]
fn gen_data_roundtrips_through_csv_uri() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("blobs.csv");
    cmd_gen_data(BLOBS, &csv_path).unwrap();
    let mut config = quick_config("");
    config.dataset.uri = format!("csv:{}", csv_path.display());
    let loaded = config.load_dataset().unwrap();
    assert_eq!(loaded.len(), 180);
    assert_eq!(loaded.class_count, 3);
}

#[test]
fn dml_pair_run_emits_two_reports_and_two_weight_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = quick_config("\n[loss]\nkind = \"dml_pair\"\n");
    let artifacts = cmd_train(&config, dir.path()).unwrap();
    assert_eq!(artifacts.report.reports.len(), 2);
    assert_eq!(artifacts.report.reports[0].student, "fast");
    assert_eq!(artifacts.report.reports[1].student, "slow");
    assert!(dir.path().join("weights.bin").exists());
    assert!(dir.path().join("weights_slow.bin").exists());
}

#[test]
fn identical_arms_produce_identical_rows() {
    let config = quick_config("");
    let arms = vec![
        Arm { name: "a".to_string(), config: config.clone() },
        Arm { name: "b".to_string(), config },
    ];
    let datasets = vec![BLOBS.to_string()];
    let seeds = vec![1u64, 2];
    let cells = run_matrix(&arms, &datasets, &seeds, 1);
    let rows = summarize(&arms, &datasets, &cells);
    assert_eq!(rows[0].avg_top1, rows[1].avg_top1);
    assert_eq!(rows[0].avg_map, rows[1].avg_map);
    assert_eq!(rows[0].avg_epochs, rows[1].avg_epochs);
}

#[test]
fn thread_count_does_not_change_results() {
    let config = quick_config("");
    let arms = vec![Arm { name: "only".to_string(), config }];
    let datasets = vec![
        BLOBS.to_string(),
        "synthetic:ring_classes?C=3&dims=2&n=50&seed=9".to_string(),
    ];
    let seeds = vec![1u64, 2, 3];
    let sequential = run_matrix(&arms, &datasets, &seeds, 1);
    let parallel = run_matrix(&arms, &datasets, &seeds, 4);
    assert_eq!(sequential, parallel);
}

#[test]
fn ablation_produces_component_rows() {
    let dir = tempfile::tempdir().unwrap();
    let config = quick_config(
        r#"
[optimizer]
kind = "sam"
rho = 0.05
[augment]
augmix = true
"#,
    );
    let report = cmd_ablate(
        &config,
        &[BLOBS.to_string()],
        &[1],
        dir.path(),
    )
    .unwrap();
    let names: Vec<&str> = report.rows.iter().map(|r| r.arm.as_str()).collect();
    assert_eq!(
        names,
        vec!["full", "w/o SAM", "w/o AugMix", "w/o NBD", "w/o adaptive learning rate strategy"]
    );
    assert!(dir.path().join("comparison.json").exists());
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("run.toml");
    std::fs::write(
        &config_path,
        format!(
            r#"
[dataset]
uri = "{BLOBS}"
[model]
kind = "softmax_regression"
[schedule]
max_epochs = 5
warmup_epochs = 0
[lr]
source = "fixed"
value = 0.05
"#
        ),
    )
    .unwrap();
    let bin = env!("CARGO_BIN_EXE_adaptune");
    let ok = Command::new(bin)
        .args(["train", "--config"])
        .arg(&config_path)
        .args(["--out"])
        .arg(dir.path().join("ok"))
        .output()
        .unwrap();
    assert!(ok.status.success(), "stderr: {}", String::from_utf8_lossy(&ok.stderr));

    // A divergent run exits nonzero but still writes its report. The MLP
    // compounds the oversized steps until the logits overflow.
    let diverged = Command::new(bin)
        .args(["train", "--config"])
        .arg(&config_path)
        .args(["--override", "model.kind=mlp", "--override", "model.hidden=8"])
        .args(["--override", "lr.value=1e13", "--override", "schedule.min_lr_ratio=0.5"])
        .args(["--out"])
        .arg(dir.path().join("bad"))
        .output()
        .unwrap();
    assert_eq!(diverged.status.code(), Some(2));
    assert!(dir.path().join("bad/report.json").exists());

    // Config errors name the offending key and exit 1.
    let bad_key = Command::new(bin)
        .args(["train", "--config"])
        .arg(&config_path)
        .args(["--override", "schedule.bogus_knob=1"])
        .output()
        .unwrap();
    assert_eq!(bad_key.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad_key.stderr).contains("bogus_knob"));
}
