use std::collections::BTreeSet;
use std::path::Path;

use fedskew::fedcli::{
    self, emit_report, load_summaries, plan, render_report, run_experiments, ExperimentConfig, RunOptions,
    RunStatus, RunSummary, GAP_CSV_HEADER,
};
use fedskew::metrics::FairnessSummary;
use fedskew::Error;
use serde_json::{json, Value};

fn tiny_config() -> Value {
    json!({
        "seed": 3,
        "dataset": {
            "kind": "synthetic", "classes": 4, "vocab_size": 60, "train_per_class": 30,
            "test_per_class": 10, "doc_length": 6, "topic_concentration": 0.05, "seed": 2, "max_seq_len": 6
        },
        "models": [{
            "model": { "family": "textcnn", "embed_dim": 6, "filters_per_width": 4 },
            "training": { "optimizer": { "kind": "sgd", "lr": 0.05 }, "local_epochs": 1, "batch_size": 16 }
        }],
        "partition": { "alphas": [1.0], "num_clients": 3 },
        "federation": { "rounds": 2, "aggregators": [{ "kind": "fedavg" }] }
    })
}

fn tiny_lora_model() -> Value {
    json!({
        "model": { "family": "loraformer", "layers": 1, "d_model": 8, "heads": 2, "ffn_dim": 8,
                   "lora_rank": 2, "backbone": "random_frozen" },
        "training": { "optimizer": { "kind": "adamw", "lr": 0.01 }, "local_epochs": 1, "batch_size": 16 }
    })
}

fn parse(v: &Value) -> fedskew::Result<ExperimentConfig> {
    let cfg = ExperimentConfig::from_json(&v.to_string())?;
    cfg.validate()?;
    Ok(cfg)
}

fn config_error_path(v: &Value) -> String {
    match parse(v) {
        Err(Error::Config { path, .. }) => path,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn plan_sizes() {
    let mut v = tiny_config();
    assert_eq!(plan(&parse(&v).unwrap()).unwrap().len(), 1);

    v["partition"]["alphas"] = json!([0.1, 0.5, 1.0, 5.0]);
    v["models"].as_array_mut().unwrap().push(tiny_lora_model());
    let eight = plan(&parse(&v).unwrap()).unwrap();
    assert_eq!(eight.len(), 8);
    let ids: BTreeSet<&str> = eight.iter().map(|r| r.run_id.as_str()).collect();
    assert_eq!(ids.len(), 8);
    assert!(eight.iter().all(|r| r.run_id.len() == 16));
    assert!(eight.iter().enumerate().all(|(i, r)| r.index == i));

    v["partition"]["alphas"] = json!([0.1]);
    v["models"] = json!([tiny_lora_model()]);
    v["federation"]["aggregators"] = json!([{ "kind": "fedavgw", "betas": [0.1, 0.5] }]);
    assert_eq!(plan(&parse(&v).unwrap()).unwrap().len(), 2);
    v["federation"]["aggregators"] = json!([{ "kind": "fedavg" }, { "kind": "fedavgw", "betas": [0.1, 0.5] }]);
    let three = plan(&parse(&v).unwrap()).unwrap();
    assert_eq!(three.len(), 3);
    assert!(three.iter().all(|r| r.spec.partition == three[0].spec.partition));
}

#[test]
fn defaults_are_recorded_in_the_plan() {
    let cfg = parse(&tiny_config()).unwrap();
    let run = &plan(&cfg).unwrap()[0];
    assert_eq!(run.spec.model.num_classes(), 4);
    assert_eq!(run.spec.partition.seed, 42);
    assert_eq!(run.spec.partition.max_redraws, 100);
    assert_eq!(run.spec.participation, 1.0);
    assert_eq!(run.spec.metrics.convergence_window, 5);
    assert_eq!(run.spec.model_label, "textcnn");
    let spec_json = serde_json::to_value(&run.spec).unwrap();
    assert_eq!(spec_json["model"]["filter_widths"], json!([2, 3, 4]));
    assert_eq!(spec_json["model"]["dropout"], json!(0.5));
}

/// Rebuilds every object with its keys in reverse order.
fn reverse_keys(v: &Value) -> String {
    match v {
        Value::Object(m) => {
            let parts: Vec<String> = m
                .iter()
                .rev()
                .map(|(k, x)| format!("{}:{}", Value::String(k.clone()), reverse_keys(x)))
                .collect();
            format!("{{{}}}", parts.join(","))
        }
        Value::Array(a) => format!("[{}]", a.iter().map(reverse_keys).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

#[test]
fn run_ids_are_stable() {
    let mut v = tiny_config();
    v["partition"]["alphas"] = json!([0.1, 5.0]);
    let ids = |cfg: &ExperimentConfig| -> Vec<String> { plan(cfg).unwrap().into_iter().map(|r| r.run_id).collect() };
    let base = ids(&parse(&v).unwrap());

    let text = reverse_keys(&v);
    assert_ne!(text, v.to_string());
    let permuted = ExperimentConfig::from_json(&text).unwrap();
    assert_eq!(ids(&permuted), base);

    let mut explicit = v.clone();
    explicit["partition"]["seed"] = json!(42);
    explicit["federation"]["participation"] = json!(1.0);
    explicit["models"][0]["model"]["dropout"] = json!(0.5);
    assert_eq!(ids(&parse(&explicit).unwrap()), base);

    let mut reseeded = v.clone();
    reseeded["seed"] = json!(4);
    let other = ids(&parse(&reseeded).unwrap());
    assert!(other.iter().all(|id| !base.contains(id)));
}

#[test]
fn unknown_keys_and_bad_ranges_name_the_field() {
    let mut v = tiny_config();
    v["modelz"] = json!([]);
    assert!(matches!(parse(&v), Err(Error::Config { .. })));

    let mut v = tiny_config();
    v["partition"]["alphaz"] = json!([1.0]);
    assert!(config_error_path(&v).starts_with("partition"));

    let mut v = tiny_config();
    v["models"][0]["training"]["optimizer"]["momentum"] = json!(0.9);
    assert!(config_error_path(&v).starts_with("models[0].training.optimizer"));

    let cases = [
        ("/partition/alphas", json!([]), "partition.alphas"),
        ("/partition/alphas", json!([1.0, -0.1]), "partition.alphas[1]"),
        ("/partition/num_clients", json!(0), "partition.num_clients"),
        ("/federation/rounds", json!(0), "federation.rounds"),
        ("/federation/participation", json!(1.5), "federation.participation"),
        ("/federation/aggregators", json!([]), "federation.aggregators"),
        ("/federation/aggregators", json!([{ "kind": "fedavgw", "betas": [0.1, -1.0] }]), "federation.aggregators[0].betas[1]"),
        ("/models", json!([]), "models"),
        ("/models/0/training/local_epochs", json!(0), "models[0].training.local_epochs"),
        ("/models/0/training/optimizer/lr", json!(-1.0), "models[0].training.optimizer.lr"),
        ("/dataset/classes", json!(0), "dataset.classes"),
    ];
    for (pointer, value, path) in cases {
        let mut v = tiny_config();
        let (parent, key) = pointer.rsplit_once('/').unwrap();
        v.pointer_mut(parent).unwrap()[key] = value;
        assert_eq!(config_error_path(&v), path, "{pointer}");
    }

    let mut v = tiny_config();
    v["models"][0]["model"]["num_classes"] = json!(3);
    assert_eq!(config_error_path(&v), "models[0].model.num_classes");

    let mut v = tiny_config();
    v["partition"]["alphas"] = json!([1.0, 1.0]);
    assert!(matches!(plan(&parse(&v).unwrap()), Err(Error::Config { .. })));
}

#[test]
fn load_resolves_paths_against_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = tiny_config();
    v["output_dir"] = json!("results");
    v["dataset"] = json!({ "kind": "csv", "train": "data/train.csv", "test": "data/test.csv" });
    let path = dir.path().join("exp.json");
    std::fs::write(&path, v.to_string()).unwrap();
    let cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg.default_output_dir(), dir.path().join("results"));
    match &cfg.dataset {
        fedcli::DatasetSpec::Csv(c) => assert_eq!(c.train, dir.path().join("data/train.csv")),
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        ExperimentConfig::load(&dir.path().join("missing.json")),
        Err(Error::Io { .. })
    ));
}

fn opts(out: &Path, jobs: usize) -> RunOptions {
    RunOptions {
        out_dir: out.to_path_buf(),
        jobs,
        verbose: false,
    }
}

#[test]
fn sweep_writes_per_run_artifacts_and_isolates_failures() {
    let mut v = tiny_config();
    v["partition"]["alphas"] = json!([0.3, 3.0]);
    let mut broken = v["models"][0].clone();
    broken["name"] = json!("unstable");
    broken["training"]["optimizer"]["lr"] = json!(1e300);
    v["models"].as_array_mut().unwrap().push(broken);
    let cfg = parse(&v).unwrap();
    let out = tempfile::tempdir().unwrap();
    let summaries = run_experiments(&cfg, &opts(out.path(), 2)).unwrap();
    assert_eq!(summaries.len(), 4);
    for s in &summaries {
        let dir = out.path().join(&s.run_id);
        assert!(dir.join("partition.json").is_file());
        assert!(dir.join("summary.json").is_file());
        assert_eq!(&RunSummary::load(&dir.join("summary.json")).unwrap(), s);
        if s.spec.model_label == "unstable" {
            assert_eq!(s.status, RunStatus::Failed);
            assert!(s.error.as_deref().unwrap().contains("diverged"), "{:?}", s.error);
        } else {
            assert_eq!(s.status, RunStatus::Completed, "{:?}", s.error);
            assert_eq!(s.rounds_completed, 2);
            assert_eq!(s.gap_series.len(), 2);
            let rows = fedskew::metrics::read_rounds_csv(&dir.join("rounds.csv")).unwrap();
            assert_eq!(rows.len(), 2 * 3);
        }
    }
    let csv = std::fs::read_to_string(out.path().join("gap_vs_alpha.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), GAP_CSV_HEADER.join(","));
    assert_eq!(csv.lines().count(), 1 + 2, "one row per completed run");
    let md = std::fs::read_to_string(out.path().join("report.md")).unwrap();
    assert!(md.contains("## Failed runs"));

    // regenerating from disk reproduces the same report
    let loaded = load_summaries(out.path()).unwrap();
    assert_eq!(loaded, summaries);
    assert_eq!(render_report(&loaded), md);
}

#[test]
fn rerun_and_worker_count_give_identical_rounds() {
    let mut v = tiny_config();
    v["partition"]["alphas"] = json!([0.5]);
    v["models"].as_array_mut().unwrap().push(tiny_lora_model());
    let cfg = parse(&v).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run_experiments(&cfg, &opts(a.path(), 1)).unwrap();
    run_experiments(&cfg, &opts(b.path(), 4)).unwrap();
    for s in &first {
        let read = |root: &Path| std::fs::read(root.join(&s.run_id).join("rounds.csv")).unwrap();
        assert_eq!(read(a.path()), read(b.path()));
    }
}

fn fake_summary(cfg: &ExperimentConfig, index: usize, avg: f64, worst: f64) -> RunSummary {
    let run = plan(cfg).unwrap().remove(index);
    RunSummary {
        run_id: run.run_id,
        index,
        spec: run.spec,
        status: RunStatus::Completed,
        error: None,
        rounds_completed: 1,
        final_summary: Some(FairnessSummary {
            avg,
            worst,
            gap: avg - worst,
            argmin_client: 0,
        }),
        converged: false,
        avg_series: vec![avg],
        worst_series: vec![worst],
        gap_series: vec![avg - worst],
        skew: None,
        wall_time_secs: 0.0,
    }
}

fn table_rows(md: &str) -> Vec<&str> {
    md.lines()
        .filter(|l| l.starts_with("| ") && !l.starts_with("| α") && !l.starts_with("| Model") && !l.starts_with("| Method"))
        .collect()
}

#[test]
fn report_tables() {
    let cfg = parse(&tiny_config()).unwrap();
    let one = render_report(&[fake_summary(&cfg, 0, 0.9, 0.8)]);
    assert_eq!(table_rows(&one), vec!["| 1.0 | textcnn | 90.0 | 80.0 | 10.0 | no |"]);

    let mut v = tiny_config();
    v["partition"]["alphas"] = json!([0.1, 0.5]);
    v["models"].as_array_mut().unwrap().push(tiny_lora_model());
    let cfg = parse(&v).unwrap();
    let summaries = vec![
        fake_summary(&cfg, 0, 0.866, 0.545),
        fake_summary(&cfg, 1, 0.808, 0.307),
        fake_summary(&cfg, 2, 0.956, 0.919),
        fake_summary(&cfg, 3, 0.936, 0.923),
    ];
    let md = render_report(&summaries);
    let rows = table_rows(&md);
    assert_eq!(rows[0], "| 0.1 | textcnn | 86.6 | 54.5 | 32.1 | no |");
    assert_eq!(rows[1], "| 0.1 | loraformer | 80.8 | 30.7 | **50.1** | no |");
    assert_eq!(rows[2], "| 0.5 | textcnn | 95.6 | 91.9 | **3.7** | no |");
    assert_eq!(rows[3], "| 0.5 | loraformer | 93.6 | 92.3 | 1.3 | no |");
    assert!(rows[4].starts_with("| textcnn | FedAvg | 0.1 | 0.5 | 32.1 | 3.7 | 8.7× |"), "{}", rows[4]);
    assert!(!md.contains("FedAvg vs FedAvgW"));
}

#[test]
fn fedavgw_comparison_and_number_parity() {
    let mut v = tiny_config();
    v["partition"]["alphas"] = json!([0.1]);
    v["models"] = json!([tiny_lora_model()]);
    v["federation"]["aggregators"] = json!([{ "kind": "fedavg" }, { "kind": "fedavgw", "betas": [0.1, 0.5] }]);
    let cfg = parse(&v).unwrap();
    let summaries = vec![
        fake_summary(&cfg, 0, 0.783, 0.205),
        fake_summary(&cfg, 1, 0.781, 0.196),
        fake_summary(&cfg, 2, 0.772, 0.174),
    ];
    let out = tempfile::tempdir().unwrap();
    let files = emit_report(&summaries, out.path()).unwrap();
    let md = std::fs::read_to_string(&files.report_md).unwrap();
    let rows = table_rows(&md);
    assert_eq!(
        &rows[3..],
        [
            "| FedAvg | 78.3 | **20.5** | 57.8 |",
            "| FedAvgW (β = 0.1) | 78.1 | 19.6 | 58.5 |",
            "| FedAvgW (β = 0.5) | 77.2 | 17.4 | 59.8 |",
            "| Δ (best FedAvgW vs FedAvg) | -0.2 | -0.9 | +0.7 |",
        ]
    );
    assert!(md.contains("FedAvgW (β = 0.1), lowers worst-client accuracy"));

    // every decimal printed in the report is some CSV value at one decimal
    let mut printed = BTreeSet::new();
    for p in [&files.gap_csv, &files.reduction_csv, &files.comparison_csv] {
        let mut r = csv::Reader::from_path(p).unwrap();
        for rec in r.records() {
            for field in rec.unwrap().iter() {
                if let Ok(x) = field.parse::<f64>() {
                    printed.insert(format!("{x:.1}"));
                    printed.insert(format!("{x:?}"));
                }
            }
        }
    }
    for token in md.split(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-')) {
        let token = token.trim_matches('.');
        if token.contains('.') && token.parse::<f64>().is_ok() {
            assert!(printed.contains(token), "{token} not in any CSV");
        }
    }
}

fn cli(args: &[&str]) -> i32 {
    let mut full = vec!["fedskew"];
    full.extend_from_slice(args);
    fedcli::main(full)
}

#[test]
fn command_line_verbs_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("exp.json");
    std::fs::write(&cfg_path, tiny_config().to_string()).unwrap();
    let cfg = cfg_path.to_str().unwrap();
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();

    assert_eq!(cli(&["run", cfg, "--out", out_s, "--rounds", "1", "--jobs", "2"]), 0);
    let summaries = load_summaries(&out).unwrap();
    assert_eq!(summaries.len(), 1);
    assert_eq!(summaries[0].rounds_completed, 1);
    let report = std::fs::read(out.join("report.md")).unwrap();
    std::fs::remove_file(out.join("report.md")).unwrap();
    assert_eq!(cli(&["report", out_s]), 0);
    assert_eq!(std::fs::read(out.join("report.md")).unwrap(), report);

    assert_eq!(cli(&["run", cfg, "--out", out_s, "--rounds", "1", "--seed", "99"]), 0);
    let reseeded = load_summaries(&out).unwrap();
    assert_eq!(reseeded.len(), 2);
    assert!(reseeded.iter().any(|s| s.spec.seed == 99));

    assert_eq!(cli(&["partition", cfg, "--out", out_s]), 0);
    assert!(out.join("partitions").join("alpha-1.json").is_file());

    let mut bad = tiny_config();
    bad["federation"]["rounds"] = json!(0);
    std::fs::write(&cfg_path, bad.to_string()).unwrap();
    assert_eq!(cli(&["run", cfg, "--out", out_s]), 1);
    assert_eq!(cli(&["run", dir.path().join("nope.json").to_str().unwrap()]), 1);
    assert_eq!(cli(&["report", dir.path().join("empty").to_str().unwrap()]), 1);
    assert_eq!(cli(&["frobnicate"]), 1);

    let mut diverging = tiny_config();
    diverging["models"][0]["training"]["optimizer"]["lr"] = json!(1e300);
    std::fs::write(&cfg_path, diverging.to_string()).unwrap();
    assert_eq!(cli(&["run", cfg, "--out", out_s, "--rounds", "1"]), 2);

    // an output root that is a file is not writable
    let file_out = dir.path().join("taken");
    std::fs::write(&file_out, "x").unwrap();
    std::fs::write(&cfg_path, tiny_config().to_string()).unwrap();
    assert_eq!(cli(&["run", cfg, "--out", file_out.to_str().unwrap()]), 1);
}

#[test]
fn selftest_passes() {
    assert_eq!(cli(&["selftest"]), 0);
}
