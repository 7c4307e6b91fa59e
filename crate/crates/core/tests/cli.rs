use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use condnet::checkpoint::Checkpoint;
use condnet::config::RunConfig;
use condnet::trainer::{self, GateKind, Hyperparams, Model};
use condnet::Gate;

const BIN: &str = env!("CARGO_BIN_EXE_condnet");

fn synthetic_config(extra: &str) -> String {
    format!(
        r#"{{
  "dataset": {{"kind": "synthetic", "n_classes": 3, "n_features": 8, "n_train": 240,
               "n_valid": 60, "n_test": 90, "separation": 6.0, "seed": 4}},
  "model": {{"layers": [{{"n_blocks": 4, "block_size": 3}}]}},
  "hyper": {{"alpha": 0.01, "batch_size": 16, "max_epochs": 3, "lambda_s": 1.0,
             "lambda_v": 1.0, "tau": 0.5, "seed": 7}}{extra}
}}"#
    )
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.json");
    fs::write(&path, text).unwrap();
    path
}

fn condnet(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(cwd)
        .env("CONDNET_DATA", cwd.join("no-data-here"))
        .output()
        .unwrap()
}

fn run_ok(args: &[&str], cwd: &Path) -> String {
    let out = condnet(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .map(str::to_string)
        .collect()
}

#[test]
fn missing_dataset_exits_2_without_creating_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"dataset": {"kind": "mnist"}, "model": {"layers": [{"n_blocks": 4, "block_size": 4}]}}"#,
    );
    let out = condnet(
        &["train", "--config", cfg.to_str().unwrap(), "--out", "out"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("no-data-here"), "{err}");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn bad_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        "{ not json",
        r#"{"dataset": {"kind": "synthetic"}, "model": {"layers": []}}"#,
        &synthetic_config(r#", "surprise": 1"#),
        &synthetic_config("").replace("\"tau\": 0.5", "\"tau\": 1.5"),
    ];
    for text in cases {
        let cfg = write_config(dir.path(), text);
        let out = condnet(&["train", "--config", cfg.to_str().unwrap()], dir.path());
        assert_eq!(out.status.code(), Some(2), "{text}");
    }
    let out = condnet(&["train", "--config", "does-not-exist.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = condnet(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_then_eval_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &synthetic_config(r#", "inspect": {"max_examples": 30}"#),
    );
    let cfg = cfg.to_str().unwrap();
    let stdout = run_ok(&["train", "--config", cfg, "--out", "run"], dir.path());
    let run = dir.path().join("run");
    for f in ["metrics.csv", "summary.csv", "model.ckpt"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let metrics = rows(&run.join("metrics.csv"));
    assert_eq!(
        metrics[0],
        "epoch,train_nll,valid_err,test_err,l_b,l_e,l_v,mean_sparsity_l1,epoch_wall_ms"
    );
    assert_eq!(metrics.len(), 4);
    let summary = rows(&run.join("summary.csv"));
    assert_eq!(summary[0], "test_error,mean_sparsity,epoch_wall_ms");
    assert!(stdout.contains(&summary[1]));

    run_ok(&["eval", "--config", cfg, "--out", "run"], dir.path());
    let eval = rows(&run.join("eval.csv"));
    assert_eq!(eval[0], "test_error,mean_sparsity");
    let strip = |line: &str| line.rsplit_once(',').unwrap().0.to_string();
    assert_eq!(eval[1], strip(&summary[1]));

    run_ok(&["inspect", "--config", cfg, "--out", "run"], dir.path());
    let sigma = rows(&run.join("sigma_l1.csv"));
    assert_eq!(sigma[0], "example_id,class_label,block_id,sigma");
    assert_eq!(sigma.len(), 1 + 30 * 4);
    assert_eq!(rows(&run.join("policy_l1.csv")).len(), 1 + 4);
    assert_eq!(rows(&run.join("class_means_l1.csv")).len(), 1 + 3 * 4);
}

#[test]
fn untrained_zero_policy_has_sigma_one_half() {
    let dir = tempfile::tempdir().unwrap();
    let text = synthetic_config(r#", "checkpoint": "zero.ckpt", "inspect": {"max_examples": 10}"#);
    let cfg = RunConfig::from_json(&text).unwrap();
    let mut model = Model::init(
        &cfg.architecture(),
        &GateKind::Condnet,
        &cfg.hyper,
        &mut trainer::init_rng(1),
    )
    .unwrap();
    for p in model.gates.iter_mut().filter_map(Gate::policy_mut) {
        p.z.map_inplace(|_| 0.0);
        p.d.iter_mut().for_each(|d| *d = 0.0);
    }
    Checkpoint {
        model,
        hyper: Hyperparams::default(),
        seed: 1,
        meta: BTreeMap::new(),
    }
    .save(&dir.path().join("zero.ckpt"))
    .unwrap();
    let path = write_config(dir.path(), &text);
    run_ok(
        &["inspect", "--config", path.to_str().unwrap(), "--out", "."],
        dir.path(),
    );
    let sigma = rows(&dir.path().join("sigma_l1.csv"));
    assert_eq!(sigma.len(), 1 + 40);
    for line in &sigma[1..] {
        let v: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(v, 0.5, "{line}");
    }
}

#[test]
fn bench_writes_one_row_per_case() {
    let dir = tempfile::tempdir().unwrap();
    let extra = r#", "bench": {"dims": [[64, 64, 64], [32, 128, 64]], "block_size": 16,
                   "sparsities": [0.25, 0.5, 1.0], "trials": 5}"#;
    let cfg = write_config(dir.path(), &synthetic_config(extra));
    let out = condnet(
        &["bench", "--config", cfg.to_str().unwrap(), "--out", "b"],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(rows(&dir.path().join("b/bench.csv")).len(), 1 + 2 * 3);
    assert!(!dir.path().join("b/forward.csv").exists());
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let extra = r#", "sweep": {"lambda_s": [0.0, 1.0, 10.0]}"#;
    let cfg = write_config(
        dir.path(),
        &synthetic_config(extra).replace("\"max_epochs\": 3", "\"max_epochs\": 1"),
    );
    run_ok(
        &["sweep", "--config", cfg.to_str().unwrap(), "--out", "s"],
        dir.path(),
    );
    let sweep = rows(&dir.path().join("s/sweep_lambda_s.csv"));
    assert_eq!(sweep[0], "lambda,test_error,test_time_s");
    assert_eq!(sweep.len(), 4);
    assert!(sweep[1].starts_with("0,"), "{}", sweep[1]);
    assert!(!dir.path().join("s/sweep_lambda_v.csv").exists());
}

#[test]
fn seed_flag_controls_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &synthetic_config(""));
    let cfg = cfg.to_str().unwrap();
    for out in ["a", "b", "c"] {
        let seed = if out == "c" { "8" } else { "7" };
        run_ok(
            &["train", "--config", cfg, "--seed", seed, "--out", out],
            dir.path(),
        );
    }
    let ckpt = |d: &str| fs::read(dir.path().join(d).join("model.ckpt")).unwrap();
    assert_eq!(ckpt("a"), ckpt("b"));
    assert_ne!(ckpt("a"), ckpt("c"));
    let no_time = |d: &str| -> Vec<String> {
        rows(&dir.path().join(d).join("metrics.csv"))
            .iter()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    assert_eq!(no_time("a"), no_time("b"));
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = RunConfig::from_file(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate()
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 5);
}
