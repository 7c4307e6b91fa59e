//! `condnet train|eval|bench|sweep|inspect --config <file> [--seed N] [--out DIR]`
//!
//! Exit codes: 0 on success, 1 on runtime failures, 2 on usage errors,
//! invalid configs and missing datasets. Configuration problems are
//! detected before any output file is created.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{bench_masked_matmul, BENCH_CSV_HEADER};
use crate::network::{self, ForwardOptions, Gate, Kernel};
use crate::trainer::{self, stream_rng, GateKind, Model, PerLayer, EVAL_CHUNK};

pub const SUMMARY_HEADER: &str = "test_error,mean_sparsity,epoch_wall_ms";
pub const EVAL_HEADER: &str = "test_error,mean_sparsity";
pub const FORWARD_HEADER: &str = "sparse_s,dense_s,speedup";
pub const SWEEP_HEADER: &str = "lambda,test_error,test_time_s";
pub const SIGMA_HEADER: &str = "example_id,class_label,block_id,sigma";

const STREAM_BENCH: u64 = 6;
const FORWARD_TRIALS: usize = 5;

#[derive(Debug, Parser)]
#[command(
    name = "condnet",
    version,
    about = "Conditional computation with learned block policies"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, metrics and summary.
    Train {
        #[command(flatten)]
        common: Common,
        /// Replace the learned policies with uniform block dropout.
        #[arg(long)]
        bdnn: bool,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Time the block-sparse kernel against the dense reference.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train one model per penalty weight in the sweep grid.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Dump per-example policy probabilities and policy weights.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Common {
    fn load(&self, checkpoint: Option<&PathBuf>) -> Result<RunConfig> {
        let mut cfg = RunConfig::from_file(&self.config).map_err(|e| match e {
            Error::Io { path, source } => Error::Config(format!("{}: {source}", path.display())),
            other => other,
        })?;
        if let Some(seed) = self.seed {
            cfg.hyper.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(c) = checkpoint {
            cfg.checkpoint = Some(c.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::MissingData { .. } => 2,
        _ => 1,
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { common, bdnn } => {
            let mut cfg = common.load(None)?;
            if bdnn && !matches!(cfg.model.gating, GateKind::Bdnn { .. }) {
                cfg.model.gating = GateKind::Bdnn { rate: None };
            }
            cmd_train(&cfg).map(|_| ())
        }
        Command::Eval { common, checkpoint } => {
            cmd_eval(&common.load(checkpoint.as_ref())?).map(|_| ())
        }
        Command::Bench { common, checkpoint } => cmd_bench(&common.load(checkpoint.as_ref())?),
        Command::Sweep { common } => cmd_sweep(&common.load(None)?),
        Command::Inspect { common, checkpoint } => cmd_inspect(&common.load(checkpoint.as_ref())?),
    }
}

fn create_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn gating_name(g: &GateKind) -> &'static str {
    match g {
        GateKind::Condnet => "condnet",
        GateKind::Bdnn { .. } => "bdnn",
        GateKind::Dense => "dense",
    }
}

/// Trains as configured. Returns the summary `(test_error, mean_sparsity,
/// epoch_wall_ms)`.
pub fn cmd_train(cfg: &RunConfig) -> Result<(f64, f64, f64)> {
    cfg.dataset.check()?;
    let splits = cfg.dataset.load()?;
    let arch = cfg.architecture();
    let model = Model::init(
        &arch,
        &cfg.model.gating,
        &cfg.hyper,
        &mut trainer::init_rng(cfg.hyper.seed),
    )?;

    create_out_dir(&cfg.out_dir)?;
    let metrics_path = cfg.out_dir.join("metrics.csv");
    let file = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = std::io::LineWriter::new(file);
    let outcome = trainer::train(model, &splits, &cfg.hyper, Some(&mut metrics))?;
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;

    let mut meta = BTreeMap::new();
    meta.insert("gating".into(), gating_name(&cfg.model.gating).into());
    meta.insert("best_epoch".into(), outcome.best_epoch.to_string());
    meta.insert(
        "best_valid_error".into(),
        outcome.best_valid_err.to_string(),
    );
    meta.insert(
        "dataset".into(),
        serde_json::to_string(&cfg.dataset).unwrap_or_default(),
    );
    Checkpoint {
        model: outcome.model,
        hyper: cfg.hyper.clone(),
        seed: cfg.hyper.seed,
        meta,
    }
    .save(&cfg.checkpoint_path())?;

    let sparsity = mean(&outcome.test.sparsity);
    let line = format!(
        "{},{},{:.3}",
        outcome.test.error, sparsity, outcome.mean_epoch_wall_ms
    );
    write_file(
        &cfg.out_dir.join("summary.csv"),
        &format!("{SUMMARY_HEADER}\n{line}\n"),
    )?;
    println!("{SUMMARY_HEADER}\n{line}");
    Ok((outcome.test.error, sparsity, outcome.mean_epoch_wall_ms))
}

fn load_matching(cfg: &RunConfig) -> Result<(Checkpoint, crate::data::Splits)> {
    let path = cfg.checkpoint_path();
    let ckpt = Checkpoint::load(&path)?;
    let (n_in, n_classes) = cfg.dataset.dims();
    let arch = ckpt.model.arch();
    if arch.n_inputs != n_in || arch.n_classes != n_classes {
        return Err(Error::Checkpoint(format!(
            "{} expects {} inputs / {} classes, dataset has {n_in} / {n_classes}",
            path.display(),
            arch.n_inputs,
            arch.n_classes
        )));
    }
    cfg.dataset.check()?;
    let splits = cfg.dataset.load()?;
    Ok((ckpt, splits))
}

/// Test error and mean block activation rate of the configured checkpoint.
pub fn cmd_eval(cfg: &RunConfig) -> Result<(f64, f64)> {
    if !cfg.checkpoint_path().is_file() {
        return Err(Error::Config(format!(
            "no checkpoint at {}",
            cfg.checkpoint_path().display()
        )));
    }
    let (ckpt, splits) = load_matching(cfg)?;
    let r = trainer::evaluate(
        &ckpt.model,
        &splits.test,
        &mut trainer::final_eval_rng(ckpt.seed),
        ForwardOptions::default(),
    )?;
    let sparsity = mean(&r.sparsity);
    let line = format!("{},{}", r.error, sparsity);
    create_out_dir(&cfg.out_dir)?;
    write_file(
        &cfg.out_dir.join("eval.csv"),
        &format!("{EVAL_HEADER}\n{line}\n"),
    )?;
    println!("{EVAL_HEADER}\n{line}");
    Ok((r.error, sparsity))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median wall time of a sparse and a dense forward pass over `ds`, both
/// drawing the same masks. One warm-up pass of each is discarded.
pub fn bench_forward(model: &Model, ds: &Dataset, seed: u64, trials: usize) -> Result<(f64, f64)> {
    let mut sparse = Vec::with_capacity(trials);
    let mut dense = Vec::with_capacity(trials);
    for t in 0..=trials {
        let opts = |kernel| ForwardOptions {
            kernel,
            ..ForwardOptions::default()
        };
        let s = trainer::timed_forward_pass(
            model,
            ds,
            &mut stream_rng(seed, STREAM_BENCH),
            opts(Kernel::Sparse),
        )?;
        let d = trainer::timed_forward_pass(
            model,
            ds,
            &mut stream_rng(seed, STREAM_BENCH),
            opts(Kernel::Dense),
        )?;
        if t > 0 {
            sparse.push(s);
            dense.push(d);
        }
    }
    Ok((median(sparse), median(dense)))
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<()> {
    cfg.validate_bench()?;
    let ckpt_path = cfg.checkpoint_path();
    let with_model = ckpt_path.is_file();
    if with_model {
        cfg.dataset.check()?;
    }
    create_out_dir(&cfg.out_dir)?;

    let b = &cfg.bench;
    let mut rng = stream_rng(cfg.hyper.seed, STREAM_BENCH);
    let mut csv = format!("{BENCH_CSV_HEADER}\n");
    println!("{BENCH_CSV_HEADER}");
    for d in &b.dims {
        for &s in &b.sparsities {
            let row = bench_masked_matmul(d[0], d[1], d[2], b.block_size, s, b.trials, &mut rng)?;
            println!("{}", row.csv());
            writeln!(csv, "{}", row.csv()).expect("write to String");
        }
    }
    write_file(&cfg.out_dir.join("bench.csv"), &csv)?;

    if with_model {
        let (ckpt, splits) = load_matching(cfg)?;
        let (s, d) = bench_forward(&ckpt.model, &splits.test, cfg.hyper.seed, FORWARD_TRIALS)?;
        let line = format!("{s},{d},{}", d / s);
        write_file(
            &cfg.out_dir.join("forward.csv"),
            &format!("{FORWARD_HEADER}\n{line}\n"),
        )?;
        println!("{FORWARD_HEADER}\n{line}");
    } else {
        eprintln!(
            "note: no checkpoint at {}, skipping the model forward benchmark",
            ckpt_path.display()
        );
    }
    Ok(())
}

/// One row per grid value; failed runs are reported on stderr and written
/// with NaN error and time.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<()> {
    let grids: Vec<(&str, &Vec<f64>)> = [
        ("lambda_s", &cfg.sweep.lambda_s),
        ("lambda_v", &cfg.sweep.lambda_v),
    ]
    .into_iter()
    .filter(|(_, v)| !v.is_empty())
    .collect();
    if grids.is_empty() {
        return Err(Error::Config(
            "sweep needs a non-empty lambda_s or lambda_v list".into(),
        ));
    }
    cfg.dataset.check()?;
    let splits = cfg.dataset.load()?;
    let arch = cfg.architecture();
    create_out_dir(&cfg.out_dir)?;

    for (name, values) in grids {
        let mut csv = format!("{SWEEP_HEADER}\n");
        for &v in values {
            let mut hyper = cfg.hyper.clone();
            match name {
                "lambda_s" => hyper.lambda_s = PerLayer::All(v),
                _ => hyper.lambda_v = PerLayer::All(v),
            }
            let run = || -> Result<(f64, f64)> {
                let model = Model::init(
                    &arch,
                    &cfg.model.gating,
                    &hyper,
                    &mut trainer::init_rng(hyper.seed),
                )?;
                let out = trainer::train(model, &splits, &hyper, None)?;
                let t = trainer::timed_forward_pass(
                    &out.model,
                    &splits.test,
                    &mut trainer::final_eval_rng(hyper.seed),
                    ForwardOptions::default(),
                )?;
                Ok((out.test.error, t))
            };
            let (err, t) = run().unwrap_or_else(|e| {
                eprintln!("{name}={v}: {e}");
                (f64::NAN, f64::NAN)
            });
            writeln!(csv, "{v},{err},{t}").expect("write to String");
            println!("{name}={v}: test_error {err}, test_time_s {t}");
        }
        write_file(&cfg.out_dir.join(format!("sweep_{name}.csv")), &csv)?;
    }
    Ok(())
}

/// Writes, for every layer with a learned policy, `sigma_l{l}.csv`,
/// `class_means_l{l}.csv` and `policy_l{l}.csv`.
pub fn cmd_inspect(cfg: &RunConfig) -> Result<()> {
    if !cfg.checkpoint_path().is_file() {
        return Err(Error::Config(format!(
            "no checkpoint at {}",
            cfg.checkpoint_path().display()
        )));
    }
    let (ckpt, splits) = load_matching(cfg)?;
    let ds = match cfg.inspect.split {
        crate::data::Split::Train => &splits.train,
        crate::data::Split::Valid => &splits.valid,
        crate::data::Split::Test => &splits.test,
    };
    let dump = inspect_policy(
        &ckpt.model,
        ds,
        cfg.inspect.classes.as_deref(),
        cfg.inspect.max_examples,
        ckpt.seed,
    )?;
    create_out_dir(&cfg.out_dir)?;
    for layer in &dump {
        let l = layer.layer + 1;
        write_file(
            &cfg.out_dir.join(format!("sigma_l{l}.csv")),
            &layer.sigma_csv(),
        )?;
        write_file(
            &cfg.out_dir.join(format!("class_means_l{l}.csv")),
            &layer.class_means_csv(),
        )?;
        write_file(
            &cfg.out_dir.join(format!("policy_l{l}.csv")),
            &layer.policy_csv(),
        )?;
        println!(
            "layer {l}: {} examples x {} blocks",
            layer.example_ids.len(),
            layer.n_blocks()
        );
    }
    Ok(())
}

/// Policy probabilities of one layer over a set of examples.
#[derive(Clone, Debug)]
pub struct PolicyDump {
    pub layer: usize,
    pub example_ids: Vec<usize>,
    pub labels: Vec<usize>,
    /// One row per example.
    pub sigma: Vec<Vec<f64>>,
    pub z: crate::linalg::Matrix,
    pub d: Vec<f64>,
}

impl PolicyDump {
    pub fn n_blocks(&self) -> usize {
        self.d.len()
    }

    /// Mean `σ` per block over the examples of class `c`, if any.
    pub fn class_mean(&self, c: usize) -> Option<Vec<f64>> {
        let rows: Vec<&Vec<f64>> = self
            .sigma
            .iter()
            .zip(&self.labels)
            .filter(|(_, &y)| y == c)
            .map(|(r, _)| r)
            .collect();
        if rows.is_empty() {
            return None;
        }
        let mut m = vec![0.0; self.n_blocks()];
        for r in &rows {
            for (a, v) in m.iter_mut().zip(r.iter()) {
                *a += v;
            }
        }
        Some(m.into_iter().map(|a| a / rows.len() as f64).collect())
    }

    pub fn sigma_csv(&self) -> String {
        let mut s = format!("{SIGMA_HEADER}\n");
        for ((id, y), row) in self.example_ids.iter().zip(&self.labels).zip(&self.sigma) {
            for (j, v) in row.iter().enumerate() {
                writeln!(s, "{id},{y},{j},{v}").expect("write to String");
            }
        }
        s
    }

    pub fn class_means_csv(&self) -> String {
        let mut classes = self.labels.clone();
        classes.sort_unstable();
        classes.dedup();
        let mut s = String::from("class_label,block_id,mean_sigma\n");
        for c in classes {
            for (j, v) in self.class_mean(c).unwrap_or_default().iter().enumerate() {
                writeln!(s, "{c},{j},{v}").expect("write to String");
            }
        }
        s
    }

    /// One row per block: bias followed by the weight on every input.
    pub fn policy_csv(&self) -> String {
        let mut s = String::from("block_id,bias");
        for k in 0..self.z.cols() {
            write!(s, ",w{k}").expect("write to String");
        }
        s.push('\n');
        for j in 0..self.n_blocks() {
            write!(s, "{j},{}", self.d[j]).expect("write to String");
            for v in self.z.row(j) {
                write!(s, ",{v}").expect("write to String");
            }
            s.push('\n');
        }
        s
    }
}

/// Policy probabilities of every learned layer on the examples of `ds`
/// whose class is in `classes` (all when `None`), at most `max_examples`.
pub fn inspect_policy(
    model: &Model,
    ds: &Dataset,
    classes: Option<&[usize]>,
    max_examples: Option<usize>,
    seed: u64,
) -> Result<Vec<PolicyDump>> {
    let mut ids: Vec<usize> = (0..ds.len())
        .filter(|&i| classes.is_none_or(|c| c.contains(&ds.labels[i])))
        .collect();
    if let Some(n) = max_examples {
        ids.truncate(n);
    }
    let learned: Vec<usize> = model
        .gates
        .iter()
        .enumerate()
        .filter(|(_, g)| matches!(g, Gate::Learned(_)))
        .map(|(l, _)| l)
        .collect();
    if learned.is_empty() {
        return Err(Error::Checkpoint(
            "model has no learned policy to inspect".into(),
        ));
    }
    let mut dumps: Vec<PolicyDump> = learned
        .iter()
        .map(|&l| {
            let p = model.gates[l].policy().expect("learned gate");
            PolicyDump {
                layer: l,
                example_ids: ids.clone(),
                labels: ids.iter().map(|&i| ds.labels[i]).collect(),
                sigma: Vec::with_capacity(ids.len()),
                z: p.z.clone(),
                d: p.d.clone(),
            }
        })
        .collect();
    let mut rng = trainer::final_eval_rng(seed);
    for chunk in ids.chunks(EVAL_CHUNK) {
        let (x, _) = ds.select(chunk);
        let cache = network::forward(
            &model.net,
            &model.gates,
            &x,
            &mut rng,
            ForwardOptions::default(),
        )?;
        for dump in dumps.iter_mut() {
            let probs = cache.layers[dump.layer]
                .probs
                .as_ref()
                .expect("learned layer has probabilities");
            for i in 0..probs.rows() {
                dump.sigma.push(probs.row(i).to_vec());
            }
        }
    }
    Ok(dumps)
}
