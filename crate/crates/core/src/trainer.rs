//! Joint training of network and policies.
//!
//! Every minibatch runs one forward pass and then, with all gradients taken
//! at the current parameters,
//!
//! ```text
//! Θ_NN ← Θ_NN − α ∇_{Θ_NN} ℒ
//! θ_l  ← θ_l − α_π,l · (1/m_b) Σ_i c_i ∇ log π_l(u_i | s_i) − α ∇_{θ_l} ℒ
//! ```
//!
//! where `ℒ` is the regularised loss of [`network::regularized_loss`] and
//! `c_i` the per-example NLL. By default `ℒ` carries the minibatch NLL
//! `−log P(Y | X) = Σ_i c_i`, so `α` is a per-example step size and the
//! penalty weights do not shrink relative to the data term as `m_b` grows. The middle term is the REINFORCE estimate of
//! `∇ E[c]`; `c` has no pathwise gradient with respect to the policy.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Splits};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::network::{
    self, Architecture, ForwardCache, ForwardOptions, Gate, LossBreakdown, LossWeights,
    NetworkParams, NllReduction,
};
use crate::policy::{self, PolicyParams, PolicySample};
use crate::regularizers::PenaltyNorm;

/// Rows per chunk when evaluating a whole split. Part of the determinism
/// contract: the mask stream depends on it.
pub const EVAL_CHUNK: usize = 1000;

/// Decay of the optional running-mean cost baseline.
pub const BASELINE_DECAY: f64 = 0.9;

const STREAM_MASKS: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_VALID: u64 = 2;
const STREAM_TEST: u64 = 3;
const STREAM_FINAL: u64 = 4;
const STREAM_INIT: u64 = 5;

/// Independent ChaCha stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn eval_rng(seed: u64, kind: u64, epoch: usize) -> ChaCha8Rng {
    stream_rng(seed, (epoch as u64 + 1) * 16 + kind)
}

/// Either one value for every layer or one per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerLayer {
    All(f64),
    Each(Vec<f64>),
}

impl PerLayer {
    pub fn resolve(&self, n_layers: usize, name: &str) -> Result<Vec<f64>> {
        match self {
            PerLayer::All(v) => Ok(vec![*v; n_layers]),
            PerLayer::Each(v) if v.len() == n_layers => Ok(v.clone()),
            PerLayer::Each(v) => Err(Error::Config(format!(
                "{name}: {} values for {n_layers} layers",
                v.len()
            ))),
        }
    }
}

impl From<f64> for PerLayer {
    fn from(v: f64) -> Self {
        PerLayer::All(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    /// Network learning rate (also applied to the policies' penalty gradient).
    pub alpha: f64,
    /// REINFORCE learning rate, per policy layer.
    pub alpha_pi: PerLayer,
    pub lambda_s: PerLayer,
    pub lambda_v: PerLayer,
    pub lambda_l2: f64,
    /// Target fraction of active blocks, per layer.
    pub tau: PerLayer,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub norm: PenaltyNorm,
    /// Whether the NLL enters the loss summed or averaged over the minibatch.
    pub nll_reduction: NllReduction,
    /// Subtract a running mean of the cost from the REINFORCE weights.
    pub baseline: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            alpha: 1e-3,
            alpha_pi: PerLayer::All(5e-5),
            lambda_s: PerLayer::All(200.0),
            lambda_v: PerLayer::All(200.0),
            lambda_l2: 0.005,
            tau: PerLayer::All(1.0 / 16.0),
            batch_size: 32,
            max_epochs: 50,
            patience: 10,
            seed: 1,
            norm: PenaltyNorm::Abs,
            nll_reduction: NllReduction::Sum,
            baseline: false,
        }
    }
}

/// Per-layer values resolved against a concrete architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub alpha_pi: Vec<f64>,
    pub loss: LossWeights,
}

impl Hyperparams {
    pub fn validate(&self, n_layers: usize) -> Result<Resolved> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be > 0, got {}", self.alpha));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return bad("max_epochs and patience must be >= 1".into());
        }
        if !(self.lambda_l2 >= 0.0 && self.lambda_l2.is_finite()) {
            return bad(format!("lambda_l2 must be >= 0, got {}", self.lambda_l2));
        }
        let alpha_pi = self.alpha_pi.resolve(n_layers, "alpha_pi")?;
        let lambda_s = self.lambda_s.resolve(n_layers, "lambda_s")?;
        let lambda_v = self.lambda_v.resolve(n_layers, "lambda_v")?;
        let tau = self.tau.resolve(n_layers, "tau")?;
        if alpha_pi.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return bad(format!("alpha_pi must be > 0, got {alpha_pi:?}"));
        }
        if lambda_s
            .iter()
            .chain(&lambda_v)
            .any(|&l| !(l >= 0.0 && l.is_finite()))
        {
            return bad("lambda_s and lambda_v must be >= 0".into());
        }
        if tau.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return bad(format!("tau must lie in (0, 1), got {tau:?}"));
        }
        Ok(Resolved {
            alpha_pi,
            loss: LossWeights {
                lambda_s,
                lambda_v,
                lambda_l2: self.lambda_l2,
                tau,
                norm: self.norm,
                reduction: self.nll_reduction,
            },
        })
    }
}

/// Which gating the hidden layers use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GateKind {
    /// Learned input-dependent policies.
    Condnet,
    /// Uniform block dropout at a fixed rate (defaults to `tau`).
    Bdnn {
        #[serde(default)]
        rate: Option<PerLayer>,
    },
    /// Plain network, every unit always on.
    Dense,
}

/// Network weights plus one gate per hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub net: NetworkParams,
    pub gates: Vec<Gate>,
}

impl Model {
    /// Glorot network weights first, then policy weights. Policy biases
    /// start at `logit(τ)` so every block begins near its target rate.
    pub fn init(
        arch: &Architecture,
        kind: &GateKind,
        hyper: &Hyperparams,
        rng: &mut ChaCha8Rng,
    ) -> Result<Model> {
        let n = arch.layers.len();
        let net = network::init_glorot(arch, rng)?;
        let gates = match kind {
            GateKind::Condnet => {
                let bias: Vec<f64> = hyper
                    .tau
                    .resolve(n, "tau")?
                    .iter()
                    .map(|t| (t / (1.0 - t)).ln())
                    .collect();
                network::init_policies(arch, &bias, rng)
                    .into_iter()
                    .map(Gate::Learned)
                    .collect()
            }
            GateKind::Bdnn { rate } => {
                let rates = match rate {
                    Some(r) => r.resolve(n, "bdnn rate")?,
                    None => hyper.tau.resolve(n, "tau")?,
                };
                if rates.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
                    return Err(Error::Config(format!(
                        "bdnn rate must lie in (0, 1], got {rates:?}"
                    )));
                }
                rates.into_iter().map(Gate::Uniform).collect()
            }
            GateKind::Dense => vec![Gate::AlwaysOn; n],
        };
        Ok(Model { net, gates })
    }

    pub fn arch(&self) -> &Architecture {
        &self.net.arch
    }

    /// Every parameter in a fixed order: each hidden layer's `W` (row-major)
    /// and `b`, the output layer's `W` and `b`, then `Z` and `d` of every
    /// learned policy.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in self
            .net
            .hidden
            .iter()
            .chain(std::iter::once(&self.net.output))
        {
            out.extend_from_slice(layer.w.as_slice());
            out.extend_from_slice(&layer.b);
        }
        for p in self.gates.iter().filter_map(Gate::policy) {
            out.extend_from_slice(p.z.as_slice());
            out.extend_from_slice(&p.d);
        }
        out
    }

    /// Inverse of [`Self::flat_params`].
    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        let mut slots: Vec<&mut [f64]> = Vec::new();
        for layer in self
            .net
            .hidden
            .iter_mut()
            .chain(std::iter::once(&mut self.net.output))
        {
            slots.push(layer.w.as_mut_slice());
            slots.push(&mut layer.b);
        }
        for p in self.gates.iter_mut().filter_map(Gate::policy_mut) {
            slots.push(p.z.as_mut_slice());
            slots.push(&mut p.d);
        }
        let total: usize = slots.iter().map(|s| s.len()).sum();
        if total != values.len() {
            return Err(Error::shape(
                "set_flat_params",
                format!("{} values for {total} parameters", values.len()),
            ));
        }
        let mut rest = values;
        for slot in slots {
            let (head, tail) = rest.split_at(slot.len());
            slot.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.net.is_finite()
            && self
                .gates
                .iter()
                .all(|g| g.policy().is_none_or(PolicyParams::is_finite))
    }
}

/// Fraction of active blocks per hidden layer in a forward pass.
pub fn measure_sparsity(cache: &ForwardCache) -> Vec<f64> {
    cache
        .layers
        .iter()
        .map(|c| c.mask.active_fraction())
        .collect()
}

/// `(1/m_b) Σ_i weights_i ∇ log π_l(u_i | s_i)` for every learned layer.
pub fn reinforce_gradients(
    gates: &[Gate],
    cache: &ForwardCache,
    weights: &[f64],
) -> Result<Vec<Option<PolicyParams>>> {
    if weights.len() != cache.batch_size() || gates.len() != cache.layers.len() {
        return Err(Error::shape(
            "reinforce",
            format!(
                "{} costs / {} gates for a batch of {} with {} layers",
                weights.len(),
                gates.len(),
                cache.batch_size(),
                cache.layers.len()
            ),
        ));
    }
    gates
        .iter()
        .enumerate()
        .map(|(l, gate)| match (gate, &cache.layers[l].probs) {
            (Gate::Learned(p), Some(probs)) => {
                let sample = PolicySample {
                    probs: probs.clone(),
                    mask: cache.layers[l].mask.clone(),
                };
                policy::grad_log_prob(p, cache.layer_input(l), &sample, weights).map(Some)
            }
            (Gate::Learned(_), None) => Err(Error::shape("reinforce", "cache lacks probabilities")),
            _ => Ok(None),
        })
        .collect()
}

/// Applies `θ_l ← θ_l − α_π,l · (1/m_b) Σ_i (c_i − b) ∇ log π_l(u_i | s_i)`.
pub fn reinforce_update(
    gates: &mut [Gate],
    cache: &ForwardCache,
    costs: &[f64],
    alpha_pi: &[f64],
    baseline: Option<f64>,
) -> Result<()> {
    let b = baseline.unwrap_or(0.0);
    let weights: Vec<f64> = costs.iter().map(|c| c - b).collect();
    let grads = reinforce_gradients(gates, cache, &weights)?;
    for ((gate, g), &a) in gates.iter_mut().zip(grads).zip(alpha_pi) {
        if let (Some(p), Some(g)) = (gate.policy_mut(), g) {
            p.axpy(-a, &g);
        }
    }
    Ok(())
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub epoch: usize,
    pub best_valid_err: f64,
    pub best_epoch: usize,
    /// Mask sampling stream.
    pub rng: ChaCha8Rng,
    /// Data order stream.
    pub shuffle_rng: ChaCha8Rng,
    pub cost_baseline: Option<f64>,
    pub history: Vec<EpochMetrics>,
}

impl TrainState {
    pub fn new(model: Model, seed: u64) -> Self {
        TrainState {
            model,
            epoch: 0,
            best_valid_err: f64::INFINITY,
            best_epoch: 0,
            rng: stream_rng(seed, STREAM_MASKS),
            shuffle_rng: stream_rng(seed, STREAM_SHUFFLE),
            cost_baseline: None,
            history: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub loss: LossBreakdown,
    pub mean_cost: f64,
    pub sparsity: Vec<f64>,
}

/// One combined update on a minibatch.
pub fn sgd_step(
    state: &mut TrainState,
    x: &Matrix,
    labels: &[usize],
    hyper: &Hyperparams,
    resolved: &Resolved,
) -> Result<StepMetrics> {
    let model = &mut state.model;
    let cache = network::forward(
        &model.net,
        &model.gates,
        x,
        &mut state.rng,
        ForwardOptions::default(),
    )?;
    let costs = network::nll(&cache.yhat, labels)?;
    let loss = network::regularized_loss(&model.net, &model.gates, &cache, labels, &resolved.loss)?;
    if !loss.total.is_finite() {
        return Err(Error::Divergence(format!(
            "non-finite loss at epoch {} (nll {}, l_b {}, l_e {}, l_v {}, l2 {})",
            state.epoch + 1,
            loss.nll,
            loss.l_b,
            loss.l_e,
            loss.l_v,
            loss.l2
        )));
    }
    let grads = network::backward_nn(&model.net, &model.gates, &cache, labels, &resolved.loss)?;

    let mean_cost = costs.iter().sum::<f64>() / costs.len() as f64;
    let b = if hyper.baseline {
        Some(*state.cost_baseline.get_or_insert(mean_cost))
    } else {
        None
    };
    let weights: Vec<f64> = costs.iter().map(|c| c - b.unwrap_or(0.0)).collect();
    let rgrads = reinforce_gradients(&model.gates, &cache, &weights)?;

    model.net.axpy(-hyper.alpha, &grads.net);
    for (l, gate) in model.gates.iter_mut().enumerate() {
        if let Some(p) = gate.policy_mut() {
            if let Some(g) = &rgrads[l] {
                p.axpy(-resolved.alpha_pi[l], g);
            }
            if let Some(g) = &grads.policies[l] {
                p.axpy(-hyper.alpha, g);
            }
        }
    }
    if let Some(b) = state.cost_baseline.as_mut().filter(|_| hyper.baseline) {
        *b = BASELINE_DECAY * *b + (1.0 - BASELINE_DECAY) * mean_cost;
    }
    Ok(StepMetrics {
        loss,
        mean_cost,
        sparsity: measure_sparsity(&cache),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub error: f64,
    pub nll: f64,
    /// Mean fraction of active blocks per layer.
    pub sparsity: Vec<f64>,
}

/// Classification error of a single stochastic pass over `ds`.
pub fn evaluate(
    model: &Model,
    ds: &Dataset,
    rng: &mut ChaCha8Rng,
    opts: ForwardOptions,
) -> Result<EvalResult> {
    if ds.is_empty() {
        return Err(Error::InvalidValue(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    let n_layers = model.gates.len();
    let mut wrong = 0usize;
    let mut nll_sum = 0.0;
    let mut active = vec![0.0; n_layers];
    for start in (0..ds.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(ds.len());
        let x = ds.x.slice_rows(start, end);
        let labels = &ds.labels[start..end];
        let cache = network::forward(&model.net, &model.gates, &x, rng, opts)?;
        for (i, &y) in labels.iter().enumerate() {
            if argmax(cache.yhat.row(i)) != y {
                wrong += 1;
            }
        }
        nll_sum += network::nll(&cache.yhat, labels)?.iter().sum::<f64>();
        for (a, c) in active.iter_mut().zip(&cache.layers) {
            *a += c.mask.count_active() as f64 / c.mask.n_blocks() as f64;
        }
    }
    let n = ds.len() as f64;
    Ok(EvalResult {
        error: wrong as f64 / n,
        nll: nll_sum / n,
        sparsity: active.into_iter().map(|a| a / n).collect(),
    })
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_nll: f64,
    pub valid_err: f64,
    pub test_err: f64,
    pub l_b: f64,
    pub l_e: f64,
    pub l_v: f64,
    pub sparsity: Vec<f64>,
    pub wall_ms: f64,
}

impl EpochMetrics {
    pub fn csv_header(n_layers: usize) -> String {
        let mut h = String::from("epoch,train_nll,valid_err,test_err,l_b,l_e,l_v");
        for l in 1..=n_layers {
            h.push_str(&format!(",mean_sparsity_l{l}"));
        }
        h.push_str(",epoch_wall_ms");
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r = format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.train_nll, self.valid_err, self.test_err, self.l_b, self.l_e, self.l_v
        );
        for s in &self.sparsity {
            r.push_str(&format!(",{s}"));
        }
        r.push_str(&format!(",{:.3}", self.wall_ms));
        r
    }
}

/// Result of a full training run; `model` holds the best-validation parameters.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_valid_err: f64,
    pub test: EvalResult,
    pub mean_epoch_wall_ms: f64,
}

/// Stops when the training NLL stays above this multiple of the first
/// epoch's value for [`DIVERGENCE_EPOCHS`] epochs in a row.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
pub const DIVERGENCE_EPOCHS: usize = 3;

/// Minibatch SGD with early stopping on validation error.
///
/// Writes one metrics CSV row per epoch to `metrics` when given. The test
/// error of the returned model comes from one seeded stochastic pass.
pub fn train(
    model: Model,
    splits: &Splits,
    hyper: &Hyperparams,
    mut metrics: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    let n_layers = model.gates.len();
    let resolved = hyper.validate(n_layers)?;
    for ds in [&splits.train, &splits.valid, &splits.test] {
        if ds.is_empty() {
            return Err(Error::Config(format!("{:?} split is empty", ds.split)));
        }
        if ds.n_features() != model.arch().n_inputs || ds.n_classes != model.arch().n_classes {
            return Err(Error::Config(format!(
                "{:?} split has {} features / {} classes, model expects {} / {}",
                ds.split,
                ds.n_features(),
                ds.n_classes,
                model.arch().n_inputs,
                model.arch().n_classes
            )));
        }
    }
    let io_err = |e| Error::io("metrics", e);
    if let Some(w) = metrics.as_mut() {
        writeln!(w, "{}", EpochMetrics::csv_header(n_layers)).map_err(io_err)?;
    }

    let seed = hyper.seed;
    let mut state = TrainState::new(model, seed);
    let mut best_model = state.model.clone();
    let mut since_best = 0usize;
    let mut initial_nll: Option<f64> = None;
    let mut blown_up = 0usize;
    let mut order: Vec<usize> = (0..splits.train.len()).collect();

    for epoch in 1..=hyper.max_epochs {
        state.epoch = epoch;
        let t0 = Instant::now();
        order.shuffle(&mut state.shuffle_rng);
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut sparsity = vec![0.0; n_layers];
        let mut batches = 0usize;
        for chunk in order.chunks(hyper.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (x, y) = splits.train.select(chunk);
            let step = sgd_step(&mut state, &x, &y, hyper, &resolved)?;
            sums.0 += step.mean_cost;
            sums.1 += step.loss.l_b;
            sums.2 += step.loss.l_e;
            sums.3 += step.loss.l_v;
            for (a, s) in sparsity.iter_mut().zip(&step.sparsity) {
                *a += s;
            }
            batches += 1;
        }
        let nb = batches.max(1) as f64;
        if !state.model.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite parameters after epoch {epoch}"
            )));
        }
        let opts = ForwardOptions::default();
        let valid = evaluate(
            &state.model,
            &splits.valid,
            &mut eval_rng(seed, STREAM_VALID, epoch),
            opts,
        )?;
        let test = evaluate(
            &state.model,
            &splits.test,
            &mut eval_rng(seed, STREAM_TEST, epoch),
            opts,
        )?;
        let m = EpochMetrics {
            epoch,
            train_nll: sums.0 / nb,
            valid_err: valid.error,
            test_err: test.error,
            l_b: sums.1 / nb,
            l_e: sums.2 / nb,
            l_v: sums.3 / nb,
            sparsity: sparsity.into_iter().map(|s| s / nb).collect(),
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        if let Some(w) = metrics.as_mut() {
            writeln!(w, "{}", m.csv_row()).map_err(io_err)?;
        }
        let train_nll = m.train_nll;
        state.history.push(m);

        let init = *initial_nll.get_or_insert(train_nll);
        if !train_nll.is_finite() || train_nll > DIVERGENCE_FACTOR * init {
            blown_up += 1;
            if blown_up >= DIVERGENCE_EPOCHS || !train_nll.is_finite() {
                return Err(Error::Divergence(format!(
                    "training NLL {train_nll} vs initial {init} at epoch {epoch}"
                )));
            }
        } else {
            blown_up = 0;
        }

        if valid.error < state.best_valid_err {
            state.best_valid_err = valid.error;
            state.best_epoch = epoch;
            best_model = state.model.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= hyper.patience {
                break;
            }
        }
    }

    let test = evaluate(
        &best_model,
        &splits.test,
        &mut eval_rng(seed, STREAM_FINAL, 0),
        ForwardOptions::default(),
    )?;
    let mean_epoch_wall_ms =
        state.history.iter().map(|m| m.wall_ms).sum::<f64>() / state.history.len().max(1) as f64;
    Ok(TrainOutcome {
        model: best_model,
        history: state.history,
        best_epoch: state.best_epoch,
        best_valid_err: state.best_valid_err,
        test,
        mean_epoch_wall_ms,
    })
}

/// Test-pass RNG used for the reported test error of a run with `seed`.
pub fn final_eval_rng(seed: u64) -> ChaCha8Rng {
    eval_rng(seed, STREAM_FINAL, 0)
}

/// Parameter initialisation RNG of a run with `seed`.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    stream_rng(seed, STREAM_INIT)
}

/// Wall-clock seconds of one forward pass over `ds` in chunks of
/// [`EVAL_CHUNK`] rows.
pub fn timed_forward_pass(
    model: &Model,
    ds: &Dataset,
    rng: &mut ChaCha8Rng,
    opts: ForwardOptions,
) -> Result<f64> {
    let t0 = Instant::now();
    for start in (0..ds.len()).step_by(EVAL_CHUNK) {
        let x = ds.x.slice_rows(start, (start + EVAL_CHUNK).min(ds.len()));
        std::hint::black_box(network::forward(&model.net, &model.gates, &x, rng, opts)?);
    }
    Ok(t0.elapsed().as_secs_f64())
}
