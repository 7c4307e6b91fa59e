//! Block-gated feed-forward network.
//!
//! Each hidden layer `l` computes
//!
//! ```text
//! σ_l = policy_l(h_{l-1})          (one probability per block)
//! u_l ~ Bernoulli(σ_l)             (expanded to units by repeating each bit)
//! h_l = f((h_{l-1} ⊗ u_{l-1}) W_l + b_l) ⊗ u_l
//! ```
//!
//! with `h_0 = x` and an all-ones input mask. The softmax output layer is
//! never masked. The masked products go through
//! [`masked_matmul`](crate::linalg::masked_matmul), so inactive blocks cost
//! nothing on either side of the product.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    masked_matmul, masked_matmul_nt, masked_matmul_tn, matmul, matmul_tn, BlockMask, Matrix,
};
use crate::policy::{self, PolicyParams, PROB_EPS};
use crate::regularizers::{PenaltyNorm, RegularizerTerms};

/// Probabilities below this are clamped before taking the log in [`nll`].
pub const NLL_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    #[inline]
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub n_blocks: usize,
    pub block_size: usize,
}

impl LayerShape {
    pub fn units(&self) -> usize {
        self.n_blocks * self.block_size
    }
}

/// Shape chain of the network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub n_inputs: usize,
    pub n_classes: usize,
    pub layers: Vec<LayerShape>,
    #[serde(default)]
    pub activation: Activation,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.n_inputs == 0 || self.n_classes < 2 {
            return Err(Error::Config(format!(
                "need n_inputs >= 1 and n_classes >= 2, got {} and {}",
                self.n_inputs, self.n_classes
            )));
        }
        for (l, s) in self.layers.iter().enumerate() {
            if s.n_blocks == 0 || s.block_size == 0 {
                return Err(Error::Config(format!(
                    "layer {}: n_blocks and block_size must be >= 1",
                    l + 1
                )));
            }
        }
        Ok(())
    }

    /// Input width of hidden layer `l` (0-based) or of the output layer when
    /// `l == layers.len()`.
    pub fn fan_in(&self, l: usize) -> usize {
        if l == 0 {
            self.n_inputs
        } else {
            self.layers[l - 1].units()
        }
    }

    /// Multiply-adds per example of a dense forward pass.
    pub fn dense_flops(&self) -> usize {
        let mut total = 0;
        for l in 0..=self.layers.len() {
            let out = self.layers.get(l).map_or(self.n_classes, LayerShape::units);
            total += self.fan_in(l) * out;
        }
        total
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `fan_in × fan_out`
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        DenseLayer {
            w: Matrix::zeros(fan_in, fan_out),
            b: vec![0.0; fan_out],
        }
    }

    fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = glorot_bound(fan_in, fan_out);
        DenseLayer {
            w: Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..=bound)),
            b: vec![0.0; fan_out],
        }
    }

    pub fn sum_squares(&self) -> f64 {
        self.w.sum_squares() + self.b.iter().map(|x| x * x).sum::<f64>()
    }

    pub fn axpy(&mut self, a: f64, other: &DenseLayer) {
        self.w.axpy(a, &other.w);
        for (x, &y) in self.b.iter_mut().zip(&other.b) {
            *x += a * y;
        }
    }

    fn is_finite(&self) -> bool {
        self.w.is_finite() && self.b.iter().all(|x| x.is_finite())
    }
}

/// `√(6 / (fan_in + fan_out))`
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Weights and biases of every layer; also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub arch: Architecture,
    pub hidden: Vec<DenseLayer>,
    pub output: DenseLayer,
}

impl NetworkParams {
    pub fn zeros(arch: &Architecture) -> Self {
        let hidden = arch
            .layers
            .iter()
            .enumerate()
            .map(|(l, s)| DenseLayer::zeros(arch.fan_in(l), s.units()))
            .collect();
        NetworkParams {
            arch: arch.clone(),
            hidden,
            output: DenseLayer::zeros(arch.fan_in(arch.layers.len()), arch.n_classes),
        }
    }

    pub fn sum_squares(&self) -> f64 {
        self.hidden.iter().map(DenseLayer::sum_squares).sum::<f64>() + self.output.sum_squares()
    }

    pub fn axpy(&mut self, a: f64, other: &NetworkParams) {
        for (x, y) in self.hidden.iter_mut().zip(&other.hidden) {
            x.axpy(a, y);
        }
        self.output.axpy(a, &other.output);
    }

    pub fn is_finite(&self) -> bool {
        self.hidden.iter().all(DenseLayer::is_finite) && self.output.is_finite()
    }
}

/// Glorot-uniform weights, zero biases. Hidden layers are drawn first, then
/// the output layer.
pub fn init_glorot<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<NetworkParams> {
    arch.validate()?;
    let hidden = arch
        .layers
        .iter()
        .enumerate()
        .map(|(l, s)| DenseLayer::glorot(arch.fan_in(l), s.units(), rng))
        .collect();
    let output = DenseLayer::glorot(arch.fan_in(arch.layers.len()), arch.n_classes, rng);
    Ok(NetworkParams {
        arch: arch.clone(),
        hidden,
        output,
    })
}

/// How a hidden layer decides which of its blocks run.
#[derive(Clone, Debug, PartialEq)]
pub enum Gate {
    /// Input-dependent learned policy.
    Learned(PolicyParams),
    /// Every block active with a fixed probability, independent of the input.
    Uniform(f64),
    /// Every block always active; no random draws.
    AlwaysOn,
}

impl Gate {
    pub fn policy(&self) -> Option<&PolicyParams> {
        match self {
            Gate::Learned(p) => Some(p),
            _ => None,
        }
    }

    pub fn policy_mut(&mut self) -> Option<&mut PolicyParams> {
        match self {
            Gate::Learned(p) => Some(p),
            _ => None,
        }
    }
}

/// Glorot-initialised policy weights for every hidden layer, with every
/// bias of layer `l` set to `bias[l]`.
pub fn init_policies<R: Rng + ?Sized>(
    arch: &Architecture,
    bias: &[f64],
    rng: &mut R,
) -> Vec<PolicyParams> {
    arch.layers
        .iter()
        .enumerate()
        .map(|(l, s)| {
            let fan_in = arch.fan_in(l);
            let bound = glorot_bound(fan_in, s.n_blocks);
            PolicyParams {
                z: Matrix::from_fn(s.n_blocks, fan_in, |_, _| rng.random_range(-bound..=bound)),
                d: vec![bias[l]; s.n_blocks],
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Sampling {
    /// Bernoulli draws, used for training and evaluation.
    #[default]
    Stochastic,
    /// Deterministic diagnostic mode: a block is on iff `σ ≥ 0.5`.
    Threshold,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Kernel {
    /// Skip inactive blocks.
    #[default]
    Sparse,
    /// Full dense products, masks applied afterwards.
    Dense,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    pub sampling: Sampling,
    pub kernel: Kernel,
}

#[derive(Clone, Debug)]
pub struct LayerCache {
    /// `σ_l`, absent for always-on layers.
    pub probs: Option<Matrix>,
    /// `u_l`
    pub mask: BlockMask,
    /// Pre-activation; zero on inactive blocks in sparse mode.
    pub pre: Matrix,
    /// Post-mask activation `h_l`.
    pub h: Matrix,
}

#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub input: Matrix,
    pub input_mask: BlockMask,
    pub layers: Vec<LayerCache>,
    pub logits: Matrix,
    pub yhat: Matrix,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }

    /// `s_l`, the input of hidden layer `l` (0-based).
    pub fn layer_input(&self, l: usize) -> &Matrix {
        if l == 0 {
            &self.input
        } else {
            &self.layers[l - 1].h
        }
    }

    /// `u_{l-1}` for hidden layer `l` (0-based), or the output layer when `l == L`.
    pub fn layer_input_mask(&self, l: usize) -> &BlockMask {
        if l == 0 {
            &self.input_mask
        } else {
            &self.layers[l - 1].mask
        }
    }

    pub fn masks(&self) -> Vec<BlockMask> {
        self.layers.iter().map(|c| c.mask.clone()).collect()
    }
}

enum MaskSource<'a, R: Rng + ?Sized> {
    Sample(&'a mut R),
    Fixed(&'a [BlockMask]),
}

/// Runs the gated forward pass, sampling one mask per hidden layer.
///
/// Draws are consumed layer by layer, row-major within a layer.
pub fn forward<R: Rng + ?Sized>(
    net: &NetworkParams,
    gates: &[Gate],
    x: &Matrix,
    rng: &mut R,
    opts: ForwardOptions,
) -> Result<ForwardCache> {
    forward_impl(net, gates, x, MaskSource::Sample(rng), opts)
}

/// Forward pass with the hidden-layer masks supplied by the caller.
pub fn forward_with_masks(
    net: &NetworkParams,
    gates: &[Gate],
    x: &Matrix,
    masks: &[BlockMask],
    kernel: Kernel,
) -> Result<ForwardCache> {
    let opts = ForwardOptions {
        sampling: Sampling::Stochastic,
        kernel,
    };
    forward_impl::<rand_chacha::ChaCha8Rng>(net, gates, x, MaskSource::Fixed(masks), opts)
}

fn forward_impl<R: Rng + ?Sized>(
    net: &NetworkParams,
    gates: &[Gate],
    x: &Matrix,
    mut source: MaskSource<'_, R>,
    opts: ForwardOptions,
) -> Result<ForwardCache> {
    let arch = &net.arch;
    if x.cols() != arch.n_inputs {
        return Err(Error::shape(
            "forward",
            format!(
                "input has {} features, network expects {}",
                x.cols(),
                arch.n_inputs
            ),
        ));
    }
    if gates.len() != arch.layers.len() || net.hidden.len() != arch.layers.len() {
        return Err(Error::shape(
            "forward",
            format!(
                "{} hidden layers, {} gates, {} weight layers",
                arch.layers.len(),
                gates.len(),
                net.hidden.len()
            ),
        ));
    }
    if let MaskSource::Fixed(masks) = &source {
        if masks.len() != arch.layers.len() {
            return Err(Error::shape(
                "forward",
                format!("{} masks for {} layers", masks.len(), arch.layers.len()),
            ));
        }
    }
    let m = x.rows();
    let input_mask = BlockMask::ones(m, 1, arch.n_inputs);
    let mut layers: Vec<LayerCache> = Vec::with_capacity(arch.layers.len());

    for (l, shape) in arch.layers.iter().enumerate() {
        let (s, in_mask) = match l {
            0 => (x, &input_mask),
            _ => (&layers[l - 1].h, &layers[l - 1].mask),
        };
        let probs = match &gates[l] {
            Gate::Learned(p) => {
                if p.n_blocks() != shape.n_blocks {
                    return Err(Error::shape(
                        "forward",
                        format!(
                            "layer {}: policy has {} blocks, layer has {}",
                            l + 1,
                            p.n_blocks(),
                            shape.n_blocks
                        ),
                    ));
                }
                Some(policy::compute_probs(p, s)?)
            }
            Gate::Uniform(rate) => Some(Matrix::filled(m, shape.n_blocks, *rate)),
            Gate::AlwaysOn => None,
        };
        let mask = match (&mut source, &probs) {
            (MaskSource::Fixed(masks), _) => {
                let mk = &masks[l];
                if mk.examples() != m
                    || mk.n_blocks() != shape.n_blocks
                    || mk.block_size() != shape.block_size
                {
                    return Err(Error::shape(
                        "forward",
                        format!("layer {}: supplied mask does not fit the layer", l + 1),
                    ));
                }
                mk.clone()
            }
            (_, None) => BlockMask::ones(m, shape.n_blocks, shape.block_size),
            (MaskSource::Sample(rng), Some(p)) => match opts.sampling {
                Sampling::Stochastic => policy::sample_mask(p, shape.block_size, &mut **rng),
                Sampling::Threshold => {
                    let bits = p.as_slice().iter().map(|&v| (v >= 0.5) as u8).collect();
                    BlockMask::new(m, shape.n_blocks, shape.block_size, bits)?
                }
            },
        };
        let layer = &net.hidden[l];
        let (pre, h) = hidden_layer(s, in_mask, &mask, layer, arch.activation, opts.kernel)?;
        layers.push(LayerCache {
            probs,
            mask,
            pre,
            h,
        });
    }

    let (last_h, last_mask) = match layers.last() {
        Some(c) => (&c.h, &c.mask),
        None => (x, &input_mask),
    };
    let mut logits = match opts.kernel {
        Kernel::Sparse => masked_matmul(
            last_h,
            &net.output.w,
            last_mask,
            &BlockMask::ones(m, 1, arch.n_classes),
        )?,
        Kernel::Dense => matmul(last_h, &net.output.w)?,
    };
    logits.add_row_vector(&net.output.b);
    let yhat = softmax(&logits);
    Ok(ForwardCache {
        input: x.clone(),
        input_mask,
        layers,
        logits,
        yhat,
    })
}

fn hidden_layer(
    s: &Matrix,
    in_mask: &BlockMask,
    out_mask: &BlockMask,
    layer: &DenseLayer,
    act: Activation,
    kernel: Kernel,
) -> Result<(Matrix, Matrix)> {
    match kernel {
        Kernel::Sparse => {
            let mut pre = masked_matmul(s, &layer.w, in_mask, out_mask)?;
            let n = pre.cols();
            let mut h = Matrix::zeros(pre.rows(), n);
            let mut runs = Vec::new();
            for i in 0..pre.rows() {
                out_mask.active_runs(i, &mut runs);
                let prow = pre.row_mut(i);
                for r in &runs {
                    for (p, &b) in prow[r.clone()].iter_mut().zip(&layer.b[r.clone()]) {
                        *p += b;
                    }
                }
                let prow = pre.row(i).to_vec();
                let hrow = h.row_mut(i);
                for r in &runs {
                    for (o, &p) in hrow[r.clone()].iter_mut().zip(&prow[r.clone()]) {
                        *o = act.apply(p);
                    }
                }
            }
            Ok((pre, h))
        }
        Kernel::Dense => {
            let mut pre = matmul(s, &layer.w)?;
            pre.add_row_vector(&layer.b);
            let mut h = pre.clone();
            h.map_inplace(|x| act.apply(x));
            h.hadamard_inplace(&out_mask.expand());
            Ok((pre, h))
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Per-example negative log-likelihood `−log ŷ_i[label_i]`.
pub fn nll(yhat: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    if labels.len() != yhat.rows() {
        return Err(Error::shape(
            "nll",
            format!("{} labels for {} rows", labels.len(), yhat.rows()),
        ));
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            if y >= yhat.cols() {
                return Err(Error::InvalidValue(format!(
                    "label {y} out of range for {} classes",
                    yhat.cols()
                )));
            }
            Ok(-yhat.get(i, y).max(NLL_EPS).ln())
        })
        .collect()
}

/// How the per-example costs `c_i` enter the regularised loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NllReduction {
    /// `Σ_i c_i = −log P(Y | X)` of the whole minibatch.
    #[default]
    Sum,
    /// `(1/m_b) Σ_i c_i`.
    Mean,
}

impl NllReduction {
    fn factor(self, m: usize) -> f64 {
        match self {
            NllReduction::Sum => 1.0,
            NllReduction::Mean => 1.0 / m as f64,
        }
    }
}

/// Weights of the regularised loss
/// `red(c) + Σ_l [λ_s,l (L_b + L_e) + λ_v,l L_v] + λ_L2 (‖Θ_NN‖² + ‖Θ_π‖²)`
/// where `red` is the minibatch sum or mean of the per-example NLL.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_s: Vec<f64>,
    pub lambda_v: Vec<f64>,
    pub lambda_l2: f64,
    pub tau: Vec<f64>,
    pub norm: PenaltyNorm,
    pub reduction: NllReduction,
}

impl LossWeights {
    /// No regularisation at all.
    pub fn none(n_layers: usize) -> Self {
        LossWeights {
            lambda_s: vec![0.0; n_layers],
            lambda_v: vec![0.0; n_layers],
            lambda_l2: 0.0,
            tau: vec![0.5; n_layers],
            norm: PenaltyNorm::Abs,
            reduction: NllReduction::Mean,
        }
    }

    fn layer_active(&self, l: usize) -> bool {
        self.lambda_s[l] != 0.0 || self.lambda_v[l] != 0.0
    }
}

/// Scalar pieces of the regularised loss on one minibatch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// Mean per-example NLL, whatever the reduction.
    pub nll: f64,
    /// Summed over layers with learned policies.
    pub l_b: f64,
    pub l_e: f64,
    pub l_v: f64,
    pub l2: f64,
    pub total: f64,
}

/// Gradients of the regularised loss.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub net: NetworkParams,
    /// One entry per hidden layer; `None` where the gate has no parameters.
    pub policies: Vec<Option<PolicyParams>>,
}

impl Gradients {
    /// Same order as [`crate::trainer::Model::flat_params`].
    pub fn flat(&self) -> Vec<f64> {
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
        for p in self.policies.iter().flatten() {
            out.extend_from_slice(p.z.as_slice());
            out.extend_from_slice(&p.d);
        }
        out
    }
}

fn check_cache(
    net: &NetworkParams,
    gates: &[Gate],
    cache: &ForwardCache,
    labels: &[usize],
) -> Result<()> {
    let arch = &net.arch;
    let stale = cache.layers.len() != arch.layers.len()
        || gates.len() != arch.layers.len()
        || cache.input.cols() != arch.n_inputs
        || cache.yhat.cols() != arch.n_classes
        || cache
            .layers
            .iter()
            .zip(&arch.layers)
            .any(|(c, s)| c.h.cols() != s.units() || c.h.rows() != cache.batch_size());
    if stale {
        return Err(Error::shape("backward", "cache does not match the network"));
    }
    if labels.len() != cache.batch_size() {
        return Err(Error::shape(
            "backward",
            format!(
                "{} labels for a batch of {}",
                labels.len(),
                cache.batch_size()
            ),
        ));
    }
    Ok(())
}

/// Evaluates the regularised loss on a cached forward pass.
pub fn regularized_loss(
    net: &NetworkParams,
    gates: &[Gate],
    cache: &ForwardCache,
    labels: &[usize],
    w: &LossWeights,
) -> Result<LossBreakdown> {
    check_cache(net, gates, cache, labels)?;
    let costs = nll(&cache.yhat, labels)?;
    let mut out = LossBreakdown {
        nll: costs.iter().sum::<f64>() / costs.len() as f64,
        ..Default::default()
    };
    let mut penalty = 0.0;
    let mut policy_sq = 0.0;
    for (l, gate) in gates.iter().enumerate() {
        if let (Gate::Learned(p), Some(sigma)) = (gate, &cache.layers[l].probs) {
            policy_sq += p.sum_squares();
            if sigma.rows() >= 2 {
                let t = RegularizerTerms::evaluate(sigma, w.tau[l], w.norm)?;
                out.l_b += t.l_b.value;
                out.l_e += t.l_e.value;
                out.l_v += t.l_v.value;
                penalty += t.weighted_value(w.lambda_s[l], w.lambda_v[l]);
            } else if w.layer_active(l) {
                return Err(Error::InvalidValue(
                    "sparsity/variance penalties need a minibatch of at least 2".into(),
                ));
            }
        }
    }
    out.l2 = w.lambda_l2 * (net.sum_squares() + policy_sq);
    let data = costs.iter().sum::<f64>() * w.reduction.factor(costs.len());
    out.total = data + penalty + out.l2;
    Ok(out)
}

/// Exact gradient of the regularised loss with the sampled masks held fixed.
///
/// The NLL reaches only the network weights; the penalties reach the policy
/// parameters through `σ` and, for deeper layers, the network weights below
/// through `σ`'s dependence on `h`. The REINFORCE term is not part of this.
pub fn backward_nn(
    net: &NetworkParams,
    gates: &[Gate],
    cache: &ForwardCache,
    labels: &[usize],
    w: &LossWeights,
) -> Result<Gradients> {
    check_cache(net, gates, cache, labels)?;
    let arch = &net.arch;
    let n_layers = arch.layers.len();
    let m = cache.batch_size();
    let mut grads = NetworkParams::zeros(arch);
    let mut policy_grads: Vec<Option<PolicyParams>> = vec![None; n_layers];

    // softmax + NLL
    let mut dlogits = cache.yhat.clone();
    for (i, &y) in labels.iter().enumerate() {
        if y >= arch.n_classes {
            return Err(Error::InvalidValue(format!("label {y} out of range")));
        }
        let v = dlogits.get(i, y);
        dlogits.set(i, y, v - 1.0);
    }
    dlogits.scale(w.reduction.factor(m));

    let out_mask = BlockMask::ones(m, 1, arch.n_classes);
    let last_h = cache.layer_input(n_layers);
    let last_mask = cache.layer_input_mask(n_layers);
    grads.output.w = masked_matmul_tn(last_h, &dlogits, last_mask, &out_mask)?;
    grads.output.b = dlogits.col_sums();

    let mut dh = if n_layers > 0 {
        Some(masked_matmul_nt(
            &dlogits,
            &net.output.w,
            &out_mask,
            last_mask,
        )?)
    } else {
        None
    };

    for l in (0..n_layers).rev() {
        let c = &cache.layers[l];
        let s = cache.layer_input(l);
        let in_mask = cache.layer_input_mask(l);
        let mut da = dh.take().expect("upstream gradient");
        for i in 0..m {
            let drow = da.row_mut(i);
            for (u, d) in drow.iter_mut().enumerate() {
                if c.mask.unit_active(i, u) {
                    *d *= arch.activation.derivative(c.pre.get(i, u), c.h.get(i, u));
                } else {
                    *d = 0.0;
                }
            }
        }
        grads.hidden[l].w = masked_matmul_tn(s, &da, in_mask, &c.mask)?;
        grads.hidden[l].b = da.col_sums();
        let mut dh_below = if l > 0 {
            Some(masked_matmul_nt(&da, &net.hidden[l].w, &c.mask, in_mask)?)
        } else {
            None
        };

        if let (Gate::Learned(p), Some(sigma)) = (&gates[l], &c.probs) {
            let mut g = PolicyParams::zeros(p.n_blocks(), p.n_inputs());
            if w.layer_active(l) {
                let terms = RegularizerTerms::evaluate(sigma, w.tau[l], w.norm)?;
                let mut dpre = terms.weighted_grad(w.lambda_s[l], w.lambda_v[l]);
                for (d, &sg) in dpre.as_mut_slice().iter_mut().zip(sigma.as_slice()) {
                    // clamped probabilities are flat in the pre-activation
                    let slope = if sg <= PROB_EPS || sg >= 1.0 - PROB_EPS {
                        0.0
                    } else {
                        sg * (1.0 - sg)
                    };
                    *d *= slope;
                }
                g.z = matmul_tn(&dpre, s)?;
                g.d = dpre.col_sums();
                if let Some(dhb) = dh_below.as_mut() {
                    let back = matmul(&dpre, &p.z)?;
                    dhb.axpy(1.0, &back);
                }
            }
            if w.lambda_l2 != 0.0 {
                g.axpy(2.0 * w.lambda_l2, p);
            }
            policy_grads[l] = Some(g);
        }
        dh = dh_below;
    }

    if w.lambda_l2 != 0.0 {
        grads.axpy(2.0 * w.lambda_l2, net);
    }
    Ok(Gradients {
        net: grads,
        policies: policy_grads,
    })
}
