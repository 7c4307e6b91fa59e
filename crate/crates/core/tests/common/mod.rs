//! Toy models and finite-difference oracles shared by the integration tests.
#![allow(dead_code)]

use condnet::linalg::{BlockMask, Matrix};
use condnet::network::{
    self, Activation, Architecture, Gate, Kernel, LayerShape, LossWeights, NllReduction,
};
use condnet::regularizers::PenaltyNorm;
use condnet::trainer::{stream_rng, GateKind, Hyperparams, Model};
use rand::Rng;

pub fn arch(
    n_inputs: usize,
    layers: &[(usize, usize)],
    n_classes: usize,
    activation: Activation,
) -> Architecture {
    Architecture {
        n_inputs,
        n_classes,
        layers: layers
            .iter()
            .map(|&(n_blocks, block_size)| LayerShape {
                n_blocks,
                block_size,
            })
            .collect(),
        activation,
    }
}

/// Condnet model whose gates are then overridden by `gates` where given.
pub fn toy_model(arch: &Architecture, gates: &[Option<Gate>], seed: u64) -> Model {
    let mut m = Model::init(
        arch,
        &GateKind::Condnet,
        &Hyperparams::default(),
        &mut stream_rng(seed, 7),
    )
    .unwrap();
    let mut rng = stream_rng(seed, 8);
    for layer in m
        .net
        .hidden
        .iter_mut()
        .chain(std::iter::once(&mut m.net.output))
    {
        for b in layer.b.iter_mut() {
            *b = rng.random_range(-0.5..0.5);
        }
    }
    for (g, o) in m.gates.iter_mut().zip(gates) {
        if let Some(p) = g.policy_mut() {
            p.z.map_inplace(|v| v * 4.0);
            for d in p.d.iter_mut() {
                *d = rng.random_range(-1.0..1.0);
            }
        }
        if let Some(o) = o {
            *g = o.clone();
        }
    }
    m
}

pub fn random_batch(
    m: usize,
    n_inputs: usize,
    n_classes: usize,
    seed: u64,
) -> (Matrix, Vec<usize>) {
    let mut rng = stream_rng(seed, 9);
    let x = Matrix::from_fn(m, n_inputs, |_, _| rng.random::<f64>());
    let y = (0..m).map(|_| rng.random_range(0..n_classes)).collect();
    (x, y)
}

pub fn weights(
    n_layers: usize,
    lambda_s: f64,
    lambda_v: f64,
    lambda_l2: f64,
    tau: f64,
    reduction: NllReduction,
) -> LossWeights {
    LossWeights {
        lambda_s: vec![lambda_s; n_layers],
        lambda_v: vec![lambda_v; n_layers],
        lambda_l2,
        tau: vec![tau; n_layers],
        norm: PenaltyNorm::Abs,
        reduction,
    }
}

pub fn sampled_masks(model: &Model, x: &Matrix, seed: u64) -> Vec<BlockMask> {
    network::forward(
        &model.net,
        &model.gates,
        x,
        &mut stream_rng(seed, 10),
        Default::default(),
    )
    .unwrap()
    .masks()
}

pub fn loss_at(
    model: &Model,
    x: &Matrix,
    y: &[usize],
    masks: &[BlockMask],
    w: &LossWeights,
) -> f64 {
    let cache =
        network::forward_with_masks(&model.net, &model.gates, x, masks, Kernel::Sparse).unwrap();
    network::regularized_loss(&model.net, &model.gates, &cache, y, w)
        .unwrap()
        .total
}

/// Largest relative difference between `backward_nn` and central
/// differences of the regularised loss, masks held fixed. Entries below
/// 1e-5 in magnitude are compared absolutely against that floor.
pub fn max_rel_err(
    model: &Model,
    x: &Matrix,
    y: &[usize],
    masks: &[BlockMask],
    w: &LossWeights,
    h: f64,
) -> f64 {
    let cache =
        network::forward_with_masks(&model.net, &model.gates, x, masks, Kernel::Sparse).unwrap();
    let analytic = network::backward_nn(&model.net, &model.gates, &cache, y, w)
        .unwrap()
        .flat();
    let theta = model.flat_params();
    assert_eq!(analytic.len(), theta.len());
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for k in 0..theta.len() {
        let mut t = theta.clone();
        t[k] = theta[k] + h;
        probe.set_flat_params(&t).unwrap();
        let up = loss_at(&probe, x, y, masks, w);
        t[k] = theta[k] - h;
        probe.set_flat_params(&t).unwrap();
        let down = loss_at(&probe, x, y, masks, w);
        let fd = (up - down) / (2.0 * h);
        let err = (analytic[k] - fd).abs() / analytic[k].abs().max(fd.abs()).max(1e-5);
        if std::env::var("FD_DEBUG").is_ok() && err > 1e-7 {
            eprintln!("k={k} analytic={} fd={fd} err={err}", analytic[k]);
        }
        worst = worst.max(err);
    }
    worst
}
