//! Backprop through a gated two-layer network against central differences
//! of the regularised loss, masks held fixed.

use condnet::network::{
    self, Activation, Architecture, Kernel, LayerShape, LossWeights, NllReduction,
};
use condnet::regularizers::PenaltyNorm;
use condnet::trainer::{stream_rng, GateKind, Hyperparams, Model};
use condnet::Matrix;
use rand::Rng;

fn main() -> condnet::Result<()> {
    let arch = Architecture {
        n_inputs: 6,
        n_classes: 3,
        layers: vec![
            LayerShape {
                n_blocks: 3,
                block_size: 2,
            },
            LayerShape {
                n_blocks: 2,
                block_size: 3,
            },
        ],
        activation: Activation::Tanh,
    };
    let hyper = Hyperparams::default();
    let mut model = Model::init(&arch, &GateKind::Condnet, &hyper, &mut stream_rng(1, 0))?;
    // move the policies away from saturation so every term contributes
    for p in model.gates.iter_mut().filter_map(|g| g.policy_mut()) {
        p.d.iter_mut().for_each(|d| *d = 0.3);
    }
    let mut rng = stream_rng(1, 1);
    let x = Matrix::from_fn(5, 6, |_, _| rng.random::<f64>());
    let y: Vec<usize> = (0..5).map(|i| i % 3).collect();
    let w = LossWeights {
        lambda_s: vec![2.0; 2],
        lambda_v: vec![1.0; 2],
        lambda_l2: 0.01,
        tau: vec![0.4; 2],
        norm: PenaltyNorm::Abs,
        reduction: NllReduction::Sum,
    };

    let cache = network::forward(
        &model.net,
        &model.gates,
        &x,
        &mut stream_rng(1, 2),
        Default::default(),
    )?;
    let masks = cache.masks();
    let analytic = network::backward_nn(&model.net, &model.gates, &cache, &y, &w)?.flat();
    let loss = |m: &Model| -> condnet::Result<f64> {
        let c = network::forward_with_masks(&m.net, &m.gates, &x, &masks, Kernel::Sparse)?;
        Ok(network::regularized_loss(&m.net, &m.gates, &c, &y, &w)?.total)
    };

    let theta = model.flat_params();
    let mut probe = model.clone();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for k in 0..theta.len() {
        let mut t = theta.clone();
        t[k] += h;
        probe.set_flat_params(&t)?;
        let up = loss(&probe)?;
        t[k] -= 2.0 * h;
        probe.set_flat_params(&t)?;
        let down = loss(&probe)?;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-5));
    }
    println!("{} parameters, max relative error {worst:.2e}", theta.len());
    Ok(())
}
