mod common;

use common::*;
use condnet::network::{Activation, Gate, NllReduction};

#[test]
fn one_layer_learned_policy() {
    let a = arch(5, &[(3, 2)], 3, Activation::Tanh);
    let m = toy_model(&a, &[None], 1);
    let (x, y) = random_batch(6, 5, 3, 1);
    let masks = sampled_masks(&m, &x, 1);
    for red in [NllReduction::Sum, NllReduction::Mean] {
        let w = weights(1, 0.7, 0.9, 0.01, 0.3, red);
        let e = max_rel_err(&m, &x, &y, &masks, &w, 1e-5);
        assert!(e < 1e-5, "{red:?}: {e}");
    }
}

#[test]
fn two_learned_layers_regularisers_reach_lower_weights() {
    let a = arch(4, &[(4, 2), (3, 3)], 3, Activation::Tanh);
    let m = toy_model(&a, &[None, None], 2);
    let (x, y) = random_batch(8, 4, 3, 2);
    let masks = sampled_masks(&m, &x, 2);
    let w = weights(2, 1.5, 2.0, 0.02, 0.25, NllReduction::Sum);
    let e = max_rel_err(&m, &x, &y, &masks, &w, 1e-5);
    assert!(e < 1e-5, "{e}");
}

#[test]
fn mixed_gates_relu() {
    let a = arch(6, &[(2, 3), (3, 2), (2, 2)], 4, Activation::Relu);
    let m = toy_model(
        &a,
        &[Some(Gate::AlwaysOn), None, Some(Gate::Uniform(0.6))],
        3,
    );
    let (x, y) = random_batch(7, 6, 4, 3);
    let masks = sampled_masks(&m, &x, 3);
    let w = weights(3, 0.5, 0.5, 0.005, 0.4, NllReduction::Mean);
    let e = max_rel_err(&m, &x, &y, &masks, &w, 1e-6);
    assert!(e < 1e-5, "{e}");
}

#[test]
fn no_regularisation_all_ones_is_plain_backprop() {
    use condnet::linalg::BlockMask;
    let a = arch(5, &[(4, 2)], 3, Activation::Tanh);
    let m = toy_model(&a, &[Some(Gate::AlwaysOn)], 4);
    let (x, y) = random_batch(5, 5, 3, 4);
    let masks = vec![BlockMask::ones(5, 4, 2)];
    let w = weights(1, 0.0, 0.0, 0.0, 0.5, NllReduction::Mean);
    let cache =
        condnet::network::forward_with_masks(&m.net, &m.gates, &x, &masks, Default::default())
            .unwrap();
    let g = condnet::network::backward_nn(&m.net, &m.gates, &cache, &y, &w).unwrap();

    // plain two-layer MLP backprop
    let (w1, b1, w2, b2) = (
        &m.net.hidden[0].w,
        &m.net.hidden[0].b,
        &m.net.output.w,
        &m.net.output.b,
    );
    let mut gw1 = vec![0.0; 5 * 8];
    let mut gw2 = vec![0.0; 8 * 3];
    for i in 0..5 {
        let h: Vec<f64> = (0..8)
            .map(|u| ((0..5).map(|k| x.get(i, k) * w1.get(k, u)).sum::<f64>() + b1[u]).tanh())
            .collect();
        let z: Vec<f64> = (0..3)
            .map(|c| (0..8).map(|u| h[u] * w2.get(u, c)).sum::<f64>() + b2[c])
            .collect();
        let mx = z.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        let dz: Vec<f64> = (0..3)
            .map(|c| (e[c] / s - if c == y[i] { 1.0 } else { 0.0 }) / 5.0)
            .collect();
        for u in 0..8 {
            for c in 0..3 {
                gw2[u * 3 + c] += h[u] * dz[c];
            }
            let dh: f64 = (0..3).map(|c| dz[c] * w2.get(u, c)).sum::<f64>() * (1.0 - h[u] * h[u]);
            for k in 0..5 {
                gw1[k * 8 + u] += x.get(i, k) * dh;
            }
        }
    }
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(p, q)| (p - q).abs() < 1e-13);
    assert!(close(g.net.hidden[0].w.as_slice(), &gw1));
    assert!(close(g.net.output.w.as_slice(), &gw2));
}

#[test]
fn ridge_only_gradient_is_two_lambda_theta() {
    let a = arch(3, &[(2, 2)], 2, Activation::Tanh);
    let mut m = toy_model(&a, &[None], 5);
    // zero output weights and biases make the NLL flat in every parameter
    let n = m.flat_params().len();
    m.set_flat_params(&(0..n).map(|k| 0.1 + 0.01 * k as f64).collect::<Vec<_>>())
        .unwrap();
    m.net.output.w.map_inplace(|_| 0.0);
    let (x, y) = random_batch(4, 3, 2, 5);
    let masks = sampled_masks(&m, &x, 5);
    let w = weights(1, 0.0, 0.0, 0.03, 0.5, NllReduction::Sum);
    let cache =
        condnet::network::forward_with_masks(&m.net, &m.gates, &x, &masks, Default::default())
            .unwrap();
    let g = condnet::network::backward_nn(&m.net, &m.gates, &cache, &y, &w).unwrap();
    let hidden_w = m.net.hidden[0].w.as_slice();
    for (gv, t) in g.net.hidden[0].w.as_slice().iter().zip(hidden_w) {
        assert!((gv - 0.06 * t).abs() < 1e-15);
    }
    let p = m.gates[0].policy().unwrap();
    let gp = g.policies[0].as_ref().unwrap();
    for (gv, t) in gp.z.as_slice().iter().zip(p.z.as_slice()) {
        assert!((gv - 0.06 * t).abs() < 1e-15);
    }
}
