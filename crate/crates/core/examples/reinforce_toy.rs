//! The score-function estimator on a policy small enough to enumerate.
//!
//! Four blocks, one input, a fixed cost per mask. The exact expected
//! gradient is compared with Monte Carlo averages of growing size.

use condnet::linalg::{BlockMask, Matrix};
use condnet::policy::{self, PolicyParams, PolicySample};
use condnet::trainer::stream_rng;

fn mask(code: usize, k: usize) -> BlockMask {
    BlockMask::new(1, k, 1, (0..k).map(|j| ((code >> j) & 1) as u8).collect()).unwrap()
}

fn main() -> condnet::Result<()> {
    let k = 4;
    let p = PolicyParams::new(
        Matrix::from_fn(k, 3, |i, j| 0.3 * (i as f64) - 0.2 * (j as f64)),
        vec![0.5, -0.5, 1.0, 0.0],
    )?;
    let s = Matrix::from_rows(&[vec![0.2, 0.7, 0.1]])?;
    let probs = policy::compute_probs(&p, &s)?;
    // cost: number of active blocks plus a bonus for block 2
    let cost = |code: usize| (code.count_ones() as f64) - 2.0 * ((code >> 2) & 1) as f64;

    let score = |m: BlockMask, c: f64| -> condnet::Result<Vec<f64>> {
        let g = policy::grad_log_prob(
            &p,
            &s,
            &PolicySample {
                probs: probs.clone(),
                mask: m,
            },
            &[c],
        )?;
        Ok(g.d)
    };

    let mut exact = vec![0.0; k];
    for code in 0..1 << k {
        let pr = policy::log_prob(&probs, &mask(code, k))?[0].exp();
        for (e, v) in exact.iter_mut().zip(score(mask(code, k), cost(code))?) {
            *e += pr * v;
        }
    }
    println!("exact  dE[C]/dd = {exact:.4?}");

    let mut rng = stream_rng(1, 0);
    let mut acc = vec![0.0; k];
    let mut n = 0;
    for target in [100, 1_000, 10_000, 100_000] {
        while n < target {
            let m = policy::sample_mask(&probs, 1, &mut rng);
            let code = (0..k).map(|j| (m.get(0, j) as usize) << j).sum();
            for (a, v) in acc.iter_mut().zip(score(m, cost(code))?) {
                *a += v;
            }
            n += 1;
        }
        let mean: Vec<f64> = acc.iter().map(|a| a / n as f64).collect();
        println!("n={n:>6} estimate    = {mean:.4?}");
    }
    Ok(())
}
