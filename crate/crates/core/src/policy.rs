//! Per-layer sigmoid-Bernoulli block activation policy.
//!
//! A policy maps the (already masked) activations `s` of the layer below to
//! one activation probability per block, `σ = sigmoid(s·Zᵀ + d)`, and
//! samples each block independently. The log-probability of a mask `u` is
//! `Σ_j log(σ_j u_j + (1 − σ_j)(1 − u_j))`, whose derivative with respect to
//! the pre-sigmoid value of block `j` is `u_j − σ_j`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{matmul_nt, matmul_tn, BlockMask, Matrix};

/// Probabilities are clamped to `[PROB_EPS, 1 − PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-7;

/// Policy parameters `{Z, d}`; also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    /// `n_blocks × n_inputs`
    pub z: Matrix,
    pub d: Vec<f64>,
}

/// A sampled action together with the probabilities it was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicySample {
    pub probs: Matrix,
    pub mask: BlockMask,
}

impl PolicyParams {
    pub fn new(z: Matrix, d: Vec<f64>) -> Result<Self> {
        if d.len() != z.rows() {
            return Err(Error::shape(
                "PolicyParams::new",
                format!("Z has {} rows, d has {} entries", z.rows(), d.len()),
            ));
        }
        if !z.is_finite() || d.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidValue("non-finite policy parameter".into()));
        }
        Ok(PolicyParams { z, d })
    }

    pub fn zeros(n_blocks: usize, n_inputs: usize) -> Self {
        PolicyParams {
            z: Matrix::zeros(n_blocks, n_inputs),
            d: vec![0.0; n_blocks],
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.z.rows()
    }

    pub fn n_inputs(&self) -> usize {
        self.z.cols()
    }

    pub fn sum_squares(&self) -> f64 {
        self.z.sum_squares() + self.d.iter().map(|x| x * x).sum::<f64>()
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &PolicyParams) {
        self.z.axpy(a, &other.z);
        for (x, &y) in self.d.iter_mut().zip(&other.d) {
            *x += a * y;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.z.is_finite() && self.d.iter().all(|x| x.is_finite())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `σ = clamp(sigmoid(s·Zᵀ + d))`, one row per example.
pub fn compute_probs(params: &PolicyParams, s: &Matrix) -> Result<Matrix> {
    if s.cols() != params.n_inputs() {
        return Err(Error::shape(
            "compute_probs",
            format!(
                "input has {} columns, policy expects {}",
                s.cols(),
                params.n_inputs()
            ),
        ));
    }
    let mut pre = matmul_nt(s, &params.z)?;
    pre.add_row_vector(&params.d);
    pre.map_inplace(|x| clamp_prob(sigmoid(x)));
    Ok(pre)
}

/// Draws one uniform per entry in row-major order; a block is active iff
/// its draw is below its probability.
pub fn sample_mask<R: Rng + ?Sized>(probs: &Matrix, block_size: usize, rng: &mut R) -> BlockMask {
    let bits = probs
        .as_slice()
        .iter()
        .map(|&p| (rng.random::<f64>() < p) as u8)
        .collect();
    BlockMask::new(probs.rows(), probs.cols(), block_size, bits)
        .expect("sampled mask has consistent shape")
}

/// Per-example `log π(u | s)`.
pub fn log_prob(probs: &Matrix, mask: &BlockMask) -> Result<Vec<f64>> {
    if probs.rows() != mask.examples() || probs.cols() != mask.n_blocks() {
        return Err(Error::shape(
            "log_prob",
            format!(
                "probs {:?} vs mask {}x{}",
                probs.shape(),
                mask.examples(),
                mask.n_blocks()
            ),
        ));
    }
    Ok((0..probs.rows())
        .map(|i| {
            probs
                .row(i)
                .iter()
                .zip(mask.row(i))
                .map(|(&s, &u)| {
                    let u = u as f64;
                    (s * u + (1.0 - s) * (1.0 - u)).ln()
                })
                .sum()
        })
        .collect())
}

/// `(1/m_b) Σ_i weights_i ∇_{Z,d} log π(u_i | s_i)`.
///
/// Accumulates the weighted per-example score `w_i (u_ij − σ_ij)` and
/// contracts it with `s`, which is the cost-vector times Jacobian product
/// without ever forming the Jacobian.
pub fn grad_log_prob(
    params: &PolicyParams,
    s: &Matrix,
    sample: &PolicySample,
    weights: &[f64],
) -> Result<PolicyParams> {
    let m = s.rows();
    if weights.len() != m {
        return Err(Error::shape(
            "grad_log_prob",
            format!("{} weights for {m} examples", weights.len()),
        ));
    }
    if s.cols() != params.n_inputs()
        || sample.probs.shape() != (m, params.n_blocks())
        || sample.mask.examples() != m
        || sample.mask.n_blocks() != params.n_blocks()
    {
        return Err(Error::shape(
            "grad_log_prob",
            format!(
                "s {:?}, probs {:?}, policy {}x{}",
                s.shape(),
                sample.probs.shape(),
                params.n_blocks(),
                params.n_inputs()
            ),
        ));
    }
    let inv_m = 1.0 / m as f64;
    let score = Matrix::from_fn(m, params.n_blocks(), |i, j| {
        let u = sample.mask.get(i, j) as u8 as f64;
        weights[i] * (u - sample.probs.get(i, j)) * inv_m
    });
    let z = matmul_tn(&score, s)?;
    let d = score.col_sums();
    Ok(PolicyParams { z, d })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng, k: usize, n: usize, scale: f64) -> PolicyParams {
        PolicyParams {
            z: Matrix::from_fn(k, n, |_, _| rng.random_range(-scale..scale)),
            d: (0..k).map(|_| rng.random_range(-scale..scale)).collect(),
        }
    }

    fn mask_from_index(code: usize, k: usize) -> Vec<u8> {
        (0..k).map(|j| ((code >> j) & 1) as u8).collect()
    }

    #[test]
    fn zero_params_give_half() {
        let p = PolicyParams::zeros(4, 3);
        let s = Matrix::from_fn(5, 3, |i, j| (i + j) as f64);
        let probs = compute_probs(&p, &s).unwrap();
        assert!(probs.as_slice().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn bias_ln3_gives_three_quarters() {
        let mut p = PolicyParams::zeros(2, 3);
        p.d = vec![3f64.ln(), 0.0];
        let probs = compute_probs(&p, &Matrix::zeros(1, 3)).unwrap();
        assert!((probs.get(0, 0) - 0.75).abs() < 1e-15);
        assert_eq!(probs.get(0, 1), 0.5);
    }

    #[test]
    fn probs_match_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_params(&mut rng, 5, 7, 1.0);
        let s = Matrix::from_fn(4, 7, |_, _| rng.random_range(-1.0..1.0));
        let probs = compute_probs(&p, &s).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let mut acc = 0.0;
                for q in 0..7 {
                    acc += s.get(i, q) * p.z.get(j, q);
                }
                let want = 1.0 / (1.0 + (-(acc + p.d[j])).exp());
                assert!((probs.get(i, j) - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn probs_reject_wrong_width() {
        let p = PolicyParams::zeros(2, 3);
        assert!(compute_probs(&p, &Matrix::zeros(1, 4)).is_err());
    }

    #[test]
    fn saturated_probs_are_clamped() {
        let mut p = PolicyParams::zeros(2, 1);
        p.d = vec![1e3, -1e3];
        let probs = compute_probs(&p, &Matrix::zeros(1, 1)).unwrap();
        assert_eq!(probs.row(0), &[1.0 - PROB_EPS, PROB_EPS]);
        let lp = log_prob(&probs, &BlockMask::from_rows(&[vec![0, 1]], 1).unwrap()).unwrap();
        assert!(lp[0].is_finite());
    }

    #[test]
    fn near_certain_probs_sample_deterministically() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hi = Matrix::filled(50, 20, 1.0 - PROB_EPS);
        assert!(sample_mask(&hi, 4, &mut rng).is_all_ones());
        let lo = Matrix::filled(50, 20, PROB_EPS);
        assert_eq!(sample_mask(&lo, 4, &mut rng).count_active(), 0);
    }

    #[test]
    fn sample_rate_matches_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let probs = Matrix::filled(1000, 100, 0.3);
        let rate = sample_mask(&probs, 1, &mut rng).active_fraction();
        // 3σ binomial bound for n = 1e5 is ~0.0043
        assert!((rate - 0.3).abs() < 0.01, "rate {rate}");
    }

    #[test]
    fn sample_draws_row_major() {
        let probs = Matrix::from_fn(3, 4, |i, j| 0.1 + 0.2 * ((i + j) % 4) as f64);
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mask = sample_mask(&probs, 1, &mut a);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        for i in 0..3 {
            for j in 0..4 {
                let draw: f64 = b.random();
                assert_eq!(mask.get(i, j), draw < probs.get(i, j));
            }
        }
    }

    #[test]
    fn log_prob_simple_cases() {
        let half = Matrix::filled(2, 5, 0.5);
        let m = BlockMask::new(2, 5, 1, vec![1, 0, 1, 1, 0, 0, 0, 0, 0, 1]).unwrap();
        for v in log_prob(&half, &m).unwrap() {
            assert!((v - 5.0 * 0.5f64.ln()).abs() < 1e-12);
        }
        let p = Matrix::from_rows(&[vec![0.75, 0.5]]).unwrap();
        let m = BlockMask::from_rows(&[vec![1, 0]], 1).unwrap();
        let v = log_prob(&p, &m).unwrap()[0];
        assert!((v - (0.75f64.ln() + 0.5f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn probabilities_sum_to_one_over_all_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for k in [1usize, 3, 7, 12] {
            let sig: Vec<f64> = (0..k).map(|_| rng.random_range(0.02..0.98)).collect();
            let probs = Matrix::new(1, k, sig).unwrap();
            let total: f64 = (0..1usize << k)
                .map(|code| {
                    let m = BlockMask::new(1, k, 1, mask_from_index(code, k)).unwrap();
                    log_prob(&probs, &m).unwrap()[0].exp()
                })
                .sum();
            assert!((total - 1.0).abs() < 1e-9, "k={k}: {total}");
        }
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = random_params(&mut rng, 3, 4, 1.0);
        let s = Matrix::from_fn(5, 4, |_, _| rng.random_range(-1.0..1.0));
        let probs = compute_probs(&p, &s).unwrap();
        let mask = sample_mask(&probs, 1, &mut rng);
        let g = grad_log_prob(&p, &s, &PolicySample { probs, mask }, &[0.0; 5]).unwrap();
        assert_eq!(
            g.z.sum_squares() + g.d.iter().map(|x| x * x).sum::<f64>(),
            0.0
        );
    }

    #[test]
    fn bias_gradient_closed_form_at_half() {
        let p = PolicyParams::zeros(3, 2);
        let s = Matrix::zeros(1, 2);
        let probs = compute_probs(&p, &s).unwrap();
        let mask = BlockMask::from_rows(&[vec![1, 0, 1]], 1).unwrap();
        let w = 2.5;
        let g = grad_log_prob(&p, &s, &PolicySample { probs, mask }, &[w]).unwrap();
        assert_eq!(g.d, vec![w * 0.5, w * -0.5, w * 0.5]);
    }

    #[test]
    fn gradient_rejects_wrong_weight_count() {
        let p = PolicyParams::zeros(2, 2);
        let s = Matrix::zeros(3, 2);
        let probs = compute_probs(&p, &s).unwrap();
        let mask = BlockMask::ones(3, 2, 1);
        assert!(grad_log_prob(&p, &s, &PolicySample { probs, mask }, &[1.0; 2]).is_err());
    }

    fn weighted_mean_log_prob(p: &PolicyParams, s: &Matrix, mask: &BlockMask, w: &[f64]) -> f64 {
        let probs = compute_probs(p, s).unwrap();
        let lp = log_prob(&probs, mask).unwrap();
        lp.iter().zip(w).map(|(l, w)| l * w).sum::<f64>() / s.rows() as f64
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_params(&mut rng, 3, 4, 0.8);
        let s = Matrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0));
        let probs = compute_probs(&p, &s).unwrap();
        let mask = sample_mask(&probs, 2, &mut rng);
        let w: Vec<f64> = (0..6).map(|_| rng.random_range(0.1..2.0)).collect();
        let g = grad_log_prob(
            &p,
            &s,
            &PolicySample {
                probs,
                mask: mask.clone(),
            },
            &w,
        )
        .unwrap();
        let h = 1e-6;
        for j in 0..3 {
            for q in 0..4 {
                let mut plus = p.clone();
                plus.z.set(j, q, p.z.get(j, q) + h);
                let mut minus = p.clone();
                minus.z.set(j, q, p.z.get(j, q) - h);
                let fd = (weighted_mean_log_prob(&plus, &s, &mask, &w)
                    - weighted_mean_log_prob(&minus, &s, &mask, &w))
                    / (2.0 * h);
                assert!(rel_err(g.z.get(j, q), fd) < 1e-6, "Z[{j},{q}]");
            }
            let mut plus = p.clone();
            plus.d[j] += h;
            let mut minus = p.clone();
            minus.d[j] -= h;
            let fd = (weighted_mean_log_prob(&plus, &s, &mask, &w)
                - weighted_mean_log_prob(&minus, &s, &mask, &w))
                / (2.0 * h);
            assert!(rel_err(g.d[j], fd) < 1e-6, "d[{j}]");
        }
    }

    #[test]
    fn score_has_zero_mean_by_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = 8;
        let p = random_params(&mut rng, k, 3, 1.0);
        let s = Matrix::from_fn(1, 3, |_, _| rng.random_range(-1.0..1.0));
        let probs = compute_probs(&p, &s).unwrap();
        let mut acc = PolicyParams::zeros(k, 3);
        for code in 0..1usize << k {
            let mask = BlockMask::new(1, k, 1, mask_from_index(code, k)).unwrap();
            let pi = log_prob(&probs, &mask).unwrap()[0].exp();
            let g = grad_log_prob(
                &p,
                &s,
                &PolicySample {
                    probs: probs.clone(),
                    mask,
                },
                &[1.0],
            )
            .unwrap();
            acc.axpy(pi, &g);
        }
        assert!(acc.z.as_slice().iter().all(|x| x.abs() < 1e-9));
        assert!(acc.d.iter().all(|x| x.abs() < 1e-9));
    }

    #[test]
    fn score_has_zero_mean_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let k = 20;
        let p = random_params(&mut rng, k, 1, 1.5);
        let s = Matrix::filled(1, 1, 0.5);
        let probs = compute_probs(&p, &s).unwrap();
        let n = 20_000;
        // Score of d_j is u_j − σ_j with variance σ_j(1 − σ_j); 4σ covers the
        // union over all blocks.
        let mut sums = vec![0.0; k];
        for _ in 0..n {
            let mask = sample_mask(&probs, 1, &mut rng);
            let g = grad_log_prob(
                &p,
                &s,
                &PolicySample {
                    probs: probs.clone(),
                    mask,
                },
                &[1.0],
            )
            .unwrap();
            for (a, b) in sums.iter_mut().zip(&g.d) {
                *a += b;
            }
        }
        for j in 0..k {
            let sig = probs.get(0, j);
            let sd = (sig * (1.0 - sig) / n as f64).sqrt();
            assert!((sums[j] / n as f64).abs() < 4.0 * sd, "block {j}");
        }
    }
}
