//! Sparsity and variance penalties on block activation probabilities.
//!
//! All three act on the `m_b × n` matrix `σ` of a minibatch (one column per
//! block) and return their value together with `∂/∂σ`:
//!
//! * `L_b = Σ_j ‖mean_i σ_ij − τ‖`: every block active at rate `τ` over the batch.
//! * `L_e = mean_i ‖mean_j σ_ij − τ‖`: every example activating a `τ` fraction.
//! * `L_v = −Σ_j var_i σ_ij` (population variance): rewards blocks whose
//!   probability varies across examples.
//!
//! `‖·‖` of a scalar is the absolute value by default; [`PenaltyNorm::Squared`]
//! swaps in the square.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyNorm {
    #[default]
    Abs,
    Squared,
}

impl PenaltyNorm {
    #[inline]
    fn value(self, x: f64) -> f64 {
        match self {
            PenaltyNorm::Abs => x.abs(),
            PenaltyNorm::Squared => x * x,
        }
    }

    /// Derivative; the absolute value uses subgradient 0 at the kink.
    #[inline]
    fn slope(self, x: f64) -> f64 {
        match self {
            PenaltyNorm::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            PenaltyNorm::Squared => 2.0 * x,
        }
    }
}

/// A penalty value and its gradient with respect to `σ`.
#[derive(Clone, Debug)]
pub struct Penalty {
    pub value: f64,
    pub grad: Matrix,
}

fn col_means(sigma: &Matrix) -> Vec<f64> {
    let m = sigma.rows() as f64;
    sigma.col_sums().into_iter().map(|s| s / m).collect()
}

pub fn l_b(sigma: &Matrix, tau: f64, norm: PenaltyNorm) -> Penalty {
    let (m, n) = sigma.shape();
    let means = col_means(sigma);
    let value = means.iter().map(|&mu| norm.value(mu - tau)).sum();
    let col_grad: Vec<f64> = means
        .iter()
        .map(|&mu| norm.slope(mu - tau) / m as f64)
        .collect();
    let grad = Matrix::from_fn(m, n, |_, j| col_grad[j]);
    Penalty { value, grad }
}

pub fn l_e(sigma: &Matrix, tau: f64, norm: PenaltyNorm) -> Penalty {
    let (m, n) = sigma.shape();
    let mut value = 0.0;
    let mut row_grad = Vec::with_capacity(m);
    for i in 0..m {
        let r = sigma.row(i).iter().sum::<f64>() / n as f64 - tau;
        value += norm.value(r);
        row_grad.push(norm.slope(r) / (m as f64 * n as f64));
    }
    Penalty {
        value: value / m as f64,
        grad: Matrix::from_fn(m, n, |i, _| row_grad[i]),
    }
}

/// Needs at least two examples.
pub fn l_v(sigma: &Matrix) -> Result<Penalty> {
    let (m, n) = sigma.shape();
    if m < 2 {
        return Err(Error::InvalidValue(format!(
            "variance penalty needs a minibatch of at least 2, got {m}"
        )));
    }
    let means = col_means(sigma);
    let mut var = vec![0.0; n];
    for i in 0..m {
        for ((v, &x), &mu) in var.iter_mut().zip(sigma.row(i)).zip(&means) {
            *v += (x - mu) * (x - mu);
        }
    }
    let value = -var.iter().map(|v| v / m as f64).sum::<f64>();
    let grad = Matrix::from_fn(m, n, |i, j| -2.0 / m as f64 * (sigma.get(i, j) - means[j]));
    Ok(Penalty { value, grad })
}

/// All three penalties for one layer.
#[derive(Clone, Debug)]
pub struct RegularizerTerms {
    pub l_b: Penalty,
    pub l_e: Penalty,
    pub l_v: Penalty,
}

impl RegularizerTerms {
    pub fn evaluate(sigma: &Matrix, tau: f64, norm: PenaltyNorm) -> Result<Self> {
        Ok(RegularizerTerms {
            l_b: l_b(sigma, tau, norm),
            l_e: l_e(sigma, tau, norm),
            l_v: l_v(sigma)?,
        })
    }

    /// `λ_s (L_b + L_e) + λ_v L_v`
    pub fn weighted_value(&self, lambda_s: f64, lambda_v: f64) -> f64 {
        lambda_s * (self.l_b.value + self.l_e.value) + lambda_v * self.l_v.value
    }

    /// Gradient of [`Self::weighted_value`] with respect to `σ`.
    pub fn weighted_grad(&self, lambda_s: f64, lambda_v: f64) -> Matrix {
        let mut g = Matrix::zeros(self.l_b.grad.rows(), self.l_b.grad.cols());
        g.axpy(lambda_s, &self.l_b.grad);
        g.axpy(lambda_s, &self.l_e.grad);
        g.axpy(lambda_v, &self.l_v.grad);
        g
    }
}
