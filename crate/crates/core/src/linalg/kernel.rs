use std::ops::Range;

use super::{BlockMask, Matrix};
use crate::error::{Error, Result};

// Cache tiles for the dense product. Tiling splits the inner dimension into
// consecutive chunks, so each output entry still sums over k in ascending order.
const TILE_K: usize = 128;
const TILE_N: usize = 512;

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    gemm(a.as_slice(), b.as_slice(), &mut out, m, k, n);
    Ok(Matrix::from_raw(m, n, out))
}

/// `aᵀ · b`
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::shape(
            "matmul_tn",
            format!("{:?}ᵀ x {:?}", a.shape(), b.shape()),
        ));
    }
    matmul(&a.transpose(), b)
}

/// `a · bᵀ`
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::shape(
            "matmul_nt",
            format!("{:?} x {:?}ᵀ", a.shape(), b.shape()),
        ));
    }
    matmul(a, &b.transpose())
}

fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for j0 in (0..n).step_by(TILE_N) {
        let j1 = (j0 + TILE_N).min(n);
        for p0 in (0..k).step_by(TILE_K) {
            let p1 = (p0 + TILE_K).min(k);
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                let crow = &mut c[i * n + j0..i * n + j1];
                for p in p0..p1 {
                    let av = arow[p];
                    let brow = &b[p * n + j0..p * n + j1];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
    }
}

fn check_masks(
    op: &'static str,
    rows: usize,
    in_width: usize,
    out_width: usize,
    m_in: &BlockMask,
    m_out: &BlockMask,
) -> Result<()> {
    if m_in.examples() != rows || m_out.examples() != rows {
        return Err(Error::shape(
            op,
            format!(
                "mask examples {} / {} vs {rows} rows",
                m_in.examples(),
                m_out.examples()
            ),
        ));
    }
    if m_in.unit_width() != in_width {
        return Err(Error::shape(
            op,
            format!(
                "input mask covers {} units ({} blocks of {}), matrix has {in_width}",
                m_in.unit_width(),
                m_in.n_blocks(),
                m_in.block_size()
            ),
        ));
    }
    if m_out.unit_width() != out_width {
        return Err(Error::shape(
            op,
            format!(
                "output mask covers {} units ({} blocks of {}), matrix has {out_width}",
                m_out.unit_width(),
                m_out.n_blocks(),
                m_out.block_size()
            ),
        ));
    }
    Ok(())
}

/// `((h ⊗ M_H) · w) ⊗ M_O` computed only over active blocks.
///
/// For each example row the active input blocks of `m_h` and the active
/// output blocks of `m_o` are collected first; the product then touches only
/// those rows of `w` and those output columns. Inactive output columns are
/// exactly `0.0`.
pub fn masked_matmul(h: &Matrix, w: &Matrix, m_h: &BlockMask, m_o: &BlockMask) -> Result<Matrix> {
    if h.cols() != w.rows() {
        return Err(Error::shape(
            "masked_matmul",
            format!("{:?} x {:?}", h.shape(), w.shape()),
        ));
    }
    check_masks("masked_matmul", h.rows(), h.cols(), w.cols(), m_h, m_o)?;
    let (m, n) = (h.rows(), w.cols());
    let wd = w.as_slice();
    let mut out = vec![0.0; m * n];
    let mut in_runs: Vec<Range<usize>> = Vec::with_capacity(m_h.n_blocks());
    let mut out_runs: Vec<Range<usize>> = Vec::with_capacity(m_o.n_blocks());
    for i in 0..m {
        m_o.active_runs(i, &mut out_runs);
        if out_runs.is_empty() {
            continue;
        }
        m_h.active_runs(i, &mut in_runs);
        let hrow = h.row(i);
        let crow = &mut out[i * n..(i + 1) * n];
        for r in &in_runs {
            for p in r.clone() {
                let hv = hrow[p];
                let wrow = &wd[p * n..(p + 1) * n];
                for o in &out_runs {
                    for (cv, &wv) in crow[o.clone()].iter_mut().zip(&wrow[o.clone()]) {
                        *cv += hv * wv;
                    }
                }
            }
        }
    }
    Ok(Matrix::from_raw(m, n, out))
}

/// Weight gradient of a masked product: `(h ⊗ M_H)ᵀ · (g ⊗ M_O)`.
///
/// `h` is `m × k`, `g` is `m × n`; the result is `k × n`, summed over
/// examples in ascending order. Zero entries of `h` are skipped, which only
/// affects the sign of exact zeros in the result.
pub fn masked_matmul_tn(
    h: &Matrix,
    g: &Matrix,
    m_h: &BlockMask,
    m_o: &BlockMask,
) -> Result<Matrix> {
    if h.rows() != g.rows() {
        return Err(Error::shape(
            "masked_matmul_tn",
            format!("{:?}ᵀ x {:?}", h.shape(), g.shape()),
        ));
    }
    check_masks("masked_matmul_tn", h.rows(), h.cols(), g.cols(), m_h, m_o)?;
    let (m, k, n) = (h.rows(), h.cols(), g.cols());
    let mut out = vec![0.0; k * n];
    let mut in_runs = Vec::with_capacity(m_h.n_blocks());
    let mut out_runs = Vec::with_capacity(m_o.n_blocks());
    for i in 0..m {
        m_o.active_runs(i, &mut out_runs);
        if out_runs.is_empty() {
            continue;
        }
        m_h.active_runs(i, &mut in_runs);
        let hrow = h.row(i);
        let grow = g.row(i);
        for r in &in_runs {
            for p in r.clone() {
                let hv = hrow[p];
                if hv == 0.0 {
                    continue;
                }
                let orow = &mut out[p * n..(p + 1) * n];
                for o in &out_runs {
                    for (cv, &gv) in orow[o.clone()].iter_mut().zip(&grow[o.clone()]) {
                        *cv += hv * gv;
                    }
                }
            }
        }
    }
    Ok(Matrix::from_raw(k, n, out))
}

/// Input gradient of a masked product: `((g ⊗ M_O) · wᵀ) ⊗ M_H`.
///
/// `g` is `m × n`, `w` is `k × n`; the result is `m × k` with zeros outside
/// the active blocks of `m_h`.
pub fn masked_matmul_nt(
    g: &Matrix,
    w: &Matrix,
    m_o: &BlockMask,
    m_h: &BlockMask,
) -> Result<Matrix> {
    if g.cols() != w.cols() {
        return Err(Error::shape(
            "masked_matmul_nt",
            format!("{:?} x {:?}ᵀ", g.shape(), w.shape()),
        ));
    }
    check_masks("masked_matmul_nt", g.rows(), g.cols(), w.rows(), m_o, m_h)?;
    let wt = w.transpose();
    masked_matmul(g, &wt, m_o, m_h)
}
