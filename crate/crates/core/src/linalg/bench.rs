use std::hint::black_box;
use std::time::Instant;

use rand::Rng;

use super::{masked_matmul, matmul, BlockMask, Matrix};
use crate::error::{Error, Result};

pub const BENCH_CSV_HEADER: &str = "rows,inner,cols,block_size,sparsity,dense_ns,sparse_ns,speedup";

pub const MIN_TRIALS: usize = 5;

/// One line of the kernel benchmark report.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub rows: usize,
    pub inner: usize,
    pub cols: usize,
    pub block_size: usize,
    pub sparsity: f64,
    pub dense_ns: u64,
    pub sparse_ns: u64,
    pub speedup: f64,
}

impl BenchRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.4}",
            self.rows,
            self.inner,
            self.cols,
            self.block_size,
            self.sparsity,
            self.dense_ns,
            self.sparse_ns,
            self.speedup
        )
    }
}

/// The unoptimized reference: expand both masks, multiply elementwise and
/// run the full dense product.
pub fn dense_masked_matmul(
    h: &Matrix,
    w: &Matrix,
    m_h: &BlockMask,
    m_o: &BlockMask,
) -> Result<Matrix> {
    let mut hm = h.clone();
    let eh = m_h.expand();
    if eh.shape() != hm.shape() {
        return Err(Error::shape(
            "dense_masked_matmul",
            format!("input mask {:?} vs h {:?}", eh.shape(), hm.shape()),
        ));
    }
    hm.hadamard_inplace(&eh);
    let mut out = matmul(&hm, w)?;
    let eo = m_o.expand();
    if eo.shape() != out.shape() {
        return Err(Error::shape(
            "dense_masked_matmul",
            format!("output mask {:?} vs product {:?}", eo.shape(), out.shape()),
        ));
    }
    out.hadamard_inplace(&eo);
    Ok(out)
}

fn median(mut xs: Vec<u64>) -> u64 {
    xs.sort_unstable();
    xs[xs.len() / 2]
}

/// Times the dense reference against [`masked_matmul`] on random data.
///
/// Both masks are drawn i.i.d. per block with activation probability
/// `sparsity`. One warm-up round is discarded; the report holds the median
/// of `trials` timed rounds. Runs on the calling thread only.
pub fn bench_masked_matmul<R: Rng>(
    rows: usize,
    inner: usize,
    cols: usize,
    block_size: usize,
    sparsity: f64,
    trials: usize,
    rng: &mut R,
) -> Result<BenchRow> {
    if !(sparsity > 0.0 && sparsity <= 1.0) {
        return Err(Error::InvalidValue(format!(
            "sparsity must be in (0, 1], got {sparsity}"
        )));
    }
    if block_size == 0 || !inner.is_multiple_of(block_size) || !cols.is_multiple_of(block_size) {
        return Err(Error::InvalidValue(format!(
            "block size {block_size} must divide inner ({inner}) and cols ({cols})"
        )));
    }
    let trials = trials.max(MIN_TRIALS);
    let h = Matrix::from_fn(rows, inner, |_, _| rng.random_range(-1.0..1.0));
    let w = Matrix::from_fn(inner, cols, |_, _| rng.random_range(-1.0..1.0));
    let mut draw = |nb: usize| {
        let bits = (0..rows * nb)
            .map(|_| (rng.random::<f64>() < sparsity) as u8)
            .collect();
        BlockMask::new(rows, nb, block_size, bits)
    };
    let m_h = draw(inner / block_size)?;
    let m_o = draw(cols / block_size)?;

    let mut dense = Vec::with_capacity(trials);
    let mut sparse = Vec::with_capacity(trials);
    for t in 0..=trials {
        let start = Instant::now();
        black_box(dense_masked_matmul(
            black_box(&h),
            black_box(&w),
            &m_h,
            &m_o,
        )?);
        let d = start.elapsed().as_nanos() as u64;
        let start = Instant::now();
        black_box(masked_matmul(black_box(&h), black_box(&w), &m_h, &m_o)?);
        let s = start.elapsed().as_nanos() as u64;
        if t > 0 {
            dense.push(d);
            sparse.push(s);
        }
    }
    let dense_ns = median(dense);
    let sparse_ns = median(sparse).max(1);
    Ok(BenchRow {
        rows,
        inner,
        cols,
        block_size,
        sparsity,
        dense_ns,
        sparse_ns,
        speedup: dense_ns as f64 / sparse_ns as f64,
    })
}
