use std::ops::Range;

use super::Matrix;
use crate::error::{Error, Result};

/// Per-example binary block pattern.
///
/// Row `i` holds one bit per block; a set bit activates `block_size`
/// contiguous units. The unit-level width is `n_blocks * block_size`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockMask {
    examples: usize,
    n_blocks: usize,
    block_size: usize,
    bits: Vec<u8>,
}

impl BlockMask {
    pub fn new(examples: usize, n_blocks: usize, block_size: usize, bits: Vec<u8>) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::InvalidValue("block_size must be >= 1".into()));
        }
        if bits.len() != examples * n_blocks {
            return Err(Error::shape(
                "BlockMask::new",
                format!(
                    "{examples}x{n_blocks} needs {} bits, got {}",
                    examples * n_blocks,
                    bits.len()
                ),
            ));
        }
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::InvalidValue(format!("mask bit {b} is not 0 or 1")));
        }
        Ok(BlockMask {
            examples,
            n_blocks,
            block_size,
            bits,
        })
    }

    pub fn from_rows(rows: &[Vec<u8>], block_size: usize) -> Result<Self> {
        let n_blocks = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_blocks) {
            return Err(Error::shape("BlockMask::from_rows", "ragged rows"));
        }
        BlockMask::new(rows.len(), n_blocks, block_size, rows.concat())
    }

    pub fn ones(examples: usize, n_blocks: usize, block_size: usize) -> Self {
        BlockMask {
            examples,
            n_blocks,
            block_size: block_size.max(1),
            bits: vec![1; examples * n_blocks],
        }
    }

    pub fn zeros(examples: usize, n_blocks: usize, block_size: usize) -> Self {
        BlockMask {
            examples,
            n_blocks,
            block_size: block_size.max(1),
            bits: vec![0; examples * n_blocks],
        }
    }

    #[inline]
    pub fn examples(&self) -> usize {
        self.examples
    }

    #[inline]
    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    #[inline]
    pub fn block_size(&self) -> usize {
        self.block_size
    }

    #[inline]
    pub fn unit_width(&self) -> usize {
        self.n_blocks * self.block_size
    }

    #[inline]
    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n_blocks + j] == 1
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[u8] {
        &self.bits[i * self.n_blocks..(i + 1) * self.n_blocks]
    }

    /// Whether unit `u` (not block) of example `i` is active.
    #[inline]
    pub fn unit_active(&self, i: usize, u: usize) -> bool {
        self.get(i, u / self.block_size)
    }

    pub fn count_active(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    /// Fraction of active blocks over the whole mask.
    pub fn active_fraction(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.count_active() as f64 / self.bits.len() as f64
    }

    pub fn is_all_ones(&self) -> bool {
        self.bits.iter().all(|&b| b == 1)
    }

    /// Appends the unit ranges of example `i`'s active blocks to `out`,
    /// merging adjacent active blocks into one range.
    pub(crate) fn active_runs(&self, i: usize, out: &mut Vec<Range<usize>>) {
        out.clear();
        let bs = self.block_size;
        let mut start: Option<usize> = None;
        for (j, &b) in self.row(i).iter().enumerate() {
            match (b, start) {
                (1, None) => start = Some(j),
                (0, Some(s)) => {
                    out.push(s * bs..j * bs);
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            out.push(s * bs..self.n_blocks * bs);
        }
    }

    /// Unit-level 0/1 matrix, each block bit repeated `block_size` times.
    pub fn expand(&self) -> Matrix {
        let width = self.unit_width();
        let mut data = Vec::with_capacity(self.examples * width);
        for i in 0..self.examples {
            for &b in self.row(i) {
                data.extend(std::iter::repeat_n(b as f64, self.block_size));
            }
        }
        Matrix::from_raw(self.examples, width, data)
    }
}

/// Expands a block mask to its unit-level binary matrix.
pub fn expand_mask(m: &BlockMask) -> Matrix {
    m.expand()
}
