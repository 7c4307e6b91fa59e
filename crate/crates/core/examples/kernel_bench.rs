//! Block-sparse product against the dense reference at several activation
//! rates.
//!
//! ```sh
//! cargo run --release --example kernel_bench -- 512
//! ```

use condnet::linalg::{bench_masked_matmul, BENCH_CSV_HEADER};
use condnet::trainer::stream_rng;

fn main() -> condnet::Result<()> {
    let n: usize = std::env::args()
        .nth(1)
        .map_or(512, |s| s.parse().expect("size"));
    let mut rng = stream_rng(0, 0);
    println!("{BENCH_CSV_HEADER}");
    for sparsity in [0.0625, 0.125, 0.25, 0.5, 1.0] {
        let row = bench_masked_matmul(n, n, n, 64, sparsity, 5, &mut rng)?;
        println!("{}", row.csv());
    }
    Ok(())
}
