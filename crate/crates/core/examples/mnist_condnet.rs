//! The MNIST conditional network next to the two dense baselines.
//!
//! Needs the IDX files under `$CONDNET_DATA/mnist` (see
//! `scripts/fetch_mnist.sh`). Takes several minutes in release mode.
//!
//! ```sh
//! cargo run --release --example mnist_condnet
//! ```

use std::path::Path;

use condnet::cli;
use condnet::config::RunConfig;

fn main() -> condnet::Result<()> {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["mnist_condnet", "mnist_dense256", "mnist_dense32"] {
        let mut cfg = RunConfig::from_file(&configs.join(format!("{name}.json")))?;
        cfg.out_dir = Path::new("runs").join(name);
        println!("== {name}");
        let (err, rate, ms) = cli::cmd_train(&cfg)?;
        println!(
            "{name}: test error {:.2}%, activation rate {rate:.3}, {ms:.0} ms/epoch",
            100.0 * err
        );
    }
    Ok(())
}
