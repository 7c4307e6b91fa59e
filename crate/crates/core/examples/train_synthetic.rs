//! End-to-end training on Gaussian blobs, printing the per-epoch metrics.

use condnet::config::RunConfig;
use condnet::trainer::{self, Model};

const CONFIG: &str = r#"{
  "dataset": {"kind": "synthetic", "n_classes": 4, "n_features": 16, "n_train": 2000,
              "n_valid": 400, "n_test": 400, "separation": 6.0, "seed": 3},
  "model": {"layers": [{"n_blocks": 8, "block_size": 4}]},
  "hyper": {"alpha": 0.01, "alpha_pi": 1e-3, "lambda_s": 2, "lambda_v": 2,
            "lambda_l2": 1e-4, "tau": 0.25, "batch_size": 16, "max_epochs": 10, "seed": 1}
}"#;

fn main() -> condnet::Result<()> {
    let cfg = RunConfig::from_json(CONFIG)?;
    let splits = cfg.dataset.load()?;
    let model = Model::init(
        &cfg.architecture(),
        &cfg.model.gating,
        &cfg.hyper,
        &mut trainer::init_rng(cfg.hyper.seed),
    )?;
    let mut stdout = std::io::stdout();
    let out = trainer::train(model, &splits, &cfg.hyper, Some(&mut stdout))?;
    println!(
        "best epoch {}, test error {:.4}, activation rate {:.3}",
        out.best_epoch, out.test.error, out.test.sparsity[0]
    );
    Ok(())
}
