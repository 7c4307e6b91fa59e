//! Trains a small gated network and shows how its block probabilities
//! differ between classes.

use condnet::cli::inspect_policy;
use condnet::config::RunConfig;
use condnet::trainer::{self, Model};

const CONFIG: &str = r#"{
  "dataset": {"kind": "synthetic", "n_classes": 3, "n_features": 8, "n_train": 1500,
              "n_valid": 300, "n_test": 300, "separation": 6.0, "seed": 5},
  "model": {"layers": [{"n_blocks": 6, "block_size": 4}]},
  "hyper": {"alpha": 0.01, "alpha_pi": 1e-2, "lambda_s": 1, "lambda_v": 5,
            "tau": 0.33, "batch_size": 16, "max_epochs": 15, "seed": 2}
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
    let out = trainer::train(model, &splits, &cfg.hyper, None)?;
    println!("test error {:.3}", out.test.error);
    let dump = inspect_policy(&out.model, &splits.test, None, None, cfg.hyper.seed)?;
    for c in 0..3 {
        let means = dump[0].class_mean(c).unwrap_or_default();
        let bars: Vec<String> = means.iter().map(|m| format!("{m:.2}")).collect();
        println!("class {c}: mean sigma per block [{}]", bars.join(" "));
    }
    Ok(())
}
