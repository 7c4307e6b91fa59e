//! Saves a freshly initialised model and loads it back.

use std::collections::BTreeMap;

use condnet::checkpoint::Checkpoint;
use condnet::network::{Activation, Architecture, LayerShape};
use condnet::trainer::{self, GateKind, Hyperparams, Model};

fn main() -> condnet::Result<()> {
    let arch = Architecture {
        n_inputs: 784,
        n_classes: 10,
        layers: vec![LayerShape {
            n_blocks: 16,
            block_size: 16,
        }],
        activation: Activation::Tanh,
    };
    let hyper = Hyperparams::default();
    let model = Model::init(
        &arch,
        &GateKind::Condnet,
        &hyper,
        &mut trainer::init_rng(hyper.seed),
    )?;
    let ckpt = Checkpoint {
        model,
        hyper,
        seed: 1,
        meta: BTreeMap::from([("note".into(), "example".into())]),
    };
    let path = std::env::temp_dir().join("condnet-example.ckpt");
    ckpt.save(&path)?;
    let back = Checkpoint::load(&path)?;
    println!(
        "{} bytes, {} parameters, identical: {}",
        std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0),
        back.model.flat_params().len(),
        back == ckpt
    );
    std::fs::remove_file(&path).ok();
    Ok(())
}
