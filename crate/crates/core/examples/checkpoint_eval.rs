//! Saves a model with its EMA shadow, reloads it, and evaluates it.

use sapo::cli::{evaluate_checkpoint, Checkpoint};
use sapo::corpus::{generate_dataset, TaskSpec};
use sapo::ema::{EmaConfig, EmaState};
use sapo::model::ModelSpec;

fn main() -> sapo::Result<()> {
    let data = generate_dataset(&TaskSpec {
        vocab_size: 8,
        prompt_len: 4,
        response_len: 4,
        count: 50,
        ..TaskSpec::default()
    })?;
    let model = ModelSpec::feedforward(8, 4, 4, 16).build(1)?;
    let ema = EmaState::new(model.params(), EmaConfig::default())?;

    let path = std::env::temp_dir().join("sapo-example.ckpt");
    let ck = Checkpoint::from_model(model.as_ref(), Some(ema.shadow()))?;
    ck.save(&path)?;
    let back = Checkpoint::load(&path)?;
    assert_eq!(back.to_bytes()?, std::fs::read(&path).expect("checkpoint exists"));
    println!("{}", serde_json::to_string_pretty(&back.header)?);

    let report = evaluate_checkpoint(&back, &data, 2024)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
