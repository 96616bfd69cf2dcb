//! SFT warm start followed by SAPO-ORPO on the copy task, driven by a run
//! configuration file. Prints the accuracy curve and the margin summary.
//!
//! cargo run --release --example sapo_copy_task -- [config.json]

use std::path::PathBuf;

use sapo::cli::RunConfig;
use sapo::corpus::evaluate_preference_accuracy;
use sapo::trainer::{run_sft, train_quiet};

fn main() -> sapo::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/copy_sapo_orpo.json")));
    let cfg = RunConfig::load(&path)?;
    let data = cfg.dataset()?;
    let mut policy = cfg.initial_policy()?;

    run_sft(&cfg.sft, cfg.seed, &data, policy.as_mut())?;
    let start = evaluate_preference_accuracy(policy.as_ref(), &data, cfg.trainer.eval_seed)?;
    println!("after SFT: pref_acc {start:.3}");

    let out = train_quiet(&cfg.trainer, &data, policy.as_mut())?;
    for row in out.metrics.iter().filter(|r| r.eval_acc.is_some()) {
        println!(
            "iter {:>4}  loss {:.4}  pref_margin {:>8.3}  buffer {:>4}  pref_acc {:.3}",
            row.step,
            row.loss_total.unwrap_or(f64::NAN),
            row.pref_margin_mean.unwrap_or(f64::NAN),
            row.buffer_size.unwrap_or(0),
            row.eval_acc.unwrap_or(f64::NAN)
        );
    }
    let tail = &out.metrics[out.metrics.len().saturating_sub(50)..];
    let margin = tail.iter().filter_map(|r| r.pref_margin_mean).sum::<f64>() / tail.len().max(1) as f64;
    println!("mean preference margin over the last {} iterations: {margin:.3}", tail.len());
    Ok(())
}
