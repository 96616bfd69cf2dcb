//! Side-by-side runs of the four training paradigms from one warm start.

use serde::Serialize;

use super::RunConfig;
use crate::corpus::evaluate_preference_accuracy;
use crate::error::{Result, SapoError};
use crate::trainer::{self, bytes_hash, metrics_csv, param_hash, Paradigm, TrainerConfig};

pub const PARADIGMS: [Paradigm; 4] = [Paradigm::Sapo, Paradigm::OnPolicy, Paradigm::Spin, Paradigm::OfflinePaired];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParadigmRow {
    pub paradigm: Paradigm,
    pub optimizer_steps: usize,
    pub final_pref_acc: f64,
    pub param_hash: String,
    pub metrics_hash: String,
}

/// Trainer settings giving `paradigm` a budget of `steps` optimizer steps:
/// `steps` iterations for the online loops, whole epochs over
/// `n_examples` for the offline ones (two outer iterations for SPIN).
pub fn budgeted(base: &TrainerConfig, paradigm: Paradigm, steps: usize, n_examples: usize) -> TrainerConfig {
    let per_epoch = n_examples.div_ceil(base.training_batch).max(1);
    let mut cfg = base.clone();
    cfg.paradigm = paradigm;
    cfg.steps_per_sample = 1;
    match paradigm {
        Paradigm::Sapo | Paradigm::OnPolicy => cfg.iterations = steps,
        Paradigm::Spin => {
            cfg.spin_iters = 2;
            cfg.spin_epochs_per_iter = steps.div_ceil(2 * per_epoch).max(1);
        }
        Paradigm::OfflinePaired => cfg.epochs = steps.div_ceil(per_epoch).max(1),
    }
    cfg
}

/// SFT warm start from `cfg.sft`, then each paradigm for `cfg.trainer.iterations`
/// optimizer steps. The dataset must be paired.
pub fn compare_paradigms(cfg: &RunConfig) -> Result<Vec<ParadigmRow>> {
    let dataset = cfg.dataset()?;
    if dataset.iter().any(|ex| ex.rejected.is_none()) {
        return Err(SapoError::Config("paradigm comparison needs a paired dataset".into()));
    }
    let mut warm = cfg.initial_policy()?;
    trainer::run_sft(&cfg.sft, cfg.seed, &dataset, warm.as_mut())?;
    let steps = cfg.trainer.iterations;
    let eval_set = &dataset[..cfg.trainer.eval_size.unwrap_or(dataset.len()).min(dataset.len())];

    let mut rows = Vec::with_capacity(PARADIGMS.len());
    for paradigm in PARADIGMS {
        let tcfg = budgeted(&cfg.trainer, paradigm, steps, dataset.len());
        let mut policy = warm.clone_frozen();
        let out = trainer::train_quiet(&tcfg, &dataset, policy.as_mut())?;
        rows.push(ParadigmRow {
            paradigm,
            optimizer_steps: out.metrics.iter().filter(|r| r.loss_total.is_some()).count(),
            final_pref_acc: evaluate_preference_accuracy(policy.as_ref(), eval_set, cfg.trainer.eval_seed)?,
            param_hash: param_hash(policy.params()),
            metrics_hash: bytes_hash(&metrics_csv(&out.metrics)?),
        });
    }
    Ok(rows)
}

/// Markdown table of a comparison.
pub fn format_table(rows: &[ParadigmRow]) -> String {
    let mut out = String::from("| paradigm | steps | final pref_acc | params sha256 |\n|---|---:|---:|---|\n");
    for r in rows {
        let name = serde_json::to_value(r.paradigm)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default();
        out.push_str(&format!(
            "| {name} | {} | {:.3} | {} |\n",
            r.optimizer_steps,
            r.final_pref_acc,
            &r.param_hash[..16]
        ));
    }
    out
}
