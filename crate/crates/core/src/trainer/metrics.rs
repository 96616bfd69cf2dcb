use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Result, SapoError};

/// Column order of the metrics CSV.
pub const CSV_HEADER: &str = "step,stage,loss_total,loss_sft,loss_contrastive,margin,grad_norm,pref_margin_mean,buffer_size,buffer_mean_count,eval_acc";

/// One row per iteration (SAPO / on-policy) or optimizer step (epoch loops).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub stage: &'static str,
    pub loss_total: Option<f64>,
    pub loss_sft: Option<f64>,
    pub loss_contrastive: Option<f64>,
    pub margin: Option<f64>,
    pub grad_norm: Option<f64>,
    pub pref_margin_mean: Option<f64>,
    pub buffer_size: Option<usize>,
    pub buffer_mean_count: Option<f64>,
    pub eval_acc: Option<f64>,
    /// Tuples pushed during the sampling stage.
    #[serde(skip)]
    pub generated: usize,
    /// Sampling-stage tuples dropped because y⁻ = y⁺.
    #[serde(skip)]
    pub skipped: usize,
    /// Hash of the reference parameters after the step (DPO runs).
    #[serde(skip)]
    pub reference_hash: Option<String>,
}

impl StepMetrics {
    pub(crate) fn new(step: usize, stage: &'static str) -> Self {
        Self {
            step,
            stage,
            loss_total: None,
            loss_sft: None,
            loss_contrastive: None,
            margin: None,
            grad_norm: None,
            pref_margin_mean: None,
            buffer_size: None,
            buffer_mean_count: None,
            eval_acc: None,
            generated: 0,
            skipped: 0,
            reference_hash: None,
        }
    }
}

/// The metrics CSV as bytes.
pub fn metrics_csv(rows: &[StepMetrics]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(CSV_HEADER.split(','))?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner()
        .map_err(|e| SapoError::io("<metrics>", e.into_error()))
}

pub fn write_metrics_csv(path: &Path, rows: &[StepMetrics]) -> Result<()> {
    std::fs::write(path, metrics_csv(rows)?).map_err(|e| SapoError::io(path, e))
}

/// SHA-256 over the little-endian bytes of a parameter vector, hex encoded.
pub fn param_hash(params: &[f64]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn bytes_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
