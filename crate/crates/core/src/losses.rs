//! DPO and ORPO objectives.
//!
//! Both losses are built on a [`Tape`] so the same code produces values and
//! gradients. The `f64` entry points ([`dpo_loss`], [`orpo_loss`]) wrap the
//! tape versions with constant inputs.
//!
//! DPO compares summed log-probabilities against a detached reference
//! model. ORPO plugs the length-normalized log-probability into the odds
//! `p / (1 - p)` by default; [`OrpoProb::Product`] uses the summed
//! log-probability (the whole-sequence product) instead.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::corpus::{PreferenceTuple, TokenSeq};
use crate::error::{ensure_finite, Result, SapoError};
use crate::math;
use crate::model::{score_on_tape, PolicyModel, ScoreVars, SeqScore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Dpo,
    Orpo,
}

/// Which sequence probability enters the ORPO odds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrpoProb {
    #[default]
    Mean,
    Product,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub beta: f64,
    pub lambda: f64,
    pub orpo_prob: OrpoProb,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(SapoError::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(SapoError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Loss value with its components. For batches every field is a mean over tuples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean per-token NLL of the chosen response (ORPO); 0 for DPO.
    pub sft_term: f64,
    /// `-log σ(margin)`, multiplied by λ for ORPO.
    pub contrastive_term: f64,
    /// DPO: β-scaled log-ratio difference. ORPO: log odds ratio.
    pub margin: f64,
    pub beta: f64,
    pub lambda: f64,
}

/// Per-tuple loss terms recorded on a tape, each a `[batch]` vector.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    /// Scalar mean of `per_tuple`.
    pub total: Var,
    pub per_tuple: Var,
    pub sft: Option<Var>,
    pub contrastive: Var,
    pub margin: Var,
}

/// `log odds(p) = g − log(1 − e^g)` for `g = log p < 0`.
pub fn log_odds(log_prob: f64) -> Result<f64> {
    ensure_finite(log_prob, "log-probability")?;
    if log_prob >= 0.0 {
        return Err(SapoError::Domain(format!(
            "log odds needs log p < 0, got {log_prob}"
        )));
    }
    Ok(log_prob - math::log1mexp(log_prob))
}

fn log_odds_on_tape(tape: &mut Tape, log_prob: Var) -> Result<Var> {
    let tail = tape.log1mexp(log_prob)?;
    tape.sub(log_prob, tail)
}

/// `-log σ(β·[(θ⁺ − ref⁺) − (θ⁻ − ref⁻)])` on summed log-probabilities.
pub fn dpo_on_tape(
    tape: &mut Tape,
    theta_pos: ScoreVars,
    ref_pos: ScoreVars,
    theta_neg: ScoreVars,
    ref_neg: ScoreVars,
    beta: f64,
) -> Result<LossVars> {
    let pos_ratio = tape.sub(theta_pos.sum, ref_pos.sum)?;
    let neg_ratio = tape.sub(theta_neg.sum, ref_neg.sum)?;
    let diff = tape.sub(pos_ratio, neg_ratio)?;
    let margin = tape.scale(diff, beta);
    let ls = tape.log_sigmoid(margin);
    let contrastive = tape.neg(ls);
    let total = tape.mean(contrastive);
    Ok(LossVars {
        total,
        per_tuple: contrastive,
        sft: None,
        contrastive,
        margin,
    })
}

/// `L_SFT − λ·log σ(log odds⁺ − log odds⁻)`, with `L_SFT = −avg log p(y⁺)`.
pub fn orpo_on_tape(
    tape: &mut Tape,
    theta_pos: ScoreVars,
    theta_neg: ScoreVars,
    lambda: f64,
    prob: OrpoProb,
) -> Result<LossVars> {
    let (lp_pos, lp_neg) = match prob {
        OrpoProb::Mean => (theta_pos.avg, theta_neg.avg),
        OrpoProb::Product => (theta_pos.sum, theta_neg.sum),
    };
    let odds_pos = log_odds_on_tape(tape, lp_pos)?;
    let odds_neg = log_odds_on_tape(tape, lp_neg)?;
    let margin = tape.sub(odds_pos, odds_neg)?;
    let ls = tape.log_sigmoid(margin);
    let ls = tape.neg(ls);
    let contrastive = tape.scale(ls, lambda);
    let sft = tape.neg(theta_pos.avg);
    let per_tuple = tape.add(sft, contrastive)?;
    let total = tape.mean(per_tuple);
    Ok(LossVars {
        total,
        per_tuple,
        sft: Some(sft),
        contrastive,
        margin,
    })
}

fn mean_of(tape: &Tape, v: Var) -> f64 {
    let d = tape.value(v).data();
    d.iter().sum::<f64>() / d.len() as f64
}

fn breakdown(tape: &Tape, vars: &LossVars, beta: f64, lambda: f64) -> Result<LossBreakdown> {
    let total = ensure_finite(tape.scalar(vars.total), "loss")?;
    Ok(LossBreakdown {
        total,
        sft_term: vars.sft.map_or(0.0, |s| mean_of(tape, s)),
        contrastive_term: mean_of(tape, vars.contrastive),
        margin: mean_of(tape, vars.margin),
        beta,
        lambda,
    })
}

fn constant_score(tape: &mut Tape, s: &SeqScore) -> Result<ScoreVars> {
    ensure_finite(s.sum_logprob, "sum log-probability")?;
    ensure_finite(s.avg_logprob, "average log-probability")?;
    Ok(ScoreVars {
        sum: tape.constant(Tensor::vector(vec![s.sum_logprob])),
        avg: tape.constant(Tensor::vector(vec![s.avg_logprob])),
    })
}

/// DPO loss of one tuple from precomputed scores.
pub fn dpo_loss(
    theta_pos: &SeqScore,
    ref_pos: &SeqScore,
    theta_neg: &SeqScore,
    ref_neg: &SeqScore,
    beta: f64,
) -> Result<LossBreakdown> {
    if !(beta >= 0.0) {
        return Err(SapoError::Config(format!("beta must be >= 0, got {beta}")));
    }
    let mut tape = Tape::new();
    let [a, b, c, d] = [theta_pos, ref_pos, theta_neg, ref_neg].map(|s| constant_score(&mut tape, s));
    let vars = dpo_on_tape(&mut tape, a?, b?, c?, d?, beta)?;
    breakdown(&tape, &vars, beta, 0.0)
}

/// ORPO loss of one tuple from precomputed scores, length-normalized odds.
pub fn orpo_loss(theta_pos: &SeqScore, theta_neg: &SeqScore, lambda: f64) -> Result<LossBreakdown> {
    orpo_loss_with(theta_pos, theta_neg, lambda, OrpoProb::Mean)
}

pub fn orpo_loss_with(
    theta_pos: &SeqScore,
    theta_neg: &SeqScore,
    lambda: f64,
    prob: OrpoProb,
) -> Result<LossBreakdown> {
    if !(lambda >= 0.0) {
        return Err(SapoError::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let mut tape = Tape::new();
    let pos = constant_score(&mut tape, theta_pos)?;
    let neg = constant_score(&mut tape, theta_neg)?;
    let vars = orpo_on_tape(&mut tape, pos, neg, lambda, prob)?;
    breakdown(&tape, &vars, 0.0, lambda)
}

/// Mean loss over a batch plus the gradient w.r.t. the policy's flat parameters.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub breakdown: LossBreakdown,
    pub grad: Vec<f64>,
    /// Mean of `sum log π_θ(y⁺|x) − sum log π_θ(y⁻|x)`.
    pub pref_margin_mean: f64,
}

/// Records the batch objective on `tape` with the policy bound to `policy_params`.
///
/// The reference model, when given, is bound through a detached leaf so it
/// never receives gradient.
pub fn record_batch_loss(
    tape: &mut Tape,
    tuples: &[PreferenceTuple],
    policy: &dyn PolicyModel,
    policy_params: Var,
    reference: Option<&dyn PolicyModel>,
    cfg: &LossConfig,
) -> Result<(LossVars, ScoreVars, ScoreVars)> {
    if tuples.is_empty() {
        return Err(SapoError::Contract("batch_loss needs at least one tuple".into()));
    }
    cfg.validate()?;
    let n = tuples.len();
    let pairs: Vec<(&TokenSeq, &TokenSeq)> = tuples
        .iter()
        .map(|t| (&t.prompt, &t.chosen))
        .chain(tuples.iter().map(|t| (&t.prompt, &t.rejected)))
        .collect();
    let split = |tape: &mut Tape, all: ScoreVars| -> Result<(ScoreVars, ScoreVars)> {
        let pos = ScoreVars {
            sum: tape.slice(all.sum, 0, &[n])?,
            avg: tape.slice(all.avg, 0, &[n])?,
        };
        let neg = ScoreVars {
            sum: tape.slice(all.sum, n, &[n])?,
            avg: tape.slice(all.avg, n, &[n])?,
        };
        Ok((pos, neg))
    };
    let theta = score_on_tape(tape, policy, policy_params, &pairs)?;
    let (pos, neg) = split(tape, theta)?;

    let vars = match (cfg.kind, reference) {
        (LossKind::Dpo, Some(reference)) => {
            let leaf = tape.leaf(Tensor::vector(reference.params().to_vec()));
            let frozen = tape.detach(leaf);
            let r = score_on_tape(tape, reference, frozen, &pairs)?;
            let (rpos, rneg) = split(tape, r)?;
            dpo_on_tape(tape, pos, rpos, neg, rneg, cfg.beta)?
        }
        (LossKind::Dpo, None) => {
            return Err(SapoError::Config("DPO needs a reference model".into()));
        }
        (LossKind::Orpo, None) => orpo_on_tape(tape, pos, neg, cfg.lambda, cfg.orpo_prob)?,
        (LossKind::Orpo, Some(_)) => {
            return Err(SapoError::Config("ORPO takes no reference model".into()));
        }
    };
    Ok((vars, pos, neg))
}

/// Arithmetic mean of per-tuple DPO/ORPO losses and its gradient.
pub fn batch_loss(
    tuples: &[PreferenceTuple],
    policy: &dyn PolicyModel,
    reference: Option<&dyn PolicyModel>,
    cfg: &LossConfig,
) -> Result<BatchLoss> {
    let mut tape = Tape::new();
    let params = tape.leaf(Tensor::vector(policy.params().to_vec()));
    let (vars, pos, neg) = record_batch_loss(&mut tape, tuples, policy, params, reference, cfg)?;
    let (beta, lambda) = match cfg.kind {
        LossKind::Dpo => (cfg.beta, 0.0),
        LossKind::Orpo => (0.0, cfg.lambda),
    };
    let bd = breakdown(&tape, &vars, beta, lambda)?;
    let pref_margin_mean = {
        let p = tape.value(pos.sum).data();
        let q = tape.value(neg.sum).data();
        p.iter().zip(q).map(|(a, b)| a - b).sum::<f64>() / p.len() as f64
    };
    let grads = tape.backward(vars.total)?;
    Ok(BatchLoss {
        breakdown: bd,
        grad: grads.wrt(params),
        pref_margin_mean,
    })
}

/// Mean per-token NLL of chosen responses (the plain SFT objective) and its gradient.
pub fn sft_loss(pairs: &[(&TokenSeq, &TokenSeq)], policy: &dyn PolicyModel) -> Result<(f64, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(SapoError::Contract("sft_loss needs at least one example".into()));
    }
    let mut tape = Tape::new();
    let params = tape.leaf(Tensor::vector(policy.params().to_vec()));
    let scores = score_on_tape(&mut tape, policy, params, pairs)?;
    let nll = tape.neg(scores.avg);
    let total = tape.mean(nll);
    let value = ensure_finite(tape.scalar(total), "sft loss")?;
    let grads = tape.backward(total)?;
    Ok((value, grads.wrt(params)))
}
