//! Segment-level rejected-response synthesis.
//!
//! The chosen response is cut into `A ⊕ B ⊕ C` at a random truncation point;
//! a frozen generator rewrites `B` from `prompt ⊕ A` and the rejected
//! response is `A ⊕ B′ ⊕ C`, the same length as the chosen one.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{PreferenceTuple, TokenSeq};
use crate::error::{Result, SapoError};
use crate::model::{sample_continuation, PolicyModel};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    /// Regenerate only segment B.
    Segment,
    /// Regenerate the whole response from the prompt.
    FullRegen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub n_seg: usize,
    pub temperature: f64,
    pub resample_on_identical: bool,
    pub mode: AugmentMode,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            n_seg: 4,
            temperature: 1.0,
            resample_on_identical: true,
            mode: AugmentMode::Segment,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_seg < 1 {
            return Err(SapoError::Config("n_seg must be >= 1".into()));
        }
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(SapoError::Config(format!(
                "temperature must be finite and >= 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentSplit {
    pub a: TokenSeq,
    pub b: TokenSeq,
    pub c: TokenSeq,
    /// Truncation point; equals `a.len()`.
    pub t: usize,
    pub segment_len_effective: usize,
}

/// Splits at truncation point `t`: `B = chosen[t .. t + min(n_seg, len − t))`.
pub fn split_at(chosen: &TokenSeq, t: usize, n_seg: usize) -> Result<SegmentSplit> {
    let len = chosen.len();
    if len == 0 {
        return Err(SapoError::Contract("cannot split an empty response".into()));
    }
    if t >= len || n_seg == 0 {
        return Err(SapoError::Contract(format!(
            "truncation point {t} / n_seg {n_seg} invalid for length {len}"
        )));
    }
    let seg = n_seg.min(len - t);
    Ok(SegmentSplit {
        a: chosen.slice(0..t),
        b: chosen.slice(t..t + seg),
        c: chosen.slice(t + seg..len),
        t,
        segment_len_effective: seg,
    })
}

/// Random split with `t` uniform over `{0, …, len − 1}`.
pub fn split_response(chosen: &TokenSeq, n_seg: usize, seed: u64) -> Result<SegmentSplit> {
    if chosen.is_empty() {
        return Err(SapoError::Contract("cannot split an empty response".into()));
    }
    let t = rng::stream(seed).gen_range(0..chosen.len());
    split_at(chosen, t, n_seg)
}

/// A synthesized tuple and, in segment mode, the split it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Synthesized {
    pub tuple: PreferenceTuple,
    pub split: Option<SegmentSplit>,
    /// Seed that produced the tuple (`seed` or `seed + 1` after a retry).
    pub seed_used: u64,
}

fn attempt(
    prompt: &TokenSeq,
    chosen: &TokenSeq,
    generator: &dyn PolicyModel,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<(TokenSeq, Option<SegmentSplit>)> {
    let sample_seed = rng::derive_seed(seed, &[0x5A]);
    match cfg.mode {
        AugmentMode::Segment => {
            let split = split_response(chosen, cfg.n_seg, seed)?;
            let context = TokenSeq::concat(&[prompt, &split.a]);
            let b_prime = sample_continuation(generator, &context, split.b.len(), cfg.temperature, sample_seed)?;
            let rejected = TokenSeq::concat(&[&split.a, &b_prime, &split.c]);
            Ok((rejected, Some(split)))
        }
        AugmentMode::FullRegen => {
            let rejected = sample_continuation(generator, prompt, chosen.len(), cfg.temperature, sample_seed)?;
            Ok((rejected, None))
        }
    }
}

/// Like [`synthesize_rejected`] but also returns the split.
pub fn synthesize_detailed(
    prompt: &TokenSeq,
    chosen: &TokenSeq,
    generator: &dyn PolicyModel,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<Option<Synthesized>> {
    cfg.validate()?;
    if chosen.is_empty() {
        return Err(SapoError::Contract("chosen response is empty".into()));
    }
    let tries: &[u64] = if cfg.resample_on_identical { &[0, 1] } else { &[0] };
    for &offset in tries {
        let seed_used = seed.wrapping_add(offset);
        let (rejected, split) = attempt(prompt, chosen, generator, cfg, seed_used)?;
        if rejected != *chosen {
            return Ok(Some(Synthesized {
                tuple: PreferenceTuple {
                    prompt: prompt.clone(),
                    chosen: chosen.clone(),
                    rejected,
                },
                split,
                seed_used,
            }));
        }
    }
    Ok(None)
}

/// Builds `(x, y⁺, y⁻)` with a generated rejected response, or `None` when
/// generation reproduced the chosen response (after one retry when enabled).
pub fn synthesize_rejected(
    prompt: &TokenSeq,
    chosen: &TokenSeq,
    generator: &dyn PolicyModel,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<Option<PreferenceTuple>> {
    Ok(synthesize_detailed(prompt, chosen, generator, cfg, seed)?.map(|s| s.tuple))
}
