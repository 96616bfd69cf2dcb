//! EMA shadow of the policy parameters and reference-model refresh strategies.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SapoError};
use crate::model::PolicyModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmaConfig {
    pub alpha: f64,
    pub update_every: u64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            update_every: 2,
        }
    }
}

/// `θ_EMA ← α·θ_EMA + (1 − α)·θ`, applied on every `update_every`-th call.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    shadow: Vec<f64>,
    alpha: f64,
    update_every: u64,
    step_counter: u64,
}

impl EmaState {
    /// Shadow starts as a copy of `initial`.
    pub fn new(initial: &[f64], cfg: EmaConfig) -> Result<Self> {
        if !(0.0..=1.0).contains(&cfg.alpha) {
            return Err(SapoError::Config(format!("ema alpha must be in [0, 1], got {}", cfg.alpha)));
        }
        if cfg.update_every < 1 {
            return Err(SapoError::Config("ema update_every must be >= 1".into()));
        }
        Ok(Self {
            shadow: initial.to_vec(),
            alpha: cfg.alpha,
            update_every: cfg.update_every,
            step_counter: 0,
        })
    }

    pub fn shadow(&self) -> &[f64] {
        &self.shadow
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn step_counter(&self) -> u64 {
        self.step_counter
    }

    /// Counts one optimizer step; returns whether the shadow moved.
    pub fn update(&mut self, policy: &[f64]) -> Result<bool> {
        if policy.len() != self.shadow.len() {
            return Err(SapoError::Contract(format!(
                "ema shadow has {} parameters, policy has {}",
                self.shadow.len(),
                policy.len()
            )));
        }
        self.step_counter += 1;
        if self.step_counter % self.update_every != 0 {
            return Ok(false);
        }
        let a = self.alpha;
        for (s, &p) in self.shadow.iter_mut().zip(policy) {
            *s = a * *s + (1.0 - a) * p;
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefStrategyKind {
    FixRef,
    PolicyRef,
    EmaRef,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefStrategy {
    pub kind: RefStrategyKind,
    pub refresh_every: u64,
}

impl Default for RefStrategy {
    fn default() -> Self {
        Self {
            kind: RefStrategyKind::EmaRef,
            refresh_every: 2,
        }
    }
}

impl RefStrategy {
    pub fn validate(&self) -> Result<()> {
        if self.refresh_every < 1 {
            return Err(SapoError::Config("refresh_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Overwrites the reference parameters at steps divisible by `refresh_every`:
/// from the policy (`policy_ref`) or from the EMA shadow (`ema_ref`).
/// Returns whether the reference changed.
pub fn refresh_reference(
    strategy: &RefStrategy,
    reference: &mut dyn PolicyModel,
    policy: &dyn PolicyModel,
    ema: &EmaState,
    step: u64,
) -> Result<bool> {
    strategy.validate()?;
    if strategy.kind == RefStrategyKind::FixRef || step % strategy.refresh_every != 0 {
        return Ok(false);
    }
    match strategy.kind {
        RefStrategyKind::PolicyRef => reference.set_params(policy.params())?,
        RefStrategyKind::EmaRef => reference.set_params(ema.shadow())?,
        RefStrategyKind::FixRef => unreachable!(),
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TabularBigramLM;

    fn cfg(alpha: f64, every: u64) -> EmaConfig {
        EmaConfig {
            alpha,
            update_every: every,
        }
    }

    #[test]
    fn half_alpha_averages() {
        let mut e = EmaState::new(&[1.0, 0.0], cfg(0.5, 1)).unwrap();
        assert!(e.update(&[0.0, 1.0]).unwrap());
        assert_eq!(e.shadow(), &[0.5, 0.5]);
    }

    #[test]
    fn alpha_one_is_fixed_point() {
        let mut e = EmaState::new(&[3.0], cfg(1.0, 1)).unwrap();
        for i in 0..100 {
            e.update(&[i as f64]).unwrap();
        }
        assert_eq!(e.shadow(), &[3.0]);
    }

    #[test]
    fn alpha_zero_copies() {
        let mut e = EmaState::new(&[3.0, 4.0], cfg(0.0, 1)).unwrap();
        e.update(&[-1.0, 7.5]).unwrap();
        assert_eq!(e.shadow(), &[-1.0, 7.5]);
    }

    #[test]
    fn cadence_skips_odd_steps() {
        let mut e = EmaState::new(&[0.0], cfg(0.0, 2)).unwrap();
        assert!(!e.update(&[1.0]).unwrap());
        assert_eq!(e.shadow(), &[0.0]);
        assert!(e.update(&[2.0]).unwrap());
        assert_eq!(e.shadow(), &[2.0]);
        assert_eq!(e.step_counter(), 2);
    }

    #[test]
    fn bad_config_and_length() {
        assert!(EmaState::new(&[0.0], cfg(1.5, 1)).is_err());
        assert!(EmaState::new(&[0.0], cfg(0.5, 0)).is_err());
        let mut e = EmaState::new(&[0.0], cfg(0.5, 1)).unwrap();
        assert!(matches!(e.update(&[0.0, 1.0]), Err(SapoError::Contract(_))));
    }

    #[test]
    fn refresh_strategies() {
        let policy = TabularBigramLM::new(2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ema = EmaState::new(&[9.0, 9.0, 9.0, 9.0], cfg(0.5, 1)).unwrap();
        let mut reference = TabularBigramLM::uniform(2);

        let fix = RefStrategy {
            kind: RefStrategyKind::FixRef,
            refresh_every: 1,
        };
        assert!(!refresh_reference(&fix, &mut reference, &policy, &ema, 4).unwrap());
        assert_eq!(reference.params(), &[0.0; 4]);

        let pol = RefStrategy {
            kind: RefStrategyKind::PolicyRef,
            refresh_every: 3,
        };
        assert!(!refresh_reference(&pol, &mut reference, &policy, &ema, 4).unwrap());
        assert!(refresh_reference(&pol, &mut reference, &policy, &ema, 6).unwrap());
        assert_eq!(reference.params(), policy.params());

        let em = RefStrategy {
            kind: RefStrategyKind::EmaRef,
            refresh_every: 1,
        };
        refresh_reference(&em, &mut reference, &policy, &ema, 1).unwrap();
        assert_eq!(reference.params(), ema.shadow());
    }
}
