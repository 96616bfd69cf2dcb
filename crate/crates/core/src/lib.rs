//! Desk-scale Self-Augmented Preference Optimization.
//!
//! Tiny autoregressive language models are trained on synthetic token tasks
//! with a self-play preference loop: an EMA copy of the policy rewrites a
//! random segment of each chosen response to produce a rejected one, the
//! resulting tuples go through a counter-weighted FIFO replay buffer, and
//! the policy is updated with a DPO or ORPO loss.
//!
//! Module map:
//!
//! - [`corpus`]: token sequences, JSONL datasets, synthetic tasks, evaluator
//! - [`autodiff`]: reverse-mode tape and finite-difference checks
//! - [`model`]: the [`model::PolicyModel`] trait, bigram and feed-forward LMs
//! - [`losses`]: DPO / ORPO objectives
//! - [`augment`]: segment split and rejected-response synthesis
//! - [`buffer`]: replay buffer
//! - [`ema`]: EMA shadow and reference refresh strategies
//! - [`trainer`]: SAPO, on-policy, SPIN and offline-paired loops, SFT warm start
//! - [`cli`]: run configuration, checkpoints and the `sapo` subcommands

pub mod augment;
pub mod autodiff;
pub mod buffer;
pub mod cli;
pub mod corpus;
pub mod ema;
pub mod error;
pub mod losses;
pub mod math;
pub mod model;
pub mod rng;
pub mod trainer;

pub use error::{Result, SapoError};
