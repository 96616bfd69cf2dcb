use rand::Rng;
use serde::Serialize;

use crate::autodiff::{grad_check, Tensor};
use crate::corpus::{PreferenceTuple, TokenSeq};
use crate::error::Result;
use crate::losses::{record_batch_loss, LossConfig, LossKind, OrpoProb};
use crate::model::{ModelKind, ModelSpec, PolicyModel};
use crate::rng::{self, derive_seed};

pub const GRADCHECK_STEP: f64 = 1e-6;
pub const GRADCHECK_TUPLES: usize = 20;
pub const GRADCHECK_MAX_LEN: usize = 8;
/// Vocabulary of the tabular model in [`gradcheck_suite`].
pub const GRADCHECK_BIGRAM_VOCAB: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub model: ModelKind,
    pub loss: LossKind,
    pub max_rel_error: f64,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Random tuples with lengths in `1..=max_len` and tokens in `[1, V)`.
pub fn random_tuples(vocab_size: usize, count: usize, max_len: usize, seed: u64) -> Vec<PreferenceTuple> {
    let mut rng = rng::stream(seed);
    let seq = |rng: &mut rand_chacha::ChaCha8Rng| {
        let len = rng.gen_range(1..=max_len.max(1));
        TokenSeq::new((0..len).map(|_| rng.gen_range(1..vocab_size as u32)).collect())
    };
    (0..count)
        .map(|_| PreferenceTuple {
            prompt: seq(&mut rng),
            chosen: seq(&mut rng),
            rejected: seq(&mut rng),
        })
        .collect()
}

/// Uniform parameters; hidden weights are kept small so tanh units stay
/// out of saturation, where gradients drop below the difference noise.
fn random_model(spec: &ModelSpec, seed: u64) -> Result<Box<dyn PolicyModel>> {
    let mut rng = rng::stream(seed);
    let mut params = Vec::with_capacity(spec.param_count());
    for (name, shape) in spec.param_shapes() {
        let a = match name {
            "hidden_weight" => 0.2,
            "hidden_bias" | "output_bias" => 0.5,
            _ => 1.0,
        };
        params.extend((0..shape.iter().product::<usize>()).map(|_| rng.gen_range(-a..a)));
    }
    spec.build_with(params)
}

/// Finite-difference check of one loss on one model over a batch of random tuples.
pub fn check_loss(spec: &ModelSpec, loss: LossKind, seed: u64, tuples: usize, tol: f64) -> Result<GradCheckEntry> {
    let policy = random_model(spec, derive_seed(seed, &[1]))?;
    let reference = match loss {
        LossKind::Dpo => Some(random_model(spec, derive_seed(seed, &[2]))?),
        LossKind::Orpo => None,
    };
    let batch = random_tuples(spec.vocab_size, tuples, GRADCHECK_MAX_LEN, derive_seed(seed, &[3]));
    let cfg = LossConfig {
        kind: loss,
        beta: 1.0,
        lambda: 0.05,
        orpo_prob: OrpoProb::Mean,
    };
    let report = grad_check(
        |tape, p| {
            let (vars, _, _) = record_batch_loss(tape, &batch, policy.as_ref(), p[0], reference.as_deref(), &cfg)?;
            Ok(vars.total)
        },
        &[Tensor::vector(policy.params().to_vec())],
        GRADCHECK_STEP,
        tol,
    )?;
    Ok(GradCheckEntry {
        model: spec.kind,
        loss,
        max_rel_error: report.max_rel_error,
        checked: report.checked,
        tol,
        passed: report.passed,
    })
}

/// Both losses over a tabular bigram model (at `bigram_tol`) and the
/// feed-forward model `ff` (at `ff_tol`).
pub fn gradcheck_suite(ff: &ModelSpec, seed: u64, bigram_tol: f64, ff_tol: f64) -> Result<Vec<GradCheckEntry>> {
    let bigram = ModelSpec::bigram(GRADCHECK_BIGRAM_VOCAB);
    let mut out = Vec::with_capacity(4);
    for (spec, tol) in [(&bigram, bigram_tol), (ff, ff_tol)] {
        for loss in [LossKind::Dpo, LossKind::Orpo] {
            out.push(check_loss(spec, loss, seed, GRADCHECK_TUPLES, tol)?);
        }
    }
    Ok(out)
}
