//! Training loops.
//!
//! [`run_sapo`] follows the two-stage iteration: a sampling stage that
//! draws `sampling_batch` dataset examples, lets the EMA generator rewrite a
//! segment of each chosen response and pushes the tuples into the replay
//! buffer; then a training stage that samples `training_batch` tuples from
//! the buffer, takes one optimizer step on the DPO/ORPO loss, updates the
//! EMA shadow and, for DPO, refreshes the reference model.
//!
//! The baselines share the same step function:
//!
//! - [`run_on_policy`]: the current policy generates and the fresh batch is
//!   trained on directly, no buffer;
//! - [`run_spin`]: snapshot, regenerate rejected responses for the whole
//!   dataset, then train epochs on that fixed set;
//! - [`run_offline_paired`]: epochs over pre-collected `(x, y⁺, y⁻)`;
//! - [`run_sft`]: mean-NLL warm start on chosen responses.
//!
//! Every random choice is drawn from a stream derived from the run seed
//! and the position in the loop, so runs are bit-reproducible.

mod metrics;
mod optim;

pub use metrics::{bytes_hash, metrics_csv, param_hash, write_metrics_csv, StepMetrics, CSV_HEADER};
pub use optim::{Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{synthesize_rejected, AugmentConfig, AugmentMode};
use crate::buffer::ReplayBuffer;
use crate::corpus::{evaluate_preference_accuracy, PreferenceTuple, SftExample, TokenSeq};
use crate::ema::{refresh_reference, EmaConfig, EmaState, RefStrategy};
use crate::error::{Result, SapoError};
use crate::losses::{batch_loss, sft_loss, LossConfig, LossKind, OrpoProb};
use crate::model::PolicyModel;
use crate::rng::{self, derive_seed};

// stream identifiers for derive_seed
const STREAM_DATASET: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_BUFFER: u64 = 3;
const STREAM_EPOCH: u64 = 4;
const STREAM_SPIN: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    Sapo,
    OnPolicy,
    Spin,
    OfflinePaired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub loss: LossKind,
    pub paradigm: Paradigm,
    /// Outer iterations `T` (SAPO, on-policy).
    pub iterations: usize,
    /// Dataset examples drawn per sampling stage (`N`).
    pub sampling_batch: usize,
    pub training_batch: usize,
    /// Optimizer steps per sampling stage.
    pub steps_per_sample: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub beta: f64,
    pub lambda: f64,
    pub orpo_prob: OrpoProb,
    pub augment: AugmentConfig,
    pub buffer_capacity: usize,
    pub ema: EmaConfig,
    pub ref_strategy: RefStrategy,
    pub spin_iters: usize,
    pub spin_epochs_per_iter: usize,
    /// Generation mode SPIN uses for its rejected set.
    pub spin_mode: AugmentMode,
    /// Epochs for the offline-paired loop.
    pub epochs: usize,
    /// Global L2 clipping threshold; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Evaluate every this many rows (0 disables; the last row is always evaluated when enabled).
    pub eval_every: usize,
    /// Evaluate on the first `eval_size` examples; `None` uses all.
    pub eval_size: Option<usize>,
    pub eval_seed: u64,
    /// Run seed. Set from the run configuration's top-level seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Orpo,
            paradigm: Paradigm::Sapo,
            iterations: 200,
            sampling_batch: 8,
            training_batch: 8,
            steps_per_sample: 1,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            beta: 0.1,
            lambda: 0.05,
            orpo_prob: OrpoProb::Mean,
            augment: AugmentConfig::default(),
            buffer_capacity: 2000,
            ema: EmaConfig::default(),
            ref_strategy: RefStrategy::default(),
            spin_iters: 2,
            spin_epochs_per_iter: 1,
            spin_mode: AugmentMode::FullRegen,
            epochs: 2,
            grad_clip: Some(10.0),
            eval_every: 50,
            eval_size: None,
            eval_seed: 2024,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            kind: self.loss,
            beta: self.beta,
            lambda: self.lambda,
            orpo_prob: self.orpo_prob,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("iterations", self.iterations),
            ("sampling_batch", self.sampling_batch),
            ("training_batch", self.training_batch),
            ("steps_per_sample", self.steps_per_sample),
            ("buffer_capacity", self.buffer_capacity),
        ];
        for (name, v) in positive {
            if v < 1 {
                return Err(SapoError::Config(format!("{name} must be >= 1")));
            }
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(SapoError::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(SapoError::Config(format!("grad_clip must be > 0, got {c}")));
            }
        }
        self.loss_config().validate()?;
        self.augment.validate()?;
        self.ref_strategy.validate()?;
        EmaState::new(&[], self.ema)?;
        Ok(())
    }
}

/// Epoch-based warm start on chosen responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub grad_clip: Option<f64>,
    pub eval_seed: u64,
    pub eval_size: Option<usize>,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 16,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            grad_clip: Some(10.0),
            eval_seed: 2024,
            eval_size: None,
        }
    }
}

/// Everything a loop produces besides the trained policy.
#[derive(Debug)]
pub struct RunOutput {
    pub metrics: Vec<StepMetrics>,
    pub ema: Option<EmaState>,
    pub reference: Option<Box<dyn PolicyModel>>,
    pub buffer: Option<ReplayBuffer>,
}

/// Called after every metrics row with the row, the policy and the EMA state.
pub type Observer<'a> = dyn FnMut(&StepMetrics, &dyn PolicyModel, Option<&EmaState>) -> Result<()> + 'a;

fn no_observer(_: &StepMetrics, _: &dyn PolicyModel, _: Option<&EmaState>) -> Result<()> {
    Ok(())
}

/// Result of one optimizer step.
#[derive(Debug, Clone, Copy)]
struct StepStats {
    total: f64,
    sft: f64,
    contrastive: f64,
    margin: f64,
    grad_norm: f64,
    pref_margin: f64,
}

fn l2(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn apply_gradient(
    policy: &mut dyn PolicyModel,
    optimizer: &mut Optimizer,
    mut grad: Vec<f64>,
    lr: f64,
    clip: Option<f64>,
) -> Result<f64> {
    let norm = l2(&grad);
    if !norm.is_finite() {
        return Err(SapoError::Numeric(format!("gradient norm is not finite ({norm})")));
    }
    if let Some(c) = clip {
        if norm > c {
            let s = c / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    let mut params = policy.params().to_vec();
    optimizer.step(&mut params, &grad, lr)?;
    policy.set_params(&params)?;
    Ok(norm)
}

fn preference_step(
    policy: &mut dyn PolicyModel,
    reference: Option<&dyn PolicyModel>,
    batch: &[PreferenceTuple],
    optimizer: &mut Optimizer,
    cfg: &TrainerConfig,
) -> Result<StepStats> {
    let bl = batch_loss(batch, &*policy, reference, &cfg.loss_config())?;
    let grad_norm = apply_gradient(policy, optimizer, bl.grad, cfg.learning_rate, cfg.grad_clip)?;
    Ok(StepStats {
        total: bl.breakdown.total,
        sft: bl.breakdown.sft_term,
        contrastive: bl.breakdown.contrastive_term,
        margin: bl.breakdown.margin,
        grad_norm,
        pref_margin: bl.pref_margin_mean,
    })
}

fn fill_losses(row: &mut StepMetrics, steps: &[StepStats]) {
    if steps.is_empty() {
        return;
    }
    let n = steps.len() as f64;
    let mean = |f: fn(&StepStats) -> f64| steps.iter().map(f).sum::<f64>() / n;
    row.loss_total = Some(mean(|s| s.total));
    row.loss_sft = Some(mean(|s| s.sft));
    row.loss_contrastive = Some(mean(|s| s.contrastive));
    row.margin = Some(mean(|s| s.margin));
    row.grad_norm = Some(mean(|s| s.grad_norm));
    row.pref_margin_mean = Some(mean(|s| s.pref_margin));
}

fn eval_slice<'a>(dataset: &'a [SftExample], size: Option<usize>) -> &'a [SftExample] {
    &dataset[..size.map_or(dataset.len(), |s| s.min(dataset.len()))]
}

fn due(every: usize, row: usize, last: bool) -> bool {
    every > 0 && (row % every == 0 || last)
}

fn check_inputs(cfg: &TrainerConfig, dataset: &[SftExample], policy: &dyn PolicyModel) -> Result<()> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(SapoError::Config("dataset is empty".into()));
    }
    for ex in dataset {
        ex.validate(policy.vocab_size())?;
    }
    Ok(())
}

fn initial_reference(cfg: &TrainerConfig, policy: &dyn PolicyModel) -> Option<Box<dyn PolicyModel>> {
    (cfg.loss == LossKind::Dpo).then(|| policy.clone_frozen())
}

/// Dispatches on `cfg.paradigm`.
pub fn train(
    cfg: &TrainerConfig,
    dataset: &[SftExample],
    policy: &mut dyn PolicyModel,
    observer: &mut Observer<'_>,
) -> Result<RunOutput> {
    match cfg.paradigm {
        Paradigm::Sapo => sapo_loop(cfg, dataset, policy, Generator::Ema, observer),
        Paradigm::OnPolicy => sapo_loop(cfg, dataset, policy, Generator::Policy, observer),
        Paradigm::Spin => spin_loop(cfg, dataset, policy, observer),
        Paradigm::OfflinePaired => offline_loop(cfg, dataset, policy, observer),
    }
}

/// Self-augmented loop: EMA generator, replay buffer, one update per iteration.
pub fn run_sapo(cfg: &TrainerConfig, dataset: &[SftExample], policy: &mut dyn PolicyModel) -> Result<RunOutput> {
    sapo_loop(cfg, dataset, policy, Generator::Ema, &mut no_observer)
}

/// Ablation: the current policy generates, fresh tuples are trained on directly.
pub fn run_on_policy(cfg: &TrainerConfig, dataset: &[SftExample], policy: &mut dyn PolicyModel) -> Result<RunOutput> {
    sapo_loop(cfg, dataset, policy, Generator::Policy, &mut no_observer)
}

/// Offline iterative self-play.
pub fn run_spin(cfg: &TrainerConfig, dataset: &[SftExample], policy: &mut dyn PolicyModel) -> Result<RunOutput> {
    spin_loop(cfg, dataset, policy, &mut no_observer)
}

/// Epochs over pre-collected preference pairs.
pub fn run_offline_paired(
    cfg: &TrainerConfig,
    dataset: &[SftExample],
    policy: &mut dyn PolicyModel,
) -> Result<RunOutput> {
    offline_loop(cfg, dataset, policy, &mut no_observer)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Generator {
    Ema,
    Policy,
}

/// Sampling stage: draws `N` examples with replacement and synthesizes a
/// rejected response for each. Returns the tuples and the skip count.
fn sampling_stage(
    cfg: &TrainerConfig,
    dataset: &[SftExample],
    generator: &dyn PolicyModel,
    iteration: usize,
) -> Result<(Vec<PreferenceTuple>, usize)> {
    let mut pick = rng::stream(derive_seed(cfg.seed, &[STREAM_DATASET, iteration as u64]));
    let mut tuples = Vec::with_capacity(cfg.sampling_batch);
    let mut skipped = 0;
    for slot in 0..cfg.sampling_batch {
        let ex = &dataset[pick.gen_range(0..dataset.len())];
        let seed = derive_seed(cfg.seed, &[STREAM_AUGMENT, iteration as u64, slot as u64]);
        match synthesize_rejected(&ex.prompt, &ex.chosen, generator, &cfg.augment, seed)? {
            Some(t) => tuples.push(t),
            None => skipped += 1,
        }
    }
    Ok((tuples, skipped))
}

fn sapo_loop(
    cfg: &TrainerConfig,
    dataset: &[SftExample],
    policy: &mut dyn PolicyModel,
    generator_kind: Generator,
    observer: &mut Observer<'_>,
) -> Result<RunOutput> {
    check_inputs(cfg, dataset, policy)?;
    let mut reference = initial_reference(cfg, policy);
    let mut ema = EmaState::new(policy.params(), cfg.ema)?;
    let mut ema_model = policy.clone_frozen();
    let mut buffer = match generator_kind {
        Generator::Ema => Some(ReplayBuffer::new(cfg.buffer_capacity)?),
        Generator::Policy => None,
    };
    let mut optimizer = Optimizer::new(cfg.optimizer, policy.param_count());
    let eval_set = eval_slice(dataset, cfg.eval_size);
    let stage = match generator_kind {
        Generator::Ema => "sapo",
        Generator::Policy => "on_policy",
    };
    let mut opt_steps: u64 = 0;
    let mut metrics = Vec::with_capacity(cfg.iterations);

    for it in 1..=cfg.iterations {
        let generator: &dyn PolicyModel = match generator_kind {
            Generator::Ema => ema_model.as_ref(),
            Generator::Policy => &*policy,
        };
        let (fresh, skipped) = sampling_stage(cfg, dataset, generator, it)?;
        let mut row = StepMetrics::new(it, stage);
        row.generated = fresh.len();
        row.skipped = skipped;

        let on_policy_batch = match &mut buffer {
            Some(buf) => {
                fresh.into_iter().for_each(|t| buf.push(t));
                None
            }
            None => Some(fresh),
        };

        let mut steps = Vec::with_capacity(cfg.steps_per_sample);
        for k in 0..cfg.steps_per_sample {
            let batch = match (&mut buffer, &on_policy_batch) {
                (Some(buf), _) => {
                    let seed = derive_seed(cfg.seed, &[STREAM_BUFFER, it as u64, k as u64]);
                    match buf.sample_batch(cfg.training_batch, seed) {
                        Ok(b) => b,
                        Err(SapoError::BufferEmpty) => break,
                        Err(e) => return Err(e),
                    }
                }
                (None, Some(fresh)) if !fresh.is_empty() => fresh.clone(),
                _ => break,
            };
            let stats = preference_step(policy, reference.as_deref(), &batch, &mut optimizer, cfg)?;
            steps.push(stats);
            opt_steps += 1;
            if ema.update(policy.params())? {
                ema_model.set_params(ema.shadow())?;
            }
            if let Some(r) = reference.as_deref_mut() {
                refresh_reference(&cfg.ref_strategy, r, &*policy, &ema, opt_steps)?;
            }
        }
        if steps.is_empty() {
            row.stage = match generator_kind {
                Generator::Ema => "sapo_skip",
                Generator::Policy => "on_policy_skip",
            };
        }
        fill_losses(&mut row, &steps);
        if let Some(buf) = &buffer {
            let s = buf.stats();
            row.buffer_size = Some(s.size);
            row.buffer_mean_count = s.mean_count;
        }
        if due(cfg.eval_every, it, it == cfg.iterations) {
            row.eval_acc = Some(evaluate_preference_accuracy(&*policy, eval_set, cfg.eval_seed)?);
        }
        row.reference_hash = reference.as_ref().map(|r| param_hash(r.params()));
        observer(&row, &*policy, Some(&ema))?;
        metrics.push(row);
    }
    Ok(RunOutput {
        metrics,
        ema: Some(ema),
        reference,
        buffer,
    })
}

/// Shuffled mini-batches of `0..n` for one epoch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(derive_seed(seed, &[STREAM_EPOCH, epoch])));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Rejected responses for the whole dataset from a frozen snapshot.
/// Examples whose generation reproduced the chosen response are dropped.
pub fn generate_spin_set(
    cfg: &TrainerConfig,
    dataset: &[SftExample],
    snapshot: &dyn PolicyModel,
    outer: usize,
) -> Result<Vec<PreferenceTuple>> {
    let aug = AugmentConfig {
        mode: cfg.spin_mode,
        ..cfg.augment.clone()
    };
    let mut out = Vec::with_capacity(dataset.len());
    for (i, ex) in dataset.iter().enumerate() {
        let seed = derive_seed(cfg.seed, &[STREAM_SPIN, outer as u64, i as u64]);
        if let Some(t) = synthesize_rejected(&ex.prompt, &ex.chosen, snapshot, &aug, seed)? {
            out.push(t);
        }
    }
    Ok(out)
}

fn spin_loop(
    cfg: &TrainerConfig,
    dataset: &[SftExample],
    policy: &mut dyn PolicyModel,
    observer: &mut Observer<'_>,
) -> Result<RunOutput> {
    check_inputs(cfg, dataset, policy)?;
    let mut optimizer = Optimizer::new(cfg.optimizer, policy.param_count());
    let eval_set = eval_slice(dataset, cfg.eval_size);
    let mut metrics = Vec::new();
    let total_rows: usize = (0..cfg.spin_iters)
        .map(|_| cfg.spin_epochs_per_iter)
        .sum::<usize>()
        * dataset.len().div_ceil(cfg.training_batch);
    let mut step = 0;
    let mut last_snapshot = None;
    for outer in 0..cfg.spin_iters {
        let snapshot = policy.clone_frozen();
        let paired = generate_spin_set(cfg, dataset, snapshot.as_ref(), outer)?;
        let reference = (cfg.loss == LossKind::Dpo).then_some(snapshot.as_ref());
        for epoch in 0..cfg.spin_epochs_per_iter {
            if paired.is_empty() {
                break;
            }
            let epoch_id = (outer * cfg.spin_epochs_per_iter + epoch) as u64;
            for idx in epoch_batches(paired.len(), cfg.training_batch, cfg.seed, epoch_id) {
                let batch: Vec<PreferenceTuple> = idx.iter().map(|&i| paired[i].clone()).collect();
                let stats = preference_step(policy, reference, &batch, &mut optimizer, cfg)?;
                step += 1;
                let mut row = StepMetrics::new(step, "spin");
                fill_losses(&mut row, &[stats]);
                if due(cfg.eval_every, step, step == total_rows) {
                    row.eval_acc = Some(evaluate_preference_accuracy(&*policy, eval_set, cfg.eval_seed)?);
                }
                row.reference_hash = reference.map(|r| param_hash(r.params()));
                observer(&row, &*policy, None)?;
                metrics.push(row);
            }
        }
        last_snapshot = Some(snapshot);
    }
    Ok(RunOutput {
        metrics,
        ema: None,
        reference: if cfg.loss == LossKind::Dpo { last_snapshot } else { None },
        buffer: None,
    })
}

fn offline_loop(
    cfg: &TrainerConfig,
    dataset: &[SftExample],
    policy: &mut dyn PolicyModel,
    observer: &mut Observer<'_>,
) -> Result<RunOutput> {
    check_inputs(cfg, dataset, policy)?;
    let paired: Vec<PreferenceTuple> = dataset
        .iter()
        .map(|ex| {
            ex.rejected
                .clone()
                .map(|rejected| PreferenceTuple {
                    prompt: ex.prompt.clone(),
                    chosen: ex.chosen.clone(),
                    rejected,
                })
                .ok_or_else(|| {
                    SapoError::Config(format!(
                        "offline_paired needs a rejected response (example {})",
                        ex.id
                    ))
                })
        })
        .collect::<Result<_>>()?;
    let reference = initial_reference(cfg, policy);
    let mut optimizer = Optimizer::new(cfg.optimizer, policy.param_count());
    let eval_set = eval_slice(dataset, cfg.eval_size);
    let total_rows = cfg.epochs * paired.len().div_ceil(cfg.training_batch);
    let mut metrics = Vec::with_capacity(total_rows);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for idx in epoch_batches(paired.len(), cfg.training_batch, cfg.seed, epoch as u64) {
            let batch: Vec<PreferenceTuple> = idx.iter().map(|&i| paired[i].clone()).collect();
            let stats = preference_step(policy, reference.as_deref(), &batch, &mut optimizer, cfg)?;
            step += 1;
            let mut row = StepMetrics::new(step, "offline");
            fill_losses(&mut row, &[stats]);
            if due(cfg.eval_every, step, step == total_rows) {
                row.eval_acc = Some(evaluate_preference_accuracy(&*policy, eval_set, cfg.eval_seed)?);
            }
            row.reference_hash = reference.as_ref().map(|r| param_hash(r.params()));
            observer(&row, &*policy, None)?;
            metrics.push(row);
        }
    }
    Ok(RunOutput {
        metrics,
        ema: None,
        reference,
        buffer: None,
    })
}

/// Supervised warm start: mean per-token NLL of chosen responses.
///
/// Batches come from the same shuffle stream as [`run_offline_paired`], so
/// an offline ORPO run with λ = 0 and a matching schedule retraces it exactly.
pub fn run_sft(
    cfg: &SftConfig,
    seed: u64,
    dataset: &[SftExample],
    policy: &mut dyn PolicyModel,
) -> Result<Vec<StepMetrics>> {
    run_sft_observed(cfg, seed, dataset, policy, &mut no_observer)
}

pub fn run_sft_observed(
    cfg: &SftConfig,
    seed: u64,
    dataset: &[SftExample],
    policy: &mut dyn PolicyModel,
    observer: &mut Observer<'_>,
) -> Result<Vec<StepMetrics>> {
    if cfg.batch_size < 1 {
        return Err(SapoError::Config("sft batch_size must be >= 1".into()));
    }
    if !(cfg.learning_rate >= 0.0) {
        return Err(SapoError::Config("sft learning_rate must be >= 0".into()));
    }
    if dataset.is_empty() {
        return Err(SapoError::Config("dataset is empty".into()));
    }
    for ex in dataset {
        ex.validate(policy.vocab_size())?;
    }
    let mut optimizer = Optimizer::new(cfg.optimizer, policy.param_count());
    let eval_set = eval_slice(dataset, cfg.eval_size);
    let mut metrics = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(dataset.len(), cfg.batch_size, seed, epoch as u64);
        let n_batches = batches.len();
        for (b, idx) in batches.into_iter().enumerate() {
            let pairs: Vec<(&TokenSeq, &TokenSeq)> =
                idx.iter().map(|&i| (&dataset[i].prompt, &dataset[i].chosen)).collect();
            let (loss, grad) = sft_loss(&pairs, &*policy)?;
            let grad_norm = apply_gradient(policy, &mut optimizer, grad, cfg.learning_rate, cfg.grad_clip)?;
            step += 1;
            let mut row = StepMetrics::new(step, "sft");
            row.loss_total = Some(loss);
            row.loss_sft = Some(loss);
            row.loss_contrastive = Some(0.0);
            row.grad_norm = Some(grad_norm);
            if b + 1 == n_batches {
                row.eval_acc = Some(evaluate_preference_accuracy(&*policy, eval_set, cfg.eval_seed)?);
            }
            observer(&row, &*policy, None)?;
            metrics.push(row);
        }
    }
    Ok(metrics)
}

/// [`train`] with a no-op observer.
pub fn train_quiet(cfg: &TrainerConfig, dataset: &[SftExample], policy: &mut dyn PolicyModel) -> Result<RunOutput> {
    train(cfg, dataset, policy, &mut no_observer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor, Var};
    use crate::corpus::{generate_dataset, TaskKind, TaskSpec};
    use crate::ema::RefStrategyKind;
    use crate::math::{log_sigmoid, sigmoid};
    use crate::model::{ContextRows, ModelKind, ModelSpec};
    use std::f64::consts::LN_2;

    /// V = 2, next-token logits `[θ, 0]` whatever the context, so
    /// `log p(0) = log σ(θ)` and `log p(1) = log σ(−θ)`.
    #[derive(Debug, Clone)]
    struct Coin {
        theta: Vec<f64>,
    }

    impl PolicyModel for Coin {
        fn kind(&self) -> ModelKind {
            ModelKind::Bigram
        }
        fn spec(&self) -> ModelSpec {
            ModelSpec::bigram(2)
        }
        fn vocab_size(&self) -> usize {
            2
        }
        fn context_window(&self) -> usize {
            1
        }
        fn params(&self) -> &[f64] {
            &self.theta
        }
        fn set_params(&mut self, params: &[f64]) -> Result<()> {
            self.theta = params.to_vec();
            Ok(())
        }
        fn next_token_log_probs(&self, _: &[u32]) -> Vec<f64> {
            vec![log_sigmoid(self.theta[0]), log_sigmoid(-self.theta[0])]
        }
        fn record_log_probs(&self, tape: &mut Tape, params: Var, rows: &ContextRows) -> Result<Var> {
            let signs: Vec<f64> = rows.targets.iter().map(|&t| if t == 0 { 1.0 } else { -1.0 }).collect();
            let n = signs.len();
            let s = tape.constant(Tensor::new(vec![n, 1], signs)?);
            let w = tape.reshape(params, &[1, 1])?;
            let z = tape.matmul(s, w)?;
            let z = tape.reshape(z, &[n])?;
            Ok(tape.log_sigmoid(z))
        }
        fn clone_frozen(&self) -> Box<dyn PolicyModel> {
            Box::new(self.clone())
        }
    }

    fn coin_dataset() -> Vec<SftExample> {
        vec![SftExample {
            id: "0".into(),
            prompt: TokenSeq::new(vec![1]),
            chosen: TokenSeq::new(vec![1, 1]),
            rejected: None,
        }]
    }

    fn copy_data(count: usize, paired: bool) -> Vec<SftExample> {
        generate_dataset(&TaskSpec {
            kind: TaskKind::Copy,
            vocab_size: 8,
            prompt_len: 4,
            response_len: 4,
            count,
            seed: 11,
            paired,
        })
        .unwrap()
    }

    fn small_model() -> Box<dyn PolicyModel> {
        ModelSpec::feedforward(8, 4, 3, 8).build(5).unwrap()
    }

    fn small_cfg(paradigm: Paradigm, loss: LossKind) -> TrainerConfig {
        TrainerConfig {
            paradigm,
            loss,
            iterations: 6,
            sampling_batch: 4,
            training_batch: 4,
            learning_rate: 0.01,
            eval_every: 3,
            spin_iters: 2,
            epochs: 2,
            seed: 3,
            ..TrainerConfig::default()
        }
    }

    #[test]
    fn sapo_trajectory_matches_scalar_oracle() {
        // Greedy full regeneration from θ_EMA > 0 always yields y⁻ = [0, 0].
        // Then log_odds(y⁺) = −θ, log_odds(y⁻) = θ and
        // L = −log σ(−θ) − λ log σ(−2θ), dL/dθ = σ(θ) + 2λ σ(2θ).
        let (lr, lambda) = (0.1, 0.05);
        let cfg = TrainerConfig {
            iterations: 3,
            sampling_batch: 3,
            training_batch: 2,
            learning_rate: lr,
            lambda,
            optimizer: OptimizerKind::Sgd,
            augment: AugmentConfig {
                temperature: 0.0,
                mode: AugmentMode::FullRegen,
                ..AugmentConfig::default()
            },
            eval_every: 0,
            ..TrainerConfig::default()
        };
        let mut policy = Coin { theta: vec![2.0] };
        let out = run_sapo(&cfg, &coin_dataset(), &mut policy).unwrap();

        let mut theta = 2.0f64;
        for row in &out.metrics {
            let loss = -log_sigmoid(-theta) - lambda * log_sigmoid(-2.0 * theta);
            let grad = sigmoid(theta) + 2.0 * lambda * sigmoid(2.0 * theta);
            assert!((row.loss_total.unwrap() - loss).abs() < 1e-14);
            theta -= lr * grad;
        }
        assert!((policy.theta[0] - theta).abs() < 1e-14, "{} vs {theta}", policy.theta[0]);
        assert_eq!(out.buffer.unwrap().len(), 9);
    }

    #[test]
    fn zero_learning_rate_leaves_params_untouched() {
        let data = copy_data(12, true);
        for paradigm in [Paradigm::Sapo, Paradigm::OnPolicy, Paradigm::Spin, Paradigm::OfflinePaired] {
            for loss in [LossKind::Orpo, LossKind::Dpo] {
                let mut cfg = small_cfg(paradigm, loss);
                cfg.learning_rate = 0.0;
                let mut policy = small_model();
                let before = policy.params().to_vec();
                train_quiet(&cfg, &data, policy.as_mut()).unwrap();
                assert_eq!(policy.params(), &before[..], "{paradigm:?} {loss:?}");
            }
        }
    }

    #[test]
    fn single_iteration_trains_on_fresh_tuples() {
        let mut cfg = small_cfg(Paradigm::Sapo, LossKind::Orpo);
        cfg.iterations = 1;
        let mut policy = small_model();
        let out = run_sapo(&cfg, &copy_data(10, false), policy.as_mut()).unwrap();
        let row = &out.metrics[0];
        assert!(row.loss_total.is_some());
        assert_eq!(row.buffer_size, Some(row.generated));
        assert_eq!(row.buffer_mean_count, Some(1.0));
    }

    #[test]
    fn buffer_growth_counts_non_skipped() {
        let mut cfg = small_cfg(Paradigm::Sapo, LossKind::Orpo);
        cfg.buffer_capacity = 10;
        let mut policy = small_model();
        let out = run_sapo(&cfg, &copy_data(10, false), policy.as_mut()).unwrap();
        let mut pushed = 0;
        for row in &out.metrics {
            pushed += row.generated;
            assert_eq!(row.generated + row.skipped, cfg.sampling_batch);
            assert_eq!(row.buffer_size, Some(pushed.min(10)));
        }
    }

    #[test]
    fn on_policy_first_step_equals_sapo() {
        let data = copy_data(10, false);
        let mut cfg = small_cfg(Paradigm::Sapo, LossKind::Orpo);
        cfg.iterations = 1;
        let mut a = small_model();
        let mut b = small_model();
        run_sapo(&cfg, &data, a.as_mut()).unwrap();
        cfg.paradigm = Paradigm::OnPolicy;
        let out = run_on_policy(&cfg, &data, b.as_mut()).unwrap();
        assert_eq!(a.params(), b.params());
        assert!(out.buffer.is_none() && out.metrics[0].buffer_size.is_none());
    }

    #[test]
    fn offline_orpo_without_contrast_is_sft() {
        let data = copy_data(10, true);
        let mut cfg = small_cfg(Paradigm::OfflinePaired, LossKind::Orpo);
        cfg.lambda = 0.0;
        cfg.training_batch = 3;
        let sft = SftConfig {
            epochs: cfg.epochs,
            batch_size: 3,
            learning_rate: cfg.learning_rate,
            optimizer: cfg.optimizer,
            grad_clip: cfg.grad_clip,
            ..SftConfig::default()
        };
        let mut a = small_model();
        let mut b = small_model();
        run_offline_paired(&cfg, &data, a.as_mut()).unwrap();
        run_sft(&sft, cfg.seed, &data, b.as_mut()).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn offline_dpo_starts_at_ln2() {
        let cfg = small_cfg(Paradigm::OfflinePaired, LossKind::Dpo);
        let mut policy = small_model();
        let out = run_offline_paired(&cfg, &copy_data(8, true), policy.as_mut()).unwrap();
        assert!((out.metrics[0].loss_total.unwrap() - LN_2).abs() < 1e-12);
        assert_eq!(out.metrics.len(), 4);
    }

    #[test]
    fn offline_needs_rejected() {
        let cfg = small_cfg(Paradigm::OfflinePaired, LossKind::Orpo);
        let mut policy = small_model();
        let err = run_offline_paired(&cfg, &copy_data(4, false), policy.as_mut()).unwrap_err();
        assert!(matches!(err, SapoError::Config(_)));
    }

    #[test]
    fn spin_without_epochs_is_a_no_op() {
        let mut cfg = small_cfg(Paradigm::Spin, LossKind::Orpo);
        cfg.spin_iters = 1;
        cfg.spin_epochs_per_iter = 0;
        let mut policy = small_model();
        let before = policy.params().to_vec();
        let out = run_spin(&cfg, &copy_data(6, false), policy.as_mut()).unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(policy.params(), &before[..]);
    }

    #[test]
    fn spin_set_is_fixed_within_an_iteration() {
        let cfg = small_cfg(Paradigm::Spin, LossKind::Orpo);
        let data = copy_data(6, false);
        let snap = small_model();
        let a = generate_spin_set(&cfg, &data, snap.as_ref(), 0).unwrap();
        let b = generate_spin_set(&cfg, &data, snap.as_ref(), 0).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|t| t.rejected != t.chosen));
    }

    #[test]
    fn every_paradigm_is_deterministic() {
        let data = copy_data(12, true);
        for paradigm in [Paradigm::Sapo, Paradigm::OnPolicy, Paradigm::Spin, Paradigm::OfflinePaired] {
            let cfg = small_cfg(paradigm, LossKind::Dpo);
            let runs: Vec<_> = (0..2)
                .map(|_| {
                    let mut p = small_model();
                    let out = train_quiet(&cfg, &data, p.as_mut()).unwrap();
                    (param_hash(p.params()), out.metrics)
                })
                .collect();
            assert_eq!(runs[0], runs[1], "{paradigm:?}");
            assert!(runs[0].1.iter().all(|r| r.grad_norm.unwrap() >= 0.0));
        }
    }

    #[test]
    fn fix_ref_keeps_reference_hash() {
        let mut cfg = small_cfg(Paradigm::Sapo, LossKind::Dpo);
        cfg.ref_strategy = RefStrategy {
            kind: RefStrategyKind::FixRef,
            refresh_every: 1,
        };
        let mut policy = small_model();
        let initial = param_hash(policy.params());
        let out = run_sapo(&cfg, &copy_data(8, false), policy.as_mut()).unwrap();
        assert!(out.metrics.iter().all(|r| r.reference_hash.as_deref() == Some(initial.as_str())));
    }

    #[test]
    fn policy_ref_zeroes_margin_every_step() {
        let mut cfg = small_cfg(Paradigm::Sapo, LossKind::Dpo);
        cfg.ref_strategy = RefStrategy {
            kind: RefStrategyKind::PolicyRef,
            refresh_every: 1,
        };
        let mut policy = small_model();
        let out = run_sapo(&cfg, &copy_data(8, false), policy.as_mut()).unwrap();
        for r in &out.metrics {
            assert!(r.margin.unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn observer_sees_every_row() {
        let cfg = small_cfg(Paradigm::Sapo, LossKind::Orpo);
        let mut policy = small_model();
        let mut seen = 0;
        let mut obs = |_: &StepMetrics, _: &dyn PolicyModel, ema: Option<&EmaState>| {
            assert!(ema.is_some());
            seen += 1;
            Ok(())
        };
        train(&cfg, &copy_data(6, false), policy.as_mut(), &mut obs).unwrap();
        assert_eq!(seen, cfg.iterations);
    }

    #[test]
    fn eval_schedule() {
        let cfg = small_cfg(Paradigm::Sapo, LossKind::Orpo);
        let mut policy = small_model();
        let out = run_sapo(&cfg, &copy_data(6, false), policy.as_mut()).unwrap();
        let evaluated: Vec<usize> = out.metrics.iter().filter(|r| r.eval_acc.is_some()).map(|r| r.step).collect();
        assert_eq!(evaluated, vec![3, 6]);
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut cfg = TrainerConfig::default();
        cfg.iterations = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainerConfig::default();
        cfg.grad_clip = Some(0.0);
        assert!(cfg.validate().is_err());
        let json = r#"{"iterations": 3, "bogus": 1}"#;
        assert!(serde_json::from_str::<TrainerConfig>(json).is_err());
    }
}
