//! Policy models: the [`PolicyModel`] contract, a tabular bigram LM and a
//! fixed-window feed-forward LM.
//!
//! Every model keeps its parameters in one flat `Vec<f64>`. Training binds
//! that vector as a single tape leaf and the model slices it into tensors,
//! so the gradient comes back flat and lines up with optimizers, the EMA
//! shadow and checkpoints without any packing step.
//!
//! Contexts shorter than the window are left-padded with token 0, which
//! synthetic tasks never emit.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::corpus::TokenSeq;
use crate::error::{Result, SapoError};
use crate::math;
use crate::rng;

/// Reserved padding / begin-of-context token.
pub const PAD_TOKEN: u32 = 0;

const INIT_SCALE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Bigram,
    Feedforward,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Bigram => "bigram",
            ModelKind::Feedforward => "feedforward",
        })
    }
}

/// Architecture description. `embed_dim`, `context_window` and `hidden` are
/// ignored by the bigram model (its window is always 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub context_window: usize,
    pub hidden: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            kind: ModelKind::Feedforward,
            vocab_size: 32,
            embed_dim: 16,
            context_window: 8,
            hidden: 64,
        }
    }
}

impl ModelSpec {
    pub fn bigram(vocab_size: usize) -> Self {
        Self {
            kind: ModelKind::Bigram,
            vocab_size,
            embed_dim: 0,
            context_window: 1,
            hidden: 0,
        }
    }

    pub fn feedforward(vocab_size: usize, embed_dim: usize, context_window: usize, hidden: usize) -> Self {
        Self {
            kind: ModelKind::Feedforward,
            vocab_size,
            embed_dim,
            context_window,
            hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(SapoError::Config(format!(
                "vocab_size must be >= 2, got {}",
                self.vocab_size
            )));
        }
        if self.kind == ModelKind::Feedforward
            && (self.embed_dim == 0 || self.context_window == 0 || self.hidden == 0)
        {
            return Err(SapoError::Config(
                "feedforward model needs embed_dim, context_window and hidden >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Named tensor shapes in flat-vector order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let v = self.vocab_size;
        match self.kind {
            ModelKind::Bigram => vec![("logits", vec![v, v])],
            ModelKind::Feedforward => {
                let (d, w, h) = (self.embed_dim, self.context_window, self.hidden);
                vec![
                    ("embedding", vec![v, d]),
                    ("hidden_weight", vec![w * d, h]),
                    ("hidden_bias", vec![h]),
                    ("output_weight", vec![h, v]),
                    ("output_bias", vec![v]),
                ]
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Recovers a spec from the named shapes written by [`ModelSpec::param_shapes`].
    pub fn from_shapes(kind: ModelKind, shapes: &[(String, Vec<usize>)]) -> Result<Self> {
        let find = |name: &str| {
            shapes
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, s)| s.clone())
                .ok_or_else(|| SapoError::Validation(format!("missing shape {name}")))
        };
        let spec = match kind {
            ModelKind::Bigram => match find("logits")?.as_slice() {
                [v, v2] if v == v2 => ModelSpec::bigram(*v),
                other => return Err(SapoError::Validation(format!("bad bigram shape {other:?}"))),
            },
            ModelKind::Feedforward => {
                let emb = find("embedding")?;
                let hid = find("hidden_weight")?;
                let (&[v, d], &[wd, h]) = (emb.as_slice(), hid.as_slice()) else {
                    return Err(SapoError::Validation("bad feedforward shapes".into()));
                };
                if d == 0 || wd % d != 0 {
                    return Err(SapoError::Validation("bad feedforward shapes".into()));
                }
                ModelSpec::feedforward(v, d, wd / d, h)
            }
        };
        let expected = spec.param_shapes();
        let got: Vec<(&str, &Vec<usize>)> = shapes.iter().map(|(n, s)| (n.as_str(), s)).collect();
        let want: Vec<(&str, &Vec<usize>)> = expected.iter().map(|(n, s)| (*n, s)).collect();
        if got != want {
            return Err(SapoError::Validation(format!(
                "shapes {shapes:?} do not describe a {kind} model"
            )));
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Builds a model with parameters uniform in `[-0.05, 0.05]`.
    pub fn build(&self, seed: u64) -> Result<Box<dyn PolicyModel>> {
        self.validate()?;
        let mut rng = rng::stream(seed);
        let params: Vec<f64> = (0..self.param_count())
            .map(|_| rng.gen_range(-INIT_SCALE..=INIT_SCALE))
            .collect();
        self.build_with(params)
    }

    pub fn build_with(&self, params: Vec<f64>) -> Result<Box<dyn PolicyModel>> {
        self.validate()?;
        check_len(params.len(), self.param_count())?;
        Ok(match self.kind {
            ModelKind::Bigram => Box::new(TabularBigramLM {
                vocab_size: self.vocab_size,
                params,
            }),
            ModelKind::Feedforward => Box::new(FeedForwardLM {
                spec: self.clone(),
                params,
            }),
        })
    }
}

fn check_len(got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(SapoError::Contract(format!(
            "parameter vector has length {got}, model expects {want}"
        )));
    }
    Ok(())
}

/// Per-position training rows: the padded context window and the target token.
#[derive(Debug, Clone)]
pub struct ContextRows {
    pub window: usize,
    /// `rows * window` token ids.
    pub contexts: Vec<usize>,
    pub targets: Vec<usize>,
    /// Response length of each scored sequence, in input order.
    pub lens: Vec<usize>,
}

impl ContextRows {
    /// One row per response token of every `(prompt, response)` pair.
    pub fn build(pairs: &[(&TokenSeq, &TokenSeq)], window: usize) -> Result<Self> {
        let mut rows = ContextRows {
            window,
            contexts: Vec::new(),
            targets: Vec::new(),
            lens: Vec::with_capacity(pairs.len()),
        };
        let mut full = Vec::new();
        for (prompt, response) in pairs {
            if response.is_empty() {
                return Err(SapoError::Contract("cannot score an empty response".into()));
            }
            full.clear();
            full.extend_from_slice(prompt.tokens());
            for &tok in response.tokens() {
                push_window(&mut rows.contexts, &full, window);
                rows.targets.push(tok as usize);
                full.push(tok);
            }
            rows.lens.push(response.len());
        }
        Ok(rows)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Appends the last `window` tokens of `history`, left-padded with [`PAD_TOKEN`].
fn push_window(out: &mut Vec<usize>, history: &[u32], window: usize) {
    let have = history.len().min(window);
    out.extend(std::iter::repeat(PAD_TOKEN as usize).take(window - have));
    out.extend(history[history.len() - have..].iter().map(|&t| t as usize));
}

/// An autoregressive language model over integer tokens.
pub trait PolicyModel: Send + Sync + fmt::Debug {
    fn kind(&self) -> ModelKind;

    fn spec(&self) -> ModelSpec;

    fn vocab_size(&self) -> usize;

    /// Number of most recent tokens the next-token distribution depends on.
    fn context_window(&self) -> usize;

    /// Flat parameter vector; order is stable for the lifetime of the model.
    fn params(&self) -> &[f64];

    fn set_params(&mut self, params: &[f64]) -> Result<()>;

    fn param_count(&self) -> usize {
        self.params().len()
    }

    /// Log-probabilities of the next token given the full history `context`.
    fn next_token_log_probs(&self, context: &[u32]) -> Vec<f64>;

    /// Records target log-probabilities for `rows` on `tape`, reading
    /// parameters from the flat vector `params`. Returns a `[rows]` vector.
    fn record_log_probs(&self, tape: &mut Tape, params: Var, rows: &ContextRows) -> Result<Var>;

    /// Independent deep copy. Gradients only ever reach a model's parameters
    /// through a tape leaf the caller creates, so a clone that is never bound
    /// as a leaf stays frozen.
    fn clone_frozen(&self) -> Box<dyn PolicyModel>;
}

/// Softmax over a `V x V` logit table; row = previous token.
#[derive(Debug, Clone)]
pub struct TabularBigramLM {
    vocab_size: usize,
    params: Vec<f64>,
}

impl TabularBigramLM {
    pub fn new(vocab_size: usize, logits: Vec<f64>) -> Result<Self> {
        check_len(logits.len(), vocab_size * vocab_size)?;
        Ok(Self {
            vocab_size,
            params: logits,
        })
    }

    pub fn uniform(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            params: vec![0.0; vocab_size * vocab_size],
        }
    }
}

impl PolicyModel for TabularBigramLM {
    fn kind(&self) -> ModelKind {
        ModelKind::Bigram
    }

    fn spec(&self) -> ModelSpec {
        ModelSpec::bigram(self.vocab_size)
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn context_window(&self) -> usize {
        1
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_len(params.len(), self.params.len())?;
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn next_token_log_probs(&self, context: &[u32]) -> Vec<f64> {
        let prev = context.last().copied().unwrap_or(PAD_TOKEN) as usize;
        let v = self.vocab_size;
        let mut row = self.params[prev * v..(prev + 1) * v].to_vec();
        math::log_softmax_in_place(&mut row);
        row
    }

    fn record_log_probs(&self, tape: &mut Tape, params: Var, rows: &ContextRows) -> Result<Var> {
        let v = self.vocab_size;
        let table = tape.slice(params, 0, &[v, v])?;
        let logits = tape.gather_rows(table, &rows.contexts)?;
        let logp = tape.log_softmax(logits)?;
        tape.pick(logp, &rows.targets)
    }

    fn clone_frozen(&self) -> Box<dyn PolicyModel> {
        Box::new(self.clone())
    }
}

/// Concatenated window embeddings → tanh hidden layer → vocabulary logits.
#[derive(Debug, Clone)]
pub struct FeedForwardLM {
    spec: ModelSpec,
    params: Vec<f64>,
}

struct FfLayout {
    emb: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl FeedForwardLM {
    pub fn new(spec: ModelSpec, params: Vec<f64>) -> Result<Self> {
        if spec.kind != ModelKind::Feedforward {
            return Err(SapoError::Config("FeedForwardLM needs a feedforward spec".into()));
        }
        spec.validate()?;
        check_len(params.len(), spec.param_count())?;
        Ok(Self { spec, params })
    }

    fn layout(&self) -> FfLayout {
        let ModelSpec {
            vocab_size: v,
            embed_dim: d,
            context_window: w,
            hidden: h,
            ..
        } = self.spec;
        let emb = 0;
        let w1 = emb + v * d;
        let b1 = w1 + w * d * h;
        let w2 = b1 + h;
        let b2 = w2 + h * v;
        FfLayout { emb, w1, b1, w2, b2 }
    }
}

impl PolicyModel for FeedForwardLM {
    fn kind(&self) -> ModelKind {
        ModelKind::Feedforward
    }

    fn spec(&self) -> ModelSpec {
        self.spec.clone()
    }

    fn vocab_size(&self) -> usize {
        self.spec.vocab_size
    }

    fn context_window(&self) -> usize {
        self.spec.context_window
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_len(params.len(), self.params.len())?;
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn next_token_log_probs(&self, context: &[u32]) -> Vec<f64> {
        let ModelSpec {
            vocab_size: v,
            embed_dim: d,
            context_window: w,
            hidden: h,
            ..
        } = self.spec;
        let l = self.layout();
        let p = &self.params;
        let mut ids = Vec::with_capacity(w);
        push_window(&mut ids, context, w);

        let mut x = Vec::with_capacity(w * d);
        for &id in &ids {
            x.extend_from_slice(&p[l.emb + id * d..l.emb + (id + 1) * d]);
        }
        // same accumulation order as the tape's matmul
        let mut hidden = vec![0.0; h];
        for (k, &xk) in x.iter().enumerate() {
            if xk == 0.0 {
                continue;
            }
            let wrow = &p[l.w1 + k * h..l.w1 + (k + 1) * h];
            for (o, &wv) in hidden.iter_mut().zip(wrow) {
                *o += xk * wv;
            }
        }
        for (o, &b) in hidden.iter_mut().zip(&p[l.b1..l.b1 + h]) {
            *o = (*o + b).tanh();
        }
        let mut logits = vec![0.0; v];
        for (k, &hk) in hidden.iter().enumerate() {
            if hk == 0.0 {
                continue;
            }
            let wrow = &p[l.w2 + k * v..l.w2 + (k + 1) * v];
            for (o, &wv) in logits.iter_mut().zip(wrow) {
                *o += hk * wv;
            }
        }
        for (o, &b) in logits.iter_mut().zip(&p[l.b2..l.b2 + v]) {
            *o += b;
        }
        math::log_softmax_in_place(&mut logits);
        logits
    }

    fn record_log_probs(&self, tape: &mut Tape, params: Var, rows: &ContextRows) -> Result<Var> {
        let ModelSpec {
            vocab_size: v,
            embed_dim: d,
            context_window: w,
            hidden: h,
            ..
        } = self.spec;
        if rows.window != w {
            return Err(SapoError::Contract(format!(
                "rows built for window {}, model window is {w}",
                rows.window
            )));
        }
        let l = self.layout();
        let n = rows.len();
        let emb = tape.slice(params, l.emb, &[v, d])?;
        let w1 = tape.slice(params, l.w1, &[w * d, h])?;
        let b1 = tape.slice(params, l.b1, &[h])?;
        let w2 = tape.slice(params, l.w2, &[h, v])?;
        let b2 = tape.slice(params, l.b2, &[v])?;

        let looked_up = tape.gather_rows(emb, &rows.contexts)?;
        let x = tape.reshape(looked_up, &[n, w * d])?;
        let pre = tape.matmul(x, w1)?;
        let pre = tape.add_row(pre, b1)?;
        let hidden = tape.tanh(pre);
        let logits = tape.matmul(hidden, w2)?;
        let logits = tape.add_row(logits, b2)?;
        let logp = tape.log_softmax(logits)?;
        tape.pick(logp, &rows.targets)
    }

    fn clone_frozen(&self) -> Box<dyn PolicyModel> {
        Box::new(self.clone())
    }
}

/// Log-probability of a response under a model, in nats.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqScore {
    pub sum_logprob: f64,
    pub per_token: Vec<f64>,
    pub avg_logprob: f64,
}

impl SeqScore {
    pub fn from_per_token(per_token: Vec<f64>) -> Self {
        let sum: f64 = per_token.iter().sum();
        Self {
            sum_logprob: sum,
            avg_logprob: sum / per_token.len() as f64,
            per_token,
        }
    }

    /// Score carrying only aggregates, for loss arithmetic on given values.
    pub fn from_sums(sum_logprob: f64, len: usize) -> Self {
        Self {
            sum_logprob,
            per_token: Vec::new(),
            avg_logprob: sum_logprob / len as f64,
        }
    }
}

/// `per_token[i] = log P(response[i] | prompt ⊕ response[..i])`.
pub fn score_sequence(model: &dyn PolicyModel, prompt: &TokenSeq, response: &TokenSeq) -> Result<SeqScore> {
    if response.is_empty() {
        return Err(SapoError::Contract("cannot score an empty response".into()));
    }
    let mut history = prompt.tokens().to_vec();
    let mut per_token = Vec::with_capacity(response.len());
    for &tok in response.tokens() {
        let logp = model.next_token_log_probs(&history);
        per_token.push(logp[tok as usize]);
        history.push(tok);
    }
    Ok(SeqScore::from_per_token(per_token))
}

/// Differentiable sequence scores for a batch, as `[batch]` vectors on the tape.
#[derive(Debug, Clone, Copy)]
pub struct ScoreVars {
    pub sum: Var,
    pub avg: Var,
}

/// Records sum and length-normalized log-probabilities of each pair.
pub fn score_on_tape(
    tape: &mut Tape,
    model: &dyn PolicyModel,
    params: Var,
    pairs: &[(&TokenSeq, &TokenSeq)],
) -> Result<ScoreVars> {
    let rows = ContextRows::build(pairs, model.context_window())?;
    let logp = model.record_log_probs(tape, params, &rows)?;
    let sum = tape.segment_sum(logp, &rows.lens)?;
    let inv_len = tape.constant(Tensor::vector(
        rows.lens.iter().map(|&n| 1.0 / n as f64).collect(),
    ));
    let avg = tape.mul(sum, inv_len)?;
    Ok(ScoreVars { sum, avg })
}

/// Draws `max_new` tokens after `context`.
///
/// Temperature 0 is greedy with lowest-id tie-break. Otherwise position `i`
/// uses the uniform keyed by `(seed, i)`, so a continuation is a pure
/// function of its inputs.
pub fn sample_continuation(
    model: &dyn PolicyModel,
    context: &TokenSeq,
    max_new: usize,
    temperature: f64,
    seed: u64,
) -> Result<TokenSeq> {
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(SapoError::Config(format!(
            "temperature must be finite and >= 0, got {temperature}"
        )));
    }
    if max_new == 0 {
        return Err(SapoError::Contract("max_new must be >= 1".into()));
    }
    let mut history = context.tokens().to_vec();
    let mut out = Vec::with_capacity(max_new);
    for pos in 0..max_new {
        let logp = model.next_token_log_probs(&history);
        let tok = if temperature == 0.0 {
            argmax_lowest(&logp)
        } else {
            draw(&logp, temperature, rng::counter_uniform(seed, pos as u64))
        };
        out.push(tok as u32);
        history.push(tok as u32);
    }
    Ok(TokenSeq::new(out))
}

fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from `softmax(logp / temperature)`.
fn draw(logp: &[f64], temperature: f64, u: f64) -> usize {
    let scaled: Vec<f64> = logp.iter().map(|&l| l / temperature).collect();
    let lse = math::log_sum_exp(&scaled);
    let mut cum = 0.0;
    for (i, &s) in scaled.iter().enumerate() {
        cum += (s - lse).exp();
        if u < cum {
            return i;
        }
    }
    // rounding left cum slightly below 1: fall back to the last non-zero entry
    scaled.iter().rposition(|&s| s > f64::NEG_INFINITY).unwrap_or(0)
}
