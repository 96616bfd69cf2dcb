//! Token-level data model, JSONL datasets, synthetic tasks and the
//! corruption-based preference-accuracy evaluator.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SapoError};
use crate::model::{score_sequence, PolicyModel};
use crate::rng;

/// Immutable sequence of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<u32>);

impl TokenSeq {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self(tokens)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> TokenSeq {
        TokenSeq(self.0[range].to_vec())
    }

    pub fn concat(parts: &[&TokenSeq]) -> TokenSeq {
        TokenSeq(parts.iter().flat_map(|p| p.0.iter().copied()).collect())
    }

    /// Fails unless every id is below `vocab_size`.
    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        match self.0.iter().find(|&&t| t as usize >= vocab_size) {
            Some(bad) => Err(SapoError::Validation(format!(
                "token id {bad} outside vocabulary of size {vocab_size}"
            ))),
            None => Ok(()),
        }
    }
}

impl From<Vec<u32>> for TokenSeq {
    fn from(v: Vec<u32>) -> Self {
        Self(v)
    }
}

/// A prompt with its chosen response, plus a pre-collected rejected one for paired datasets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub id: String,
    pub prompt: TokenSeq,
    pub chosen: TokenSeq,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rejected: Option<TokenSeq>,
}

impl SftExample {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.prompt.is_empty() {
            return Err(SapoError::Validation(format!("example {}: empty prompt", self.id)));
        }
        if self.chosen.is_empty() {
            return Err(SapoError::Validation(format!("example {}: empty chosen", self.id)));
        }
        if matches!(&self.rejected, Some(r) if r.is_empty()) {
            return Err(SapoError::Validation(format!("example {}: empty rejected", self.id)));
        }
        self.prompt.check_vocab(vocab_size)?;
        self.chosen.check_vocab(vocab_size)?;
        if let Some(r) = &self.rejected {
            r.check_vocab(vocab_size)?;
        }
        Ok(())
    }
}

/// `(x, y⁺, y⁻)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceTuple {
    pub prompt: TokenSeq,
    pub chosen: TokenSeq,
    pub rejected: TokenSeq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// The response repeats the prompt.
    Copy,
    /// The response alternates even and odd ids, starting even.
    Pattern,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub prompt_len: usize,
    pub response_len: usize,
    pub count: usize,
    pub seed: u64,
    /// Also emit a corrupted `rejected` response per example.
    pub paired: bool,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Copy,
            vocab_size: 16,
            prompt_len: 6,
            response_len: 6,
            count: 500,
            seed: 0,
            paired: false,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(SapoError::Config(format!(
                "vocab_size must be >= 4, got {}",
                self.vocab_size
            )));
        }
        if self.count < 1 {
            return Err(SapoError::Config("count must be >= 1".into()));
        }
        if self.prompt_len < 1 || self.response_len < 1 {
            return Err(SapoError::Config("prompt_len and response_len must be >= 1".into()));
        }
        if self.kind == TaskKind::Copy && self.prompt_len != self.response_len {
            return Err(SapoError::Config(format!(
                "copy task needs response_len == prompt_len ({} vs {})",
                self.response_len, self.prompt_len
            )));
        }
        Ok(())
    }
}

/// Number of positions [`corrupt`] substitutes: ⌈len/4⌉, at least 1.
pub fn corruption_count(len: usize) -> usize {
    len.div_ceil(4).max(1)
}

/// Replaces ⌈25%⌉ of positions with a different, uniformly drawn non-padding token.
pub fn corrupt(chosen: &TokenSeq, vocab_size: usize, seed: u64) -> TokenSeq {
    let mut rng = rng::stream(seed);
    let mut out = chosen.0.clone();
    let k = corruption_count(out.len()).min(out.len());
    for pos in index::sample(&mut rng, out.len(), k) {
        let orig = out[pos];
        // uniform over {1..V-1} \ {orig}
        let alternatives = if (1..vocab_size as u32).contains(&orig) {
            vocab_size as u32 - 2
        } else {
            vocab_size as u32 - 1
        };
        let mut pick = rng.gen_range(0..alternatives) + 1;
        if (1..vocab_size as u32).contains(&orig) && pick >= orig {
            pick += 1;
        }
        out[pos] = pick;
    }
    TokenSeq(out)
}

/// Rule of the pattern task: strict even/odd alternation, starting even.
pub fn satisfies_pattern(response: &[u32]) -> bool {
    !response.is_empty()
        && response
            .iter()
            .enumerate()
            .all(|(i, &t)| (t % 2 == 0) == (i % 2 == 0))
}

/// Deterministic synthetic dataset.
pub fn generate_dataset(spec: &TaskSpec) -> Result<Vec<SftExample>> {
    spec.validate()?;
    let v = spec.vocab_size as u32;
    let evens: Vec<u32> = (2..v).step_by(2).collect();
    let odds: Vec<u32> = (1..v).step_by(2).collect();
    let mut rng = rng::stream(spec.seed);
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let prompt: Vec<u32> = (0..spec.prompt_len).map(|_| rng.gen_range(1..v)).collect();
        let chosen: Vec<u32> = match spec.kind {
            TaskKind::Copy => prompt.clone(),
            TaskKind::Pattern => (0..spec.response_len)
                .map(|p| {
                    let pool = if p % 2 == 0 { &evens } else { &odds };
                    pool[rng.gen_range(0..pool.len())]
                })
                .collect(),
        };
        let chosen = TokenSeq(chosen);
        let rejected = spec
            .paired
            .then(|| corrupt(&chosen, spec.vocab_size, rng::derive_seed(spec.seed, &[1, i as u64])));
        out.push(SftExample {
            id: i.to_string(),
            prompt: TokenSeq(prompt),
            chosen,
            rejected,
        });
    }
    Ok(out)
}

/// One object per line, keys in the order id, prompt, chosen, rejected.
pub fn write_jsonl(path: &Path, examples: &[SftExample]) -> Result<()> {
    let file = File::create(path).map_err(|e| SapoError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n").map_err(|e| SapoError::io(path, e))?;
    }
    w.flush().map_err(|e| SapoError::io(path, e))
}

#[derive(Deserialize)]
struct RawLine {
    id: Option<String>,
    prompt: TokenSeq,
    chosen: TokenSeq,
    rejected: Option<TokenSeq>,
}

/// Reads a dataset; blank lines are skipped. A missing id becomes the
/// zero-based line index. Parse errors report one-based line numbers.
pub fn load_jsonl(path: &Path, vocab_size: usize) -> Result<Vec<SftExample>> {
    let file = File::open(path).map_err(|e| SapoError::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| SapoError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawLine = serde_json::from_str(&line).map_err(|e| SapoError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        let ex = SftExample {
            id: raw.id.unwrap_or_else(|| idx.to_string()),
            prompt: raw.prompt,
            chosen: raw.chosen,
            rejected: raw.rejected,
        };
        ex.validate(vocab_size)
            .map_err(|e| SapoError::Validation(format!("line {}: {e}", idx + 1)))?;
        out.push(ex);
    }
    Ok(out)
}

/// Seed of the corrupted variant for one example; depends on content only,
/// which makes the evaluator independent of example order.
fn corruption_seed(corruptor_seed: u64, ex: &SftExample) -> u64 {
    let mut parts = Vec::with_capacity(ex.prompt.len() + ex.chosen.len() + 2);
    parts.push(ex.prompt.len() as u64);
    parts.extend(ex.prompt.tokens().iter().map(|&t| t as u64));
    parts.push(ex.chosen.len() as u64);
    parts.extend(ex.chosen.tokens().iter().map(|&t| t as u64));
    rng::derive_seed(corruptor_seed, &parts)
}

/// Corrupted variant of each example's chosen response used by the evaluator.
pub fn eval_corruption(ex: &SftExample, vocab_size: usize, corruptor_seed: u64) -> TokenSeq {
    corrupt(&ex.chosen, vocab_size, corruption_seed(corruptor_seed, ex))
}

/// Fraction of examples whose chosen response has a strictly higher
/// length-normalized log-probability than its corrupted variant.
pub fn evaluate_preference_accuracy(
    model: &dyn PolicyModel,
    examples: &[SftExample],
    corruptor_seed: u64,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(SapoError::Eval("no examples to evaluate".into()));
    }
    let v = model.vocab_size();
    let mut wins = 0usize;
    for ex in examples {
        let corrupted = eval_corruption(ex, v, corruptor_seed);
        let good = score_sequence(model, &ex.prompt, &ex.chosen)?;
        let bad = score_sequence(model, &ex.prompt, &corrupted)?;
        if good.avg_logprob > bad.avg_logprob {
            wins += 1;
        }
    }
    Ok(wins as f64 / examples.len() as f64)
}

/// Mean per-token negative log-likelihood of the chosen responses.
pub fn mean_chosen_nll(model: &dyn PolicyModel, examples: &[SftExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(SapoError::Eval("no examples to evaluate".into()));
    }
    let mut total = 0.0;
    for ex in examples {
        total -= score_sequence(model, &ex.prompt, &ex.chosen)?.avg_logprob;
    }
    Ok(total / examples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TabularBigramLM;

    fn spec(kind: TaskKind) -> TaskSpec {
        TaskSpec {
            kind,
            vocab_size: 8,
            prompt_len: 4,
            response_len: 4,
            count: 20,
            seed: 3,
            paired: false,
        }
    }

    #[test]
    fn copy_chosen_equals_prompt() {
        for ex in generate_dataset(&spec(TaskKind::Copy)).unwrap() {
            assert_eq!(ex.chosen, ex.prompt);
            assert!(ex.prompt.tokens().iter().all(|&t| t != 0));
        }
    }

    #[test]
    fn pattern_rule_examples() {
        assert!(satisfies_pattern(&[0, 1, 4, 3]));
        assert!(!satisfies_pattern(&[0, 2, 4, 6]));
        assert!(!satisfies_pattern(&[1, 2]));
        assert!(!satisfies_pattern(&[]));
    }

    #[test]
    fn generation_is_deterministic() {
        let s = TaskSpec {
            paired: true,
            ..spec(TaskKind::Pattern)
        };
        assert_eq!(generate_dataset(&s).unwrap(), generate_dataset(&s).unwrap());
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = [
            TaskSpec { count: 0, ..spec(TaskKind::Copy) },
            TaskSpec { vocab_size: 3, ..spec(TaskKind::Copy) },
            TaskSpec { response_len: 0, ..spec(TaskKind::Pattern) },
            TaskSpec { response_len: 5, ..spec(TaskKind::Copy) },
        ];
        for s in bad {
            assert!(matches!(generate_dataset(&s), Err(SapoError::Config(_))), "{s:?}");
        }
    }

    #[test]
    fn paired_rejected_differs_in_quarter_of_positions() {
        let s = TaskSpec {
            paired: true,
            response_len: 7,
            prompt_len: 7,
            ..spec(TaskKind::Copy)
        };
        for ex in generate_dataset(&s).unwrap() {
            let r = ex.rejected.unwrap();
            let diff = r
                .tokens()
                .iter()
                .zip(ex.chosen.tokens())
                .filter(|(a, b)| a != b)
                .count();
            assert_eq!(diff, 2);
            assert!(r.tokens().iter().all(|&t| (1..8).contains(&t)));
        }
    }

    #[test]
    fn corruption_count_rounds_up() {
        assert_eq!(corruption_count(1), 1);
        assert_eq!(corruption_count(4), 1);
        assert_eq!(corruption_count(5), 2);
        assert_eq!(corruption_count(8), 2);
        assert_eq!(corruption_count(9), 3);
    }

    #[test]
    fn load_minimal_line_and_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(&p, "{\"prompt\":[1,2],\"chosen\":[3]}\n").unwrap();
        let got = load_jsonl(&p, 8).unwrap();
        assert_eq!(
            got,
            vec![SftExample {
                id: "0".into(),
                prompt: TokenSeq::new(vec![1, 2]),
                chosen: TokenSeq::new(vec![3]),
                rejected: None,
            }]
        );
        std::fs::write(&p, "").unwrap();
        assert!(load_jsonl(&p, 8).unwrap().is_empty());
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(&p, "{\"prompt\":[1],\"chosen\":[]}\n").unwrap();
        assert!(matches!(load_jsonl(&p, 8), Err(SapoError::Validation(_))));
        std::fs::write(&p, "{\"prompt\":[1],\"chosen\":[9]}\n").unwrap();
        assert!(matches!(load_jsonl(&p, 8), Err(SapoError::Validation(_))));
        std::fs::write(&p, "{\"prompt\":[1],\"chosen\":[2]}\n{oops\n").unwrap();
        assert!(matches!(load_jsonl(&p, 8), Err(SapoError::Parse { line: 2, .. })));
    }

    #[test]
    fn written_key_order() {
        let ex = SftExample {
            id: "a".into(),
            prompt: TokenSeq::new(vec![1]),
            chosen: TokenSeq::new(vec![2]),
            rejected: Some(TokenSeq::new(vec![3])),
        };
        assert_eq!(
            serde_json::to_string(&ex).unwrap(),
            r#"{"id":"a","prompt":[1],"chosen":[2],"rejected":[3]}"#
        );
    }

    #[test]
    fn uniform_model_scores_zero_accuracy() {
        let data = generate_dataset(&spec(TaskKind::Copy)).unwrap();
        let m = TabularBigramLM::uniform(8);
        assert_eq!(evaluate_preference_accuracy(&m, &data, 1).unwrap(), 0.0);
        assert!(matches!(
            evaluate_preference_accuracy(&m, &[], 1),
            Err(SapoError::Eval(_))
        ));
    }

    #[test]
    fn certain_model_scores_one() {
        // bigram that deterministically emits 2 after 1 and 3 after 2
        let v = 6;
        let mut logits = vec![0.0; v * v];
        logits[v + 2] = 200.0;
        logits[2 * v + 3] = 200.0;
        let m = TabularBigramLM::new(v, logits).unwrap();
        let ex = SftExample {
            id: "0".into(),
            prompt: TokenSeq::new(vec![1]),
            chosen: TokenSeq::new(vec![2, 3]),
            rejected: None,
        };
        assert_eq!(evaluate_preference_accuracy(&m, &[ex], 5).unwrap(), 1.0);
    }
}
