//! Run configuration, output-directory handling, checkpoints and the
//! `sapo` subcommands.
//!
//! A run configuration is a JSON document:
//!
//! ```json
//! {
//!   "preset": "desk",
//!   "task": {"synthetic": {"kind": "copy", "vocab_size": 16, "count": 500}},
//!   "model": {"kind": "feedforward", "embed_dim": 16, "context_window": 8, "hidden": 64},
//!   "trainer": {"loss": "orpo", "paradigm": "sapo", "iterations": 500},
//!   "sft": {"epochs": 3},
//!   "output_dir": "runs/copy",
//!   "seed": 7
//! }
//! ```
//!
//! `task` is either `{"synthetic": TaskSpec}` or `{"jsonl": "path"}`. The
//! optional `preset` (`"desk"` or `"paper"`) is applied first and explicit
//! keys override it. When `model.vocab_size` is omitted it follows the
//! synthetic task. Unknown keys are rejected everywhere. `SAPO_SEED`
//! overrides `seed`.
//!
//! Every subcommand writes `<command>.resolved.json` into `output_dir`; the
//! file is a complete configuration and re-running from it reproduces the
//! outputs byte for byte.

mod checkpoint;
mod compare;
mod gradcheck;

pub use checkpoint::{Checkpoint, CheckpointHeader, FORMAT_VERSION, MAGIC};
pub use compare::{budgeted, compare_paradigms, format_table, ParadigmRow, PARADIGMS};
pub use gradcheck::{
    check_loss, gradcheck_suite, random_tuples, GradCheckEntry, GRADCHECK_BIGRAM_VOCAB, GRADCHECK_MAX_LEN, GRADCHECK_STEP,
    GRADCHECK_TUPLES,
};

use std::ffi::OsString;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::{evaluate_preference_accuracy, generate_dataset, load_jsonl, mean_chosen_nll, write_jsonl, SftExample, TaskSpec};
use crate::error::{Result, SapoError};
use crate::model::{ModelSpec, PolicyModel};
use crate::rng::derive_seed;
use crate::trainer::{self, param_hash, write_metrics_csv, SftConfig, StepMetrics, TrainerConfig};

pub const SEED_ENV: &str = "SAPO_SEED";
pub const LOCK_FILE: &str = ".sapo.lock";

const STREAM_INIT: u64 = 0x1417;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// The built-in defaults.
    Desk,
    /// β = 0.1, λ = 0.05, α = 0.5, EMA every 2 steps, buffer 2000, segment length 256.
    Paper,
}

impl Preset {
    pub fn overrides(self) -> Value {
        match self {
            Preset::Desk => json!({}),
            Preset::Paper => json!({
                "trainer": {
                    "beta": 0.1,
                    "lambda": 0.05,
                    "ema": {"alpha": 0.5, "update_every": 2},
                    "buffer_capacity": 2000,
                    "augment": {"n_seg": 256}
                }
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSource {
    Synthetic(TaskSpec),
    Jsonl(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    pub task: TaskSource,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub sft: SftConfig,
    /// Starting parameters for `sft` and `train`; fresh initialization when absent.
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    /// Write `checkpoints/step_NNNNNN.ckpt` every this many metrics rows (0 = off).
    #[serde(default)]
    pub checkpoint_every: usize,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

/// Recursively overlays `top` onto `base`; objects merge, everything else replaces.
pub fn deep_merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Parses a configuration document, applying its preset.
    pub fn from_value(value: Value) -> Result<Self> {
        let Value::Object(_) = value else {
            return Err(SapoError::Config("run configuration must be a JSON object".into()));
        };
        let preset: Option<Preset> = match value.get("preset") {
            Some(p) => Some(serde_json::from_value(p.clone()).map_err(|e| SapoError::Config(format!("preset: {e}")))?),
            None => None,
        };
        let mut merged = preset.map_or_else(|| json!({}), Preset::overrides);
        deep_merge(&mut merged, value);

        let task_vocab = merged
            .pointer("/task/synthetic")
            .map(|t| serde_json::from_value::<TaskSpec>(t.clone()))
            .transpose()
            .map_err(|e| SapoError::Config(format!("task: {e}")))?
            .map(|t| t.vocab_size);
        if let (Some(v), None) = (task_vocab, merged.pointer("/model/vocab_size")) {
            let obj = merged.as_object_mut().expect("object");
            let model = obj.entry("model").or_insert_with(|| json!({}));
            if let Value::Object(m) = model {
                m.insert("vocab_size".into(), json!(v));
            }
        }
        let mut cfg: RunConfig = serde_json::from_value(merged).map_err(|e| SapoError::Config(e.to_string()))?;
        cfg.trainer.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, applies `SAPO_SEED` when set.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SapoError::io(path, e))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| SapoError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_value(value)?;
        if let Some(seed) = seed_from_env()? {
            cfg.set_seed(seed);
        }
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.trainer.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.trainer.validate()?;
        if let TaskSource::Synthetic(t) = &self.task {
            t.validate()?;
            if t.vocab_size != self.model.vocab_size {
                return Err(SapoError::Config(format!(
                    "task vocab_size {} differs from model vocab_size {}",
                    t.vocab_size, self.model.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Fully expanded form: no preset, absolute paths.
    pub fn resolved(&self) -> Result<Self> {
        let abs = |p: &Path| std::path::absolute(p).map_err(|e| SapoError::io(p, e));
        let mut out = self.clone();
        out.preset = None;
        out.output_dir = abs(&self.output_dir)?;
        if let TaskSource::Jsonl(p) = &self.task {
            out.task = TaskSource::Jsonl(abs(p)?);
        }
        if let Some(p) = &self.init_checkpoint {
            out.init_checkpoint = Some(abs(p)?);
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn dataset(&self) -> Result<Vec<SftExample>> {
        match &self.task {
            TaskSource::Synthetic(spec) => generate_dataset(spec),
            TaskSource::Jsonl(path) => load_jsonl(path, self.model.vocab_size),
        }
    }

    /// Policy from `init_checkpoint`, or a fresh model seeded from the run seed.
    pub fn initial_policy(&self) -> Result<Box<dyn PolicyModel>> {
        match &self.init_checkpoint {
            Some(path) => {
                let ck = Checkpoint::load(path)?;
                let spec = ck.spec()?;
                if spec != self.model {
                    return Err(SapoError::Config(format!(
                        "checkpoint {} holds {spec:?}, config asks for {:?}",
                        path.display(),
                        self.model
                    )));
                }
                ck.model()
            }
            None => self.model.build(derive_seed(self.seed, &[STREAM_INIT])),
        }
    }
}

fn seed_from_env() -> Result<Option<u64>> {
    std::env::var(SEED_ENV).ok().map(|s| parse_seed(&s)).transpose()
}

fn parse_seed(s: &str) -> Result<u64> {
    s.trim()
        .parse::<u64>()
        .map_err(|_| SapoError::Config(format!("{SEED_ENV} must be a decimal integer, got {s:?}")))
}

/// Sentinel file that keeps two runs from writing the same directory.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| SapoError::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(SapoError::Config(format!(
                "{} is locked by another run (delete {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(SapoError::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Locks the output directory and writes `<command>.resolved.json`.
fn prepare(cfg: &RunConfig, command: &str) -> Result<(RunConfig, OutputLock)> {
    let resolved = cfg.resolved()?;
    let lock = OutputLock::acquire(&resolved.output_dir)?;
    let path = resolved.output_dir.join(format!("{command}.resolved.json"));
    std::fs::write(&path, resolved.to_json()?).map_err(|e| SapoError::io(&path, e))?;
    Ok((resolved, lock))
}

/// Writes `dataset.jsonl` for a synthetic task.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<Value> {
    let TaskSource::Synthetic(spec) = &cfg.task else {
        return Err(SapoError::Config("gen-data needs a synthetic task".into()));
    };
    let examples = generate_dataset(spec)?;
    let (cfg, _lock) = prepare(cfg, "gen-data")?;
    let path = cfg.output_dir.join("dataset.jsonl");
    write_jsonl(&path, &examples)?;
    Ok(json!({"dataset": path, "examples": examples.len()}))
}

/// SFT warm start; writes `sft.ckpt` and `sft_metrics.csv`.
pub fn cmd_sft(cfg: &RunConfig) -> Result<Value> {
    let dataset = cfg.dataset()?;
    let mut policy = cfg.initial_policy()?;
    let (cfg, _lock) = prepare(cfg, "sft")?;
    let metrics = trainer::run_sft(&cfg.sft, cfg.seed, &dataset, policy.as_mut())?;
    let metrics_path = cfg.output_dir.join("sft_metrics.csv");
    write_metrics_csv(&metrics_path, &metrics)?;
    let ck_path = cfg.output_dir.join("sft.ckpt");
    Checkpoint::from_model(policy.as_ref(), None)?.save(&ck_path)?;
    Ok(json!({
        "checkpoint": ck_path,
        "metrics": metrics_path,
        "steps": metrics.len(),
        "final_eval_acc": metrics.iter().rev().find_map(|r| r.eval_acc),
        "param_hash": param_hash(policy.params()),
    }))
}

/// Preference training; writes `final.ckpt`, `metrics.csv`, optional periodic
/// checkpoints and, for SAPO, a `buffer.jsonl` snapshot.
pub fn cmd_train(cfg: &RunConfig) -> Result<Value> {
    let dataset = cfg.dataset()?;
    let mut policy = cfg.initial_policy()?;
    let (cfg, _lock) = prepare(cfg, "train")?;
    let ck_dir = cfg.output_dir.join("checkpoints");
    if cfg.checkpoint_every > 0 {
        std::fs::create_dir_all(&ck_dir).map_err(|e| SapoError::io(&ck_dir, e))?;
    }
    let every = cfg.checkpoint_every;
    let mut rows = 0usize;
    let mut observer = |row: &StepMetrics, p: &dyn PolicyModel, ema: Option<&crate::ema::EmaState>| -> Result<()> {
        rows += 1;
        if every > 0 && rows % every == 0 {
            let path = ck_dir.join(format!("step_{:06}.ckpt", row.step));
            Checkpoint::from_model(p, ema.map(|e| e.shadow()))?.save(&path)?;
        }
        Ok(())
    };
    let out = trainer::train(&cfg.trainer, &dataset, policy.as_mut(), &mut observer)?;

    let metrics_path = cfg.output_dir.join("metrics.csv");
    write_metrics_csv(&metrics_path, &out.metrics)?;
    let ck_path = cfg.output_dir.join("final.ckpt");
    let ck = Checkpoint::from_model(policy.as_ref(), out.ema.as_ref().map(|e| e.shadow()))?;
    ck.save(&ck_path)?;
    if let Some(buf) = &out.buffer {
        buf.write_jsonl(&cfg.output_dir.join("buffer.jsonl"))?;
    }
    Ok(json!({
        "checkpoint": ck_path,
        "metrics": metrics_path,
        "rows": out.metrics.len(),
        "final_eval_acc": out.metrics.iter().rev().find_map(|r| r.eval_acc),
        "param_hash": param_hash(policy.params()),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub pref_acc: f64,
    pub mean_chosen_nll: f64,
    pub examples: usize,
}

/// Preference accuracy and chosen NLL of a checkpoint on the configured dataset.
pub fn evaluate_checkpoint(ck: &Checkpoint, dataset: &[SftExample], corruptor_seed: u64) -> Result<EvalReport> {
    let model = ck.model()?;
    for ex in dataset {
        ex.validate(model.vocab_size())?;
    }
    Ok(EvalReport {
        pref_acc: evaluate_preference_accuracy(model.as_ref(), dataset, corruptor_seed)?,
        mean_chosen_nll: mean_chosen_nll(model.as_ref(), dataset)?,
        examples: dataset.len(),
    })
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let dataset = cfg.dataset()?;
    let report = evaluate_checkpoint(&ck, &dataset, cfg.trainer.eval_seed)?;
    let (cfg, _lock) = prepare(cfg, "eval")?;
    let path = cfg.output_dir.join("eval.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| SapoError::io(&path, e))?;
    Ok(report)
}

/// Feed-forward shape used by `gradcheck` when no configuration is given.
pub fn default_gradcheck_model() -> ModelSpec {
    ModelSpec::feedforward(16, 8, 4, 16)
}

pub fn cmd_gradcheck(cfg: Option<&RunConfig>, seed: u64, ff_tol: f64, bigram_tol: f64) -> Result<Vec<GradCheckEntry>> {
    let spec = match cfg {
        Some(c) if c.model.kind == crate::model::ModelKind::Feedforward => c.model.clone(),
        _ => default_gradcheck_model(),
    };
    let seed = cfg.map_or(seed, |c| c.seed);
    let entries = gradcheck_suite(&spec, seed, bigram_tol, ff_tol)?;
    if let Some(c) = cfg {
        let (c, _lock) = prepare(c, "gradcheck")?;
        let path = c.output_dir.join("gradcheck.json");
        std::fs::write(&path, serde_json::to_string_pretty(&entries)? + "\n").map_err(|e| SapoError::io(&path, e))?;
    }
    Ok(entries)
}

#[derive(Debug, Parser)]
#[command(name = "sapo", version, about = "Self-augmented preference optimization on tiny language models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset into <output_dir>/dataset.jsonl.
    GenData {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Supervised warm start on chosen responses.
    Sft {
        #[arg(short, long)]
        config: PathBuf,
        /// JSONL dataset replacing the configured task.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Starting checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Preference training with the configured paradigm.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Preference accuracy and chosen NLL of a checkpoint.
    Eval {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Finite-difference check of both losses over both models.
    Gradcheck {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Tolerance for the feed-forward model.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1e-5)]
        bigram_tol: f64,
    },
}

fn load_with(config: &Path, dataset: Option<PathBuf>, init: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(d) = dataset {
        cfg.task = TaskSource::Jsonl(d);
    }
    if init.is_some() {
        cfg.init_checkpoint = init;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(SapoError::io("<stdout>", e)),
        _ => Ok(()),
    }
}

/// Executes one parsed command; the returned code is the process exit status.
pub fn execute(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData { config } => print_json(&cmd_gen_data(&RunConfig::load(&config)?)?)?,
        Command::Sft { config, dataset, init } => print_json(&cmd_sft(&load_with(&config, dataset, init)?)?)?,
        Command::Train { config, dataset, init } => print_json(&cmd_train(&load_with(&config, dataset, init)?)?)?,
        Command::Eval {
            config,
            checkpoint,
            dataset,
        } => print_json(&cmd_eval(&load_with(&config, dataset, None)?, &checkpoint)?)?,
        Command::Gradcheck {
            config,
            seed,
            tol,
            bigram_tol,
        } => {
            let cfg = config.as_deref().map(RunConfig::load).transpose()?;
            let entries = cmd_gradcheck(cfg.as_ref(), seed, tol, bigram_tol)?;
            print_json(&entries)?;
            if entries.iter().any(|e| !e.passed) {
                return Ok(4);
            }
        }
    }
    Ok(0)
}

/// Parses `args` and runs the command, reporting errors on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("sapo: {e}");
            e.exit_code()
        }
    }
}
