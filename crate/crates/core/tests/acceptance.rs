//! Acceptance suite. Runs every criterion, prints one line each and exits
//! non-zero when any of them fails.
//!
//! cargo test --release --test acceptance

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use sapo::augment::{split_at, synthesize_detailed, AugmentConfig, AugmentMode};
use sapo::buffer::ReplayBuffer;
use sapo::cli::{compare_paradigms, format_table, gradcheck_suite, RunConfig};
use sapo::corpus::{evaluate_preference_accuracy, PreferenceTuple, TokenSeq};
use sapo::ema::{EmaConfig, EmaState, RefStrategy, RefStrategyKind};
use sapo::losses::{batch_loss, dpo_loss, log_odds, orpo_loss, LossConfig, LossKind, OrpoProb};
use sapo::model::{ModelSpec, SeqScore};
use sapo::trainer::{param_hash, run_sft, train_quiet};

type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn manifest(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(rel)
}

fn symmetry() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let len = rng.gen_range(1..30);
        let pos = SeqScore::from_sums(rng.gen_range(-80.0..-0.01), len);
        let neg = SeqScore::from_sums(rng.gen_range(-80.0..-0.01), len);
        let beta = rng.gen_range(0.0..5.0);
        let d = dpo_loss(&pos, &pos, &neg, &neg, beta).map_err(err)?;
        worst = worst.max((d.total - ln2).abs());

        let lambda = rng.gen_range(0.0..2.0);
        let avg = rng.gen_range(-20.0..-1e-6);
        let o = orpo_loss(
            &SeqScore::from_sums(avg * len as f64, len),
            &SeqScore::from_sums(avg * 3.0, 3),
            lambda,
        )
        .map_err(err)?;
        worst = worst.max((o.contrastive_term - lambda * ln2).abs());
    }
    // through the batch path, with the reference a frozen copy of the policy
    let policy = ModelSpec::feedforward(16, 8, 4, 16).build(3).map_err(err)?;
    let reference = policy.clone_frozen();
    let tuples: Vec<PreferenceTuple> = (1..9u32)
        .map(|i| PreferenceTuple {
            prompt: TokenSeq::new(vec![i, i + 1]),
            chosen: TokenSeq::new(vec![i, i + 2, 3]),
            rejected: TokenSeq::new(vec![i + 3, 1]),
        })
        .collect();
    let cfg = LossConfig { kind: LossKind::Dpo, beta: 0.1, lambda: 0.0, orpo_prob: OrpoProb::Mean };
    let b = batch_loss(&tuples, policy.as_ref(), Some(reference.as_ref()), &cfg).map_err(err)?;
    worst = worst.max((b.breakdown.total - ln2).abs());
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("max deviation {worst:.1e}"))
}

fn gradients() -> Outcome {
    let ff = ModelSpec::feedforward(16, 8, 4, 16);
    let entries = gradcheck_suite(&ff, 0, 1e-5, 1e-4).map_err(err)?;
    let mut parts = Vec::new();
    for e in &entries {
        let label = format!("{:?}/{:?} {:.2e} < {:.0e}", e.model, e.loss, e.max_rel_error, e.tol);
        ensure(e.max_rel_error < e.tol && e.checked > 0, || format!("failed: {label}"))?;
        parts.push(label);
    }
    Ok(parts.join(", "))
}

fn stability() -> Outcome {
    let (lo, hi) = (-50.0f64, -1e-9f64);
    let mut prev = f64::NEG_INFINITY;
    for i in 0..1000 {
        let x = lo + (hi - lo) * i as f64 / 999.0;
        let y = log_odds(x).map_err(err)?;
        ensure(y.is_finite(), || format!("log_odds({x}) = {y}"))?;
        ensure(y > prev, || format!("not increasing at {x}: {prev} then {y}"))?;
        prev = y;
    }
    Ok(format!("1000 points, log_odds(-1e-9) = {prev:.4}"))
}

fn ema_recurrence() -> Outcome {
    let expected: [(f64, [f64; 6]); 3] = [
        (0.0, [0.0, 2.0, 2.0, 4.0, 4.0, 6.0]),
        (0.5, [0.0, 1.0, 1.0, 2.5, 2.5, 4.25]),
        (1.0, [0.0; 6]),
    ];
    for (alpha, want) in expected {
        let mut ema = EmaState::new(&[0.0], EmaConfig { alpha, update_every: 2 }).map_err(err)?;
        for (t, w) in want.iter().enumerate() {
            ema.update(&[(t + 1) as f64]).map_err(err)?;
            ensure(ema.shadow()[0] == *w, || {
                format!("alpha {alpha}, step {}: {} != {w}", t + 1, ema.shadow()[0])
            })?;
        }
    }
    Ok("alpha 0, 0.5, 1 exact over 6 steps with cadence 2".into())
}

fn buffer_semantics() -> Outcome {
    let tuple = |i: u64| PreferenceTuple {
        prompt: TokenSeq::new(vec![1 + (i % 7) as u32]),
        chosen: TokenSeq::new(vec![1]),
        rejected: TokenSeq::new(vec![2]),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ops = 0usize;
    for _ in 0..10_000 {
        let cap = rng.gen_range(1..10);
        let mut buf = ReplayBuffer::new(cap).map_err(err)?;
        let mut pushed = 0u64;
        for _ in 0..rng.gen_range(1..40) {
            if rng.gen_bool(0.6) {
                buf.push(tuple(pushed));
                pushed += 1;
            } else if !buf.is_empty() {
                buf.sample_batch(rng.gen_range(1..6), rng.gen()).map_err(err)?;
            }
            ops += 1;
            let idx: Vec<u64> = buf.entries().map(|e| e.insert_index).collect();
            ensure(idx.windows(2).all(|w| w[0] < w[1]), || format!("order broken: {idx:?}"))?;
            ensure(buf.len() <= cap, || format!("size {} > capacity {cap}", buf.len()))?;
            ensure(idx.first().map_or(true, |&o| o == pushed - buf.len() as u64), || {
                format!("oldest {:?} after {pushed} pushes", idx.first())
            })?;
        }
    }

    let mut buf = ReplayBuffer::new(2).map_err(err)?;
    buf.push(tuple(0));
    buf.push(tuple(1));
    let mut seed = 0;
    while buf.sample_positions(1, seed).map_err(err)? != [1] {
        seed += 1;
    }
    buf.sample_batch(1, seed).map_err(err)?;
    let counts: Vec<u64> = buf.entries().map(|e| e.count).collect();
    ensure(counts == [0, 1], || format!("counts {counts:?}"))?;
    let n = 30_000u64;
    let mut first = 0u64;
    for s in 0..n {
        if buf.sample_positions(1, 1_000_000 + s).map_err(err)? == [0] {
            first += 1;
        }
    }
    let p0 = first as f64 / n as f64;
    let p1 = 1.0 - p0;
    ensure((p0 - 2.0 / 3.0).abs() <= 0.02 && (p1 - 1.0 / 3.0).abs() <= 0.02, || {
        format!("frequencies ({p0:.4}, {p1:.4})")
    })?;
    Ok(format!("10000 interleavings ({ops} ops), draw frequencies ({p0:.4}, {p1:.4})"))
}

fn segments() -> Outcome {
    let mut splits = 0;
    for len in 1..=20u32 {
        let chosen = TokenSeq::new((1..=len).collect());
        for n_seg in 1..=8 {
            for t in 0..len as usize {
                let s = split_at(&chosen, t, n_seg).map_err(err)?;
                ensure(TokenSeq::concat(&[&s.a, &s.b, &s.c]) == chosen, || {
                    format!("len {len}, n_seg {n_seg}, t {t}")
                })?;
                ensure(s.b.len() == n_seg.min(len as usize - t), || format!("|B| at len {len} t {t}"))?;
                splits += 1;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut cases = 0;
    let mut skipped = 0;
    while cases < 1000 {
        let v = rng.gen_range(4..12u32);
        let gen = ModelSpec::feedforward(v as usize, 4, 4, 8).build(rng.gen()).map_err(err)?;
        let prompt = TokenSeq::new((0..rng.gen_range(1..6)).map(|_| rng.gen_range(1..v)).collect());
        let chosen = TokenSeq::new((0..rng.gen_range(1..16)).map(|_| rng.gen_range(1..v)).collect());
        let cfg = AugmentConfig { n_seg: rng.gen_range(1..6), mode: AugmentMode::Segment, ..AugmentConfig::default() };
        let Some(s) = synthesize_detailed(&prompt, &chosen, gen.as_ref(), &cfg, rng.gen()).map_err(err)? else {
            skipped += 1;
            continue;
        };
        let split = s.split.ok_or("segment mode returned no split")?;
        let (y, c) = (s.tuple.rejected.tokens(), chosen.tokens());
        let end = split.t + split.b.len();
        ensure(y.len() == c.len() && y[..split.t] == c[..split.t] && y[end..] == c[end..] && y != c, || {
            format!("case {cases}: {c:?} -> {y:?} (t {}, |B| {})", split.t, split.b.len())
        })?;
        cases += 1;
    }
    Ok(format!("{splits} exhaustive splits, 1000 segment cases ({skipped} identical draws skipped)"))
}

fn end_to_end() -> Outcome {
    let cfg = RunConfig::load(&manifest("configs/copy_sapo_orpo.json")).map_err(err)?;
    let data = cfg.dataset().map_err(err)?;
    ensure(data.len() == 500 && cfg.model.vocab_size == 16, || "config is not the V=16, 500-example copy task".into())?;
    let mut policy = cfg.initial_policy().map_err(err)?;
    run_sft(&cfg.sft, cfg.seed, &data, policy.as_mut()).map_err(err)?;
    let before = evaluate_preference_accuracy(policy.as_ref(), &data, cfg.trainer.eval_seed).map_err(err)?;
    ensure(cfg.trainer.iterations == 500, || "config must run 500 iterations".into())?;
    let out = train_quiet(&cfg.trainer, &data, policy.as_mut()).map_err(err)?;
    let after = evaluate_preference_accuracy(policy.as_ref(), &data, cfg.trainer.eval_seed).map_err(err)?;
    let tail = &out.metrics[out.metrics.len() - 50..];
    let margins: Vec<f64> = tail.iter().filter_map(|r| r.pref_margin_mean).collect();
    let mean = margins.iter().sum::<f64>() / margins.len().max(1) as f64;
    ensure(after - before >= 0.10, || format!("pref_acc {before:.3} -> {after:.3}"))?;
    ensure(!margins.is_empty() && mean > 0.0, || format!("final-50 mean margin {mean}"))?;
    Ok(format!("pref_acc {before:.3} -> {after:.3}, final-50 mean margin {mean:.3}"))
}

fn paradigm_table() -> Outcome {
    let cfg = RunConfig::load(&manifest("configs/paradigms.json")).map_err(err)?;
    let first = compare_paradigms(&cfg).map_err(err)?;
    let second = compare_paradigms(&cfg).map_err(err)?;
    ensure(first.len() == 4, || format!("{} rows", first.len()))?;
    for (a, b) in first.iter().zip(&second) {
        ensure(a.param_hash == b.param_hash && a.metrics_hash == b.metrics_hash, || {
            format!("{:?} differs between runs", a.paradigm)
        })?;
        ensure(a.optimizer_steps > 0, || format!("{:?} took no steps", a.paradigm))?;
    }
    let table = format_table(&first);
    print!("{table}");
    Ok("four paradigms, identical hashes on re-run".into())
}

fn reference_strategies() -> Outcome {
    let base = RunConfig::load(&manifest("configs/copy_sapo_orpo.json")).map_err(err)?;
    let data = base.dataset().map_err(err)?;
    let mut cfg = base.trainer.clone();
    cfg.loss = LossKind::Dpo;
    cfg.iterations = 200;
    cfg.eval_every = 0;

    cfg.ref_strategy = RefStrategy { kind: RefStrategyKind::FixRef, refresh_every: 1 };
    let mut policy = base.initial_policy().map_err(err)?;
    let initial = param_hash(policy.params());
    let out = train_quiet(&cfg, &data, policy.as_mut()).map_err(err)?;
    ensure(out.metrics.len() == 200, || format!("{} rows", out.metrics.len()))?;
    ensure(out.metrics.iter().all(|r| r.reference_hash.as_deref() == Some(initial.as_str())), || {
        "fix_ref reference hash changed".into()
    })?;
    ensure(param_hash(policy.params()) != initial, || "policy never moved".into())?;

    cfg.ref_strategy = RefStrategy { kind: RefStrategyKind::PolicyRef, refresh_every: 1 };
    let mut policy = base.initial_policy().map_err(err)?;
    let out = train_quiet(&cfg, &data, policy.as_mut()).map_err(err)?;
    let mut worst = 0.0f64;
    for r in &out.metrics {
        let m = r.margin.ok_or_else(|| format!("step {} has no margin", r.step))?;
        worst = worst.max(m.abs());
    }
    ensure(worst <= 1e-12, || format!("policy_ref margin {worst:e}"))?;
    Ok(format!("fix_ref hash constant over 200 steps; policy_ref max |margin| {worst:.1e}"))
}

fn full_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let run = dir.path().join("run");
    let cfg_path = dir.path().join("train.json");
    let cfg = json!({
        "preset": "desk",
        "task": {"synthetic": {"kind": "pattern", "vocab_size": 12, "prompt_len": 4, "response_len": 8, "count": 120, "seed": 4}},
        "model": {"kind": "feedforward", "embed_dim": 8, "context_window": 6, "hidden": 32},
        "trainer": {"loss": "dpo", "paradigm": "sapo", "iterations": 60, "eval_every": 20},
        "checkpoint_every": 25,
        "output_dir": run,
        "seed": 21
    });
    std::fs::write(&cfg_path, cfg.to_string()).map_err(err)?;
    let sapo = |config: &Path| -> Result<Value, String> {
        let out = Command::new(env!("CARGO_BIN_EXE_sapo"))
            .args(["train", "-c"])
            .arg(config)
            .env_remove("SAPO_SEED")
            .output()
            .map_err(err)?;
        ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
        serde_json::from_slice(&out.stdout).map_err(err)
    };
    let read = |name: &str| std::fs::read(run.join(name)).map_err(err);

    sapo(&cfg_path)?;
    let (csv, ck) = (read("metrics.csv")?, read("final.ckpt")?);
    let resolved = dir.path().join("copy.resolved.json");
    std::fs::copy(run.join("train.resolved.json"), &resolved).map_err(err)?;
    std::fs::remove_dir_all(&run).map_err(err)?;
    std::fs::create_dir_all(&run).map_err(err)?;
    sapo(&resolved)?;
    ensure(read("metrics.csv")? == csv, || "metrics.csv differs".into())?;
    ensure(read("final.ckpt")? == ck, || "final.ckpt differs".into())?;
    ensure(std::fs::read(run.join("train.resolved.json")).map_err(err)? == std::fs::read(&resolved).map_err(err)?, || {
        "resolved config is not a fixed point".into()
    })?;
    Ok(format!("metrics.csv ({} bytes) and final.ckpt ({} bytes) byte-identical", csv.len(), ck.len()))
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let criteria = [
        Criterion { id: 1, name: "loss symmetry", limit: Duration::from_secs(1), run: symmetry },
        Criterion { id: 2, name: "gradient fidelity", limit: Duration::from_secs(30), run: gradients },
        Criterion { id: 3, name: "log-odds stability", limit: Duration::from_secs(1), run: stability },
        Criterion { id: 4, name: "EMA recurrence", limit: Duration::from_secs(1), run: ema_recurrence },
        Criterion { id: 5, name: "buffer semantics", limit: Duration::from_secs(10), run: buffer_semantics },
        Criterion { id: 6, name: "segment construction", limit: Duration::from_secs(5), run: segments },
        Criterion { id: 7, name: "end-to-end learning", limit: Duration::from_secs(300), run: end_to_end },
        Criterion { id: 8, name: "paradigm comparison", limit: Duration::from_secs(1200), run: paradigm_table },
        Criterion { id: 9, name: "reference strategies", limit: Duration::from_secs(120), run: reference_strategies },
        Criterion { id: 10, name: "full determinism", limit: Duration::MAX, run: full_determinism },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(c.run).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let outcome = outcome.and_then(|msg| {
            if took <= c.limit {
                Ok(msg)
            } else {
                Err(format!("took {took:.2?}, limit {:?}", c.limit))
            }
        });
        match outcome {
            Ok(msg) => println!("PASS  {:>2}  {:<22} {:>9.2?}  {msg}", c.id, c.name, took),
            Err(msg) => {
                failed += 1;
                println!("FAIL  {:>2}  {:<22} {:>9.2?}  {msg}", c.id, c.name, took);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
