//! Generates copy and pattern datasets, writes them as JSONL and reads them back.

use sapo::corpus::{generate_dataset, load_jsonl, satisfies_pattern, write_jsonl, TaskKind, TaskSpec};

fn main() -> sapo::Result<()> {
    let dir = std::env::temp_dir().join("sapo-synthetic-data");
    std::fs::create_dir_all(&dir).ok();

    for kind in [TaskKind::Copy, TaskKind::Pattern] {
        let spec = TaskSpec {
            kind,
            vocab_size: 12,
            prompt_len: 5,
            response_len: 5,
            count: 4,
            seed: 9,
            paired: true,
        };
        let examples = generate_dataset(&spec)?;
        let path = dir.join(format!("{kind:?}.jsonl").to_lowercase());
        write_jsonl(&path, &examples)?;
        let back = load_jsonl(&path, spec.vocab_size)?;
        assert_eq!(back, examples);

        println!("{kind:?} -> {}", path.display());
        for ex in &examples {
            println!(
                "  prompt {:?}  chosen {:?}  rejected {:?}  pattern_ok={}",
                ex.prompt.tokens(),
                ex.chosen.tokens(),
                ex.rejected.as_ref().map(|r| r.tokens()),
                satisfies_pattern(ex.chosen.tokens()),
            );
        }
    }
    Ok(())
}
