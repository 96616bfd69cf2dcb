//! Runs SAPO, on-policy, SPIN and offline-paired training from one SFT warm
//! start under the same optimizer-step budget and prints a comparison table.
//!
//! cargo run --release --example paradigm_table -- [config.json]

use std::path::PathBuf;

use sapo::cli::{compare_paradigms, format_table, RunConfig};

fn main() -> sapo::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/paradigms.json")));
    let cfg = RunConfig::load(&path)?;
    let rows = compare_paradigms(&cfg)?;
    let table = format_table(&rows);
    print!("{table}");

    std::fs::create_dir_all(&cfg.output_dir).ok();
    let out = cfg.output_dir.join("paradigms.md");
    std::fs::write(&out, &table).map_err(|e| sapo::SapoError::Io { path: out.clone(), source: e })?;
    println!("\nwritten to {}", out.display());
    Ok(())
}
