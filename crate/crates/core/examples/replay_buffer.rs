//! Fills a small replay buffer, samples from it and watches the counters.

use sapo::buffer::ReplayBuffer;
use sapo::corpus::{PreferenceTuple, TokenSeq};

fn tuple(i: u32) -> PreferenceTuple {
    PreferenceTuple {
        prompt: TokenSeq::new(vec![i]),
        chosen: TokenSeq::new(vec![i, i]),
        rejected: TokenSeq::new(vec![i, 0]),
    }
}

fn main() -> sapo::Result<()> {
    let mut buf = ReplayBuffer::new(5)?;
    for i in 1..=7 {
        buf.push(tuple(i));
    }
    println!("after 7 pushes into capacity 5: {:?}", buf.stats());

    for step in 0..4 {
        let batch = buf.sample_batch(3, step)?;
        let ids: Vec<u32> = batch.iter().map(|t| t.prompt.tokens()[0]).collect();
        let counts: Vec<u64> = buf.entries().map(|e| e.count).collect();
        println!("batch {step}: prompts {ids:?}, counts now {counts:?}");
    }
    buf.push(tuple(8));
    println!("{:?}", buf.stats());

    let path = std::env::temp_dir().join("sapo-buffer.jsonl");
    buf.write_jsonl(&path)?;
    println!("snapshot written to {}", path.display());
    Ok(())
}
