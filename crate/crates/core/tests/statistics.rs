//! Seeded frequency tests against chi-square critical values at the 99% level.

use sapo::augment::split_response;
use sapo::buffer::ReplayBuffer;
use sapo::corpus::{PreferenceTuple, TokenSeq};
use sapo::model::{sample_continuation, TabularBigramLM};

/// Upper 1% points of chi-square with 1..=9 degrees of freedom.
const CHI2_99: [f64; 9] = [6.635, 9.210, 11.345, 13.277, 15.086, 16.812, 18.475, 20.090, 21.666];

fn chi_square_uniform(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    let e = n as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum()
}

fn assert_uniform(label: &str, counts: &[usize]) {
    let stat = chi_square_uniform(counts);
    let crit = CHI2_99[counts.len() - 2];
    println!("{label}: counts {counts:?}, chi2 {stat:.3} (critical {crit})");
    assert!(stat < crit, "{label}: chi2 {stat} >= {crit}");
}

fn tuple(id: u32) -> PreferenceTuple {
    PreferenceTuple {
        prompt: TokenSeq::new(vec![id]),
        chosen: TokenSeq::new(vec![id]),
        rejected: TokenSeq::new(vec![id + 1]),
    }
}

#[test]
fn uniform_model_draws_are_uniform() {
    let model = TabularBigramLM::uniform(4);
    let ctx = TokenSeq::new(vec![2]);
    let mut counts = [0usize; 4];
    for seed in 0..10_000 {
        let tok = sample_continuation(&model, &ctx, 1, 1.0, seed).unwrap();
        counts[tok.tokens()[0] as usize] += 1;
    }
    assert_uniform("token draws", &counts);
}

#[test]
fn truncation_point_is_uniform() {
    let chosen = TokenSeq::new((1..=10).collect());
    let mut counts = [0usize; 10];
    for seed in 0..10_000 {
        counts[split_response(&chosen, 3, seed).unwrap().t] += 1;
    }
    assert_uniform("truncation points", &counts);
}

#[test]
fn fresh_buffer_samples_uniformly() {
    let mut buf = ReplayBuffer::new(3).unwrap();
    for i in 1..=3 {
        buf.push(tuple(i));
    }
    let mut counts = [0usize; 3];
    for seed in 0..30_000 {
        counts[buf.sample_positions(1, seed).unwrap()[0]] += 1;
    }
    assert_uniform("buffer draws", &counts);
}

#[test]
fn used_entries_are_drawn_less_often() {
    let mut buf = ReplayBuffer::new(2).unwrap();
    buf.push(tuple(1));
    buf.push(tuple(2));
    let mut seed = 0;
    // bump the second entry once
    while buf.sample_positions(1, seed).unwrap() != [1] {
        seed += 1;
    }
    buf.sample_batch(1, seed).unwrap();
    let counts: Vec<u64> = buf.entries().map(|e| e.count).collect();
    assert_eq!(counts, [0, 1]);

    let n = 30_000;
    let first = (0..n).filter(|&s| buf.sample_positions(1, s).unwrap() == [0]).count();
    let freq = first as f64 / n as f64;
    println!("P(fresh entry) = {freq:.4}, expected 2/3");
    assert!((freq - 2.0 / 3.0).abs() <= 0.02);
}
