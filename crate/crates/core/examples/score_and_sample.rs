//! Scores a response under both model kinds and draws continuations.

use sapo::corpus::TokenSeq;
use sapo::model::{sample_continuation, score_sequence, ModelSpec, TabularBigramLM};

fn main() -> sapo::Result<()> {
    let prompt = TokenSeq::new(vec![3, 1, 2]);
    let response = TokenSeq::new(vec![3, 1, 2]);

    let uniform = TabularBigramLM::uniform(4);
    let s = score_sequence(&uniform, &prompt, &response)?;
    println!("uniform bigram: sum {:.6} avg {:.6} per-token {:?}", s.sum_logprob, s.avg_logprob, s.per_token);

    let spec = ModelSpec::feedforward(8, 4, 4, 16);
    let model = spec.build(42)?;
    println!("feed-forward model with {} parameters", model.param_count());
    let s = score_sequence(model.as_ref(), &prompt, &response)?;
    println!("feed-forward: sum {:.6} avg {:.6}", s.sum_logprob, s.avg_logprob);

    for temperature in [0.0, 0.7, 1.0, 2.0] {
        let out = sample_continuation(model.as_ref(), &prompt, 8, temperature, 7)?;
        println!("T={temperature}: {:?}", out.tokens());
    }
    Ok(())
}
