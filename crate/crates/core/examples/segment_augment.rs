//! Splits a chosen response into A ⊕ B ⊕ C and regenerates B with a model.

use sapo::augment::{split_response, synthesize_detailed, AugmentConfig, AugmentMode};
use sapo::corpus::TokenSeq;
use sapo::model::ModelSpec;

fn main() -> sapo::Result<()> {
    let prompt = TokenSeq::new(vec![5, 9, 2, 7, 1, 4]);
    let chosen = prompt.clone();
    let generator = ModelSpec::feedforward(10, 8, 6, 32).build(3)?;

    for seed in 0..3 {
        let s = split_response(&chosen, 3, seed)?;
        println!("t={} A={:?} B={:?} C={:?}", s.t, s.a.tokens(), s.b.tokens(), s.c.tokens());
    }

    for mode in [AugmentMode::Segment, AugmentMode::FullRegen] {
        let cfg = AugmentConfig {
            n_seg: 3,
            mode,
            ..AugmentConfig::default()
        };
        for seed in 10..13 {
            match synthesize_detailed(&prompt, &chosen, generator.as_ref(), &cfg, seed)? {
                Some(s) => println!(
                    "{mode:?} seed {seed}: y+ {:?} y- {:?} (t = {:?})",
                    s.tuple.chosen.tokens(),
                    s.tuple.rejected.tokens(),
                    s.split.map(|x| x.t)
                ),
                None => println!("{mode:?} seed {seed}: generator reproduced y+, skipped"),
            }
        }
    }
    Ok(())
}
