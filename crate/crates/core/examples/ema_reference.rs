//! EMA shadow on a scripted trajectory and the three reference strategies.

use sapo::ema::{refresh_reference, EmaConfig, EmaState, RefStrategy, RefStrategyKind};
use sapo::model::{PolicyModel, TabularBigramLM};

fn main() -> sapo::Result<()> {
    for alpha in [0.0, 0.5, 1.0] {
        let mut ema = EmaState::new(&[0.0], EmaConfig { alpha, update_every: 2 })?;
        let mut trace = Vec::new();
        for t in 1..=6 {
            ema.update(&[t as f64])?;
            trace.push(ema.shadow()[0]);
        }
        println!("alpha {alpha}: {trace:?}");
    }

    for kind in [RefStrategyKind::FixRef, RefStrategyKind::PolicyRef, RefStrategyKind::EmaRef] {
        let strategy = RefStrategy { kind, refresh_every: 2 };
        let mut policy = TabularBigramLM::uniform(2);
        let mut reference = TabularBigramLM::uniform(2);
        let mut ema = EmaState::new(policy.params(), EmaConfig { alpha: 0.5, update_every: 1 })?;
        for step in 1..=4u64 {
            let p: Vec<f64> = policy.params().iter().map(|x| x + 1.0).collect();
            policy.set_params(&p)?;
            ema.update(policy.params())?;
            refresh_reference(&strategy, &mut reference, &policy, &ema, step)?;
        }
        println!("{kind:?}: policy {:?} reference {:?}", policy.params(), reference.params());
    }
    Ok(())
}
