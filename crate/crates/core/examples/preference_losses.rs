//! DPO and ORPO values at a few operating points, plus log-odds near zero.

use sapo::losses::{dpo_loss, log_odds, orpo_loss, orpo_loss_with, OrpoProb};
use sapo::model::SeqScore;

fn main() -> sapo::Result<()> {
    let s = |sum: f64, len: usize| SeqScore::from_sums(sum, len);

    let sym = dpo_loss(&s(-4.0, 3), &s(-4.0, 3), &s(-7.0, 3), &s(-7.0, 3), 0.1)?;
    println!("DPO with policy == reference: {:.16} (ln 2 = {:.16})", sym.total, std::f64::consts::LN_2);

    for gap in [0.0, 2.0, 10.0, 50.0] {
        let l = dpo_loss(&s(-3.0, 3), &s(-5.0, 3), &s(-9.0 - gap, 3), &s(-9.0, 3), 0.1)?;
        println!("DPO  margin {:>7.3} -> loss {:.6}", l.margin, l.total);
    }

    let eq = orpo_loss(&s(-6.0, 3), &s(-6.0, 3), 0.05)?;
    println!("ORPO equal averages: contrastive {:.16} = 0.05 ln 2", eq.contrastive_term);
    let l = orpo_loss(&s(-3.0, 3), &s(-9.0, 3), 0.05)?;
    println!("ORPO mean-odds: sft {:.6} contrastive {:.6} total {:.6}", l.sft_term, l.contrastive_term, l.total);
    let l = orpo_loss_with(&s(-3.0, 3), &s(-9.0, 3), 0.05, OrpoProb::Product)?;
    println!("ORPO product-odds: contrastive {:.6}", l.contrastive_term);

    for lp in [-50.0, -1.0, -1e-3, -1e-9] {
        println!("log_odds({lp:e}) = {:.6}", log_odds(lp)?);
    }
    Ok(())
}
