//! Records a small two-layer network on a tape, backpropagates, and checks
//! the gradients against central differences.

use sapo::autodiff::{grad_check, Tape, Tensor};

fn main() -> sapo::Result<()> {
    // f = x * y at (2, 3)
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.0));
    let y = tape.leaf(Tensor::scalar(3.0));
    let f = tape.mul(x, y)?;
    let grads = tape.backward(f)?;
    println!("d(xy)/dx = {:?}, d(xy)/dy = {:?}", grads.wrt(x), grads.wrt(y));

    let input = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect())?;
    let w1 = Tensor::new(vec![4, 5], (0..20).map(|i| (i as f64 * 0.11).cos() * 0.5).collect())?;
    let w2 = Tensor::new(vec![5, 2], (0..10).map(|i| (i as f64 * 0.7).sin()).collect())?;
    let net = |t: &mut Tape, p: &[sapo::autodiff::Var]| {
        let x = t.constant(input.clone());
        let h = t.matmul(x, p[0])?;
        let h = t.tanh(h);
        let o = t.matmul(h, p[1])?;
        let o = t.log_softmax(o)?;
        let picked = t.pick(o, &[0, 1, 1])?;
        let s = t.mean(picked);
        Ok(t.neg(s))
    };
    let report = grad_check(net, &[w1, w2], 1e-6, 1e-6)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
