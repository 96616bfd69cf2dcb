use serde::{Deserialize, Serialize};

use crate::error::{Result, SapoError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Plain SGD or bias-corrected Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd,
    Adam { m: Vec<f64>, v: Vec<f64>, t: u64 },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, param_count: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam {
                m: vec![0.0; param_count],
                v: vec![0.0; param_count],
                t: 0,
            },
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(SapoError::Contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(SapoError::Numeric(format!(
                "gradient element {i} is not finite ({})",
                grads[i]
            )));
        }
        match self {
            Optimizer::Sgd => {
                for (p, &g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam { m, v, t } => {
                if m.len() != params.len() {
                    return Err(SapoError::Contract("adam state does not match parameters".into()));
                }
                *t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(*t as i32);
                let c2 = 1.0 - ADAM_BETA2.powi(*t as i32);
                for i in 0..params.len() {
                    let g = grads[i];
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_arithmetic() {
        let mut p = [1.0];
        Optimizer::new(OptimizerKind::Sgd, 1).step(&mut p, &[2.0], 0.1).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = [0.5, -1.0, 3.0];
        let mut opt = Optimizer::new(OptimizerKind::Adam, 3);
        opt.step(&mut p, &[1.0; 3], 0.01).unwrap();
        // m̂ = v̂ = 1 → Δ = −lr / (1 + ε)
        let delta = -0.01 / (1.0 + ADAM_EPS);
        for (after, before) in p.iter().zip([0.5, -1.0, 3.0]) {
            assert!((after - before - delta).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut p = [0.25, -4.0];
            let mut opt = Optimizer::new(kind, 2);
            for _ in 0..3 {
                opt.step(&mut p, &[0.0, 0.0], 0.5).unwrap();
            }
            assert_eq!(p, [0.25, -4.0]);
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = [0.0];
        let res = Optimizer::new(OptimizerKind::Sgd, 1).step(&mut p, &[f64::NAN], 0.1);
        assert!(matches!(res, Err(SapoError::Numeric(_))));
    }
}
