//! Training objective `λ · L_act + L_br`.
//!
//! Both terms are means over their indexed elements so that `λ` keeps the
//! same balance for any sequence length.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda: f64,
    /// Positive-sample weight per class; empty means 1 for every class.
    pub pos_class_weight: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 128.0,
            pos_class_weight: Vec::new(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !self.pos_class_weight.is_empty() && self.pos_class_weight.len() != num_classes {
            return Err(Error::Config(format!(
                "{} positive-class weights for {num_classes} classes",
                self.pos_class_weight.len()
            )));
        }
        if self.pos_class_weight.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Config("positive-class weights must be positive".into()));
        }
        Ok(())
    }

    pub fn pos_weights(&self) -> Option<&[f64]> {
        (!self.pos_class_weight.is_empty()).then_some(self.pos_class_weight.as_slice())
    }
}

/// Loss value and its gradient wrt the prediction it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad<G> {
    pub value: f64,
    pub grad: G,
}

/// Weighted binary cross entropy on probabilities (boundary head).
pub fn br_loss(y: &[f64], y_hat: &[f64], w: Option<&[f64]>) -> Result<LossGrad<Vec<f64>>> {
    if y.len() != y_hat.len() || w.is_some_and(|w| w.len() != y.len()) {
        return Err(Error::Dimension(format!(
            "boundary targets {} / predictions {} / weights {}",
            y.len(),
            y_hat.len(),
            w.map_or(y.len(), <[f64]>::len)
        )));
    }
    if y.is_empty() {
        return Ok(LossGrad {
            value: 0.0,
            grad: Vec::new(),
        });
    }
    let inv_n = 1.0 / y.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(y.len());
    for (i, (&t, &p)) in y.iter().zip(y_hat).enumerate() {
        let wi = w.map_or(1.0, |w| w[i]);
        value -= wi * (t * p.ln() + (1.0 - t) * (1.0 - p).ln());
        grad.push(-wi * (t / p - (1.0 - t) / (1.0 - p)) * inv_n);
    }
    Ok(LossGrad {
        value: value * inv_n,
        grad,
    })
}

/// `ln(1 + e^x)` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid + weighted BCE on logits (class head), in log-sum-exp form:
/// `-ln σ(x) = softplus(-x)` and `-ln(1 - σ(x)) = softplus(x)`.
pub fn act_loss(
    y: &Matrix,
    logits: &Matrix,
    pos_weight: Option<&[f64]>,
    w: Option<&Matrix>,
) -> Result<LossGrad<Matrix>> {
    if y.shape() != logits.shape()
        || w.is_some_and(|w| w.shape() != y.shape())
        || pos_weight.is_some_and(|p| p.len() != y.cols())
    {
        return Err(Error::Dimension(format!(
            "class targets {:?} / logits {:?} / weights {:?} / positive weights {:?}",
            y.shape(),
            logits.shape(),
            w.map(Matrix::shape),
            pos_weight.map(<[f64]>::len)
        )));
    }
    let (n, c) = y.shape();
    let count = n * c;
    if count == 0 {
        return Ok(LossGrad {
            value: 0.0,
            grad: Matrix::zeros(n, c),
        });
    }
    let inv = 1.0 / count as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(n, c);
    for i in 0..n {
        for k in 0..c {
            let x = logits.get(i, k);
            let t = y.get(i, k);
            let pc = pos_weight.map_or(1.0, |p| p[k]);
            let wik = w.map_or(1.0, |w| w.get(i, k));
            value += wik * (pc * t * softplus(-x) + (1.0 - t) * softplus(x));
            let s = logistic(x);
            grad.set(i, k, wik * (pc * t * (s - 1.0) + (1.0 - t) * s) * inv);
        }
    }
    Ok(LossGrad {
        value: value * inv,
        grad,
    })
}

pub fn total_loss(act: f64, br: f64, weights: &LossWeights) -> f64 {
    weights.lambda * act + br
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{check_gradient, Param, SIGMOID_EPS};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_act(y: &Matrix, logits: &Matrix, p: &[f64], w: &Matrix) -> f64 {
        let mut s = 0.0;
        for i in 0..y.rows() {
            for c in 0..y.cols() {
                // Plain sigmoid then log; 1 - σ(x) is formed as e^-x / (1 + e^-x)
                // so the oracle stays accurate without the log-sum-exp rewrite.
                let x = logits.get(i, c);
                let sig = 1.0 / (1.0 + (-x).exp());
                let one_minus = (-x).exp() / (1.0 + (-x).exp());
                let one_minus = if one_minus.is_nan() { 1.0 } else { one_minus };
                s += -w.get(i, c)
                    * (p[c] * y.get(i, c) * sig.ln() + (1.0 - y.get(i, c)) * one_minus.ln());
            }
        }
        s / (y.rows() * y.cols()) as f64
    }

    fn naive_br(y: &[f64], p: &[f64], w: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..y.len() {
            let l = -w[i] * (y[i] * p[i].ln() + (1.0 - y[i]) * (1.0 - p[i]).ln());
            s += l;
        }
        s / y.len() as f64
    }

    #[test]
    fn br_closed_forms() {
        let y = [1.0, 0.0, 1.0];
        let perfect = [1.0 - SIGMOID_EPS, SIGMOID_EPS, 1.0 - SIGMOID_EPS];
        let l = br_loss(&y, &perfect, None).unwrap().value;
        assert!(l <= -(1.0 - 1e-7f64).ln() + 1e-15);
        let half = br_loss(&y, &[0.5; 3], None).unwrap().value;
        assert!((half - 2f64.ln()).abs() < 1e-15);
        assert!(br_loss(&y, &[0.5; 2], None).is_err());
    }

    #[test]
    fn act_closed_forms() {
        let y = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let l = act_loss(&y, &Matrix::zeros(2, 2), None, None).unwrap().value;
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let one = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let sat = act_loss(&one, &Matrix::from_rows(&[vec![40.0]]).unwrap(), None, None).unwrap();
        assert!(sat.value < 1e-12 && sat.value >= 0.0);
        let far = act_loss(&one, &Matrix::from_rows(&[vec![-800.0]]).unwrap(), None, None).unwrap();
        assert!((far.value - 800.0).abs() < 1e-9);
        assert!(act_loss(&one, &Matrix::zeros(1, 2), None, None).is_err());
    }

    #[test]
    fn total_is_weighted_sum() {
        let w = LossWeights::default();
        assert_eq!(total_loss(0.0, 0.3, &w), 0.3);
        assert!((total_loss(0.01, 0.5, &w) - 1.78).abs() < 1e-12);
    }

    #[test]
    fn random_instances_match_scalar_oracles_and_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let n = rng.gen_range(1..8);
            let c = rng.gen_range(1..5);
            let y = Matrix::from_vec(n, c, (0..n * c).map(|_| rng.gen_range(0..2) as f64).collect()).unwrap();
            let logits = Matrix::from_vec(n, c, (0..n * c).map(|_| rng.gen_range(-6.0..6.0)).collect()).unwrap();
            let p: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..3.0)).collect();
            let w = Matrix::from_vec(n, c, (0..n * c).map(|_| rng.gen_range(0.5..2.0)).collect()).unwrap();
            let got = act_loss(&y, &logits, Some(&p), Some(&w)).unwrap();
            assert!((got.value - naive_act(&y, &logits, &p, &w)).abs() < 1e-8);

            let mut params = vec![Param::new(logits.clone())];
            params[0].accumulate(&got.grad).unwrap();
            let rep = check_gradient(&mut params, 1e-5, |q| {
                act_loss(&y, &q[0].value, Some(&p), Some(&w)).unwrap().value
            })
            .unwrap();
            assert!(rep.max_rel_error < 1e-4);

            let yb: Vec<f64> = (0..n).map(|_| rng.gen_range(0..2) as f64).collect();
            let pb: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
            let wb: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..2.0)).collect();
            let got = br_loss(&yb, &pb, Some(&wb)).unwrap();
            assert!((got.value - naive_br(&yb, &pb, &wb)).abs() < 1e-12);
            let mut params = vec![Param::new(Matrix::row_vector(pb.clone()))];
            params[0].accumulate_slice(&got.grad).unwrap();
            let rep = check_gradient(&mut params, 1e-6, |q| {
                br_loss(&yb, q[0].value.data(), Some(&wb)).unwrap().value
            })
            .unwrap();
            assert!(rep.max_rel_error < 1e-4);
        }
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate(3).is_ok());
        let bad = LossWeights {
            lambda: 0.0,
            ..Default::default()
        };
        assert!(bad.validate(3).is_err());
        let bad = LossWeights {
            pos_class_weight: vec![1.0, 2.0],
            ..Default::default()
        };
        assert!(bad.validate(3).is_err());
    }

    proptest! {
        #[test]
        fn stable_and_naive_forms_agree(xs in proptest::collection::vec(-30.0f64..30.0, 1..16), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = xs.len();
            let logits = Matrix::from_vec(n, 1, xs).unwrap();
            let y = Matrix::from_vec(n, 1, (0..n).map(|_| rng.gen_range(0..2) as f64).collect()).unwrap();
            let stable = act_loss(&y, &logits, None, None).unwrap().value;
            let naive = naive_act(&y, &logits, &[1.0], &Matrix::from_vec(n, 1, vec![1.0; n]).unwrap());
            prop_assert!((stable - naive).abs() < 1e-8);
            prop_assert!(stable >= 0.0);
        }

        #[test]
        fn br_scales_with_weights(ps in proptest::collection::vec(0.01f64..0.99, 1..12), k in 0.1f64..10.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<f64> = ps.iter().map(|_| rng.gen_range(0..2) as f64).collect();
            let base = br_loss(&y, &ps, None).unwrap().value;
            let scaled = br_loss(&y, &ps, Some(&vec![k; ps.len()])).unwrap().value;
            prop_assert!(base >= 0.0);
            prop_assert!((scaled - k * base).abs() < 1e-9 * (1.0 + scaled.abs()));
        }
    }
}
