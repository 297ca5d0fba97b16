//! Cross-entropy losses and the gate-gradient inner product.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// One scalar logit, label in {0,1}; the sigmoid form of the loss.
    BinarySigmoid,
    /// A logit vector, label indexes a class; softmax cross-entropy.
    MulticlassSoftmax,
}

/// Cross-entropy of a single prediction. Nonnegative; zero only for an
/// exact prediction.
pub fn loss_ce(prediction: &Tensor, label: usize, mode: LossMode) -> Result<f64> {
    Ok(loss_ce_grad(prediction, label, mode)?.0)
}

/// Loss and its gradient with respect to the logits, for one sample.
pub fn loss_ce_grad(prediction: &Tensor, label: usize, mode: LossMode) -> Result<(f64, Tensor)> {
    match mode {
        LossMode::BinarySigmoid => {
            if prediction.numel() != 1 {
                return Err(Error::ShapeMismatch {
                    context: "binary-sigmoid loss expects one scalar logit",
                    expected: vec![1],
                    got: prediction.shape().to_vec(),
                });
            }
            if label > 1 {
                return Err(Error::LabelOutOfRange { label, classes: 2 });
            }
            let z = prediction.data()[0];
            let y = label as f64;
            // Stable form of -(y ln h + (1-y) ln(1-h)) with h = sigmoid(z).
            let loss = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            let h = 1.0 / (1.0 + (-z).exp());
            let mut grad = Tensor::zeros(prediction.shape());
            grad.data_mut()[0] = h - y;
            Ok((loss, grad))
        }
        LossMode::MulticlassSoftmax => {
            let n = prediction.numel();
            if label >= n {
                return Err(Error::LabelOutOfRange { label, classes: n });
            }
            let logits = prediction.data();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
            let log_sum = max + sum_exp.ln();
            let loss = log_sum - logits[label];
            let mut grad = Tensor::zeros(prediction.shape());
            {
                let gd = grad.data_mut();
                for (i, &v) in logits.iter().enumerate() {
                    gd[i] = (v - max).exp() / sum_exp;
                }
                gd[label] -= 1.0;
            }
            Ok((loss, grad))
        }
    }
}

/// Mean cross-entropy over a batch (factor 1/K).
pub fn loss_ce_batch(predictions: &[Tensor], labels: &[usize], mode: LossMode) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::Config(
            "loss_ce_batch needs matching nonempty predictions and labels".to_string(),
        ));
    }
    let mut total = 0.0;
    for (pred, &label) in predictions.iter().zip(labels) {
        total += loss_ce(pred, label, mode)?;
    }
    Ok(total / predictions.len() as f64)
}

/// Gate gradient at a mixed-operation output: component `j` is the inner
/// product of the upstream loss gradient with candidate `j`'s output.
pub fn loss_grad_gates(dl_dout: &Tensor, candidate_outputs: &[Tensor]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(candidate_outputs.len());
    for v in candidate_outputs {
        if !v.same_shape(dl_dout) {
            return Err(Error::ShapeMismatch {
                context: "loss_grad_gates candidate output",
                expected: dl_dout.shape().to_vec(),
                got: v.shape().to_vec(),
            });
        }
        out.push(dl_dout.dot(v));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_logit_zero_is_ln_two() {
        // h = 0.5, loss = -ln 0.5 ~ 0.693147.
        let loss = loss_ce(&Tensor::scalar(0.0), 1, LossMode::BinarySigmoid).unwrap();
        assert!((loss - (-(0.5f64.ln()))).abs() < 1e-12);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn binary_perfect_prediction_tends_to_zero() {
        let loss = loss_ce(&Tensor::scalar(40.0), 1, LossMode::BinarySigmoid).unwrap();
        assert!((0.0..1e-12).contains(&loss));
        let loss0 = loss_ce(&Tensor::scalar(-40.0), 0, LossMode::BinarySigmoid).unwrap();
        assert!((0.0..1e-12).contains(&loss0));
    }

    #[test]
    fn batch_of_two_is_mean_of_per_sample_losses() {
        let a = Tensor::scalar(0.3);
        let b = Tensor::scalar(-1.1);
        let la = loss_ce(&a, 1, LossMode::BinarySigmoid).unwrap();
        let lb = loss_ce(&b, 0, LossMode::BinarySigmoid).unwrap();
        let batch = loss_ce_batch(&[a, b], &[1, 0], LossMode::BinarySigmoid).unwrap();
        assert!((batch - 0.5 * (la + lb)).abs() < 1e-15);
    }

    #[test]
    fn multiclass_label_out_of_range_is_rejected() {
        let logits = Tensor::new(vec![3], vec![0.0, 1.0, 2.0]).unwrap();
        assert!(matches!(
            loss_ce(&logits, 3, LossMode::MulticlassSoftmax),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn multiclass_loss_matches_direct_formula() {
        let logits = Tensor::new(vec![3], vec![1.0, -0.5, 0.25]).unwrap();
        let (loss, grad) = loss_ce_grad(&logits, 2, LossMode::MulticlassSoftmax).unwrap();
        let exps: Vec<f64> = logits.data().iter().map(|v| v.exp()).collect();
        let sum: f64 = exps.iter().sum();
        assert!((loss + (exps[2] / sum).ln()).abs() < 1e-12);
        // Gradient rows: softmax - one_hot(label).
        for i in 0..3 {
            let expect = exps[i] / sum - if i == 2 { 1.0 } else { 0.0 };
            assert!((grad.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_gradient_binary_hand_case() {
        // K=1, h=0.5, y=1: dL/dz = -0.5, candidate outputs 2 and -2.
        let (_, dz) = loss_ce_grad(&Tensor::scalar(0.0), 1, LossMode::BinarySigmoid).unwrap();
        let v1 = Tensor::scalar(2.0);
        let v2 = Tensor::scalar(-2.0);
        let g = loss_grad_gates(&dz, &[v1, v2]).unwrap();
        assert!((g[0] - (-1.0)).abs() < 1e-12);
        assert!((g[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gate_gradient_zero_residual() {
        // h == y exactly: zero upstream, zero vector out.
        let dz = Tensor::scalar(0.0);
        let g = loss_grad_gates(&dz, &[Tensor::scalar(3.0), Tensor::scalar(-7.0)]).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn gate_gradient_inner_products() {
        let dl = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let v1 = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let v2 = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        let g = loss_grad_gates(&dl, &[v1, v2]).unwrap();
        assert_eq!(g, vec![1.0, -1.0]);
    }

    #[test]
    fn gate_gradient_rejects_shape_mismatch() {
        let dl = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let bad = Tensor::new(vec![3], vec![0.0; 3]).unwrap();
        assert!(loss_grad_gates(&dl, &[bad]).is_err());
    }
}
