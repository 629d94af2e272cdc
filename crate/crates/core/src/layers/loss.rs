use crate::error::{BnnError, Result};
use crate::tensor::{Real, Tensor};

/// Scalar loss and its gradient with respect to the prediction.
pub struct LossOutput<T: Real> {
    pub loss: T,
    pub grad: Tensor<T>,
}

/// Mean softmax cross-entropy over the batch of `N×C` logits.
pub fn softmax_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<LossOutput<T>> {
    if logits.rank() != 2 || logits.dim(0) != labels.len() {
        return Err(BnnError::shape(format!(
            "logits {:?} do not match {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let (n, c) = (logits.dim(0), logits.dim(1));
    if n == 0 {
        return Err(BnnError::invalid("cross-entropy of an empty batch"));
    }
    let inv_n = T::one() / T::from_f64(n as f64);
    let mut grad = vec![T::zero(); n * c];
    let mut total = T::zero();
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(BnnError::invalid(format!("label {label} outside 0..{c}")));
        }
        let row = &logits.values()[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let z: T = exps.iter().copied().sum();
        total = total + z.ln() - (row[label] - max);
        for (j, e) in exps.iter().enumerate() {
            let p = *e / z;
            let target = if j == label { T::one() } else { T::zero() };
            grad[i * c + j] = (p - target) * inv_n;
        }
    }
    Ok(LossOutput {
        loss: total * inv_n,
        grad: Tensor::new(vec![n, c], grad)?,
    })
}

/// Mean squared error over all entries.
pub fn mse_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<LossOutput<T>> {
    pred.expect_same_shape(target)?;
    if pred.is_empty() {
        return Err(BnnError::invalid("squared error of an empty tensor"));
    }
    let inv = T::one() / T::from_f64(pred.len() as f64);
    let diff = pred.zip_map(target, |p, t| p - t)?;
    let loss = diff.values().iter().map(|&d| d * d).sum::<T>() * inv;
    let two = T::from_f64(2.0);
    Ok(LossOutput {
        loss,
        grad: diff.map(|d| two * d * inv),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_classes() {
        let out = softmax_cross_entropy(&Tensor::<f64>::zeros(vec![2, 4]), &[0, 3]).unwrap();
        assert!((out.loss - 4f64.ln()).abs() < 1e-12);
        let row_sums: Vec<f64> = out
            .grad
            .values()
            .chunks(4)
            .map(|r| r.iter().sum())
            .collect();
        assert!(row_sums.iter().all(|s| s.abs() < 1e-12));
    }

    #[test]
    fn bad_label_rejected() {
        assert!(softmax_cross_entropy(&Tensor::<f32>::zeros(vec![1, 3]), &[3]).is_err());
    }
}
