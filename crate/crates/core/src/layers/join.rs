use crate::error::{BnnError, Result};
use crate::tensor::{Real, Tensor};

fn outer_inner(shape: &[usize]) -> (usize, usize) {
    (shape[0], shape[2..].iter().product())
}

/// Joins tensors along the channel axis (axis 1).
pub fn concat_forward<T: Real>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| BnnError::invalid("concat of zero tensors"))?;
    if first.rank() < 2 {
        return Err(BnnError::shape("concat needs tensors of rank at least 2"));
    }
    for t in &inputs[1..] {
        if t.rank() != first.rank()
            || t.dim(0) != first.dim(0)
            || t.shape()[2..] != first.shape()[2..]
        {
            return Err(BnnError::shape(format!(
                "cannot concat {:?} with {:?} along channels",
                first.shape(),
                t.shape()
            )));
        }
    }
    let (n, inner) = outer_inner(first.shape());
    let channels: usize = inputs.iter().map(|t| t.dim(1)).sum();
    let mut out = Vec::with_capacity(n * channels * inner);
    for img in 0..n {
        for t in inputs {
            let block = t.dim(1) * inner;
            out.extend_from_slice(&t.values()[img * block..(img + 1) * block]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[1] = channels;
    Tensor::new(shape, out)
}

/// Splits a channel-axis gradient back into per-input pieces.
pub fn concat_backward<T: Real>(grad: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    if grad.rank() < 2 || channels.iter().sum::<usize>() != grad.dim(1) {
        return Err(BnnError::shape(format!(
            "gradient {:?} does not split into channels {:?}",
            grad.shape(),
            channels
        )));
    }
    let (n, inner) = outer_inner(grad.shape());
    let total = grad.dim(1) * inner;
    let mut parts = Vec::with_capacity(channels.len());
    let mut offset = 0;
    for &c in channels {
        let mut vals = Vec::with_capacity(n * c * inner);
        for img in 0..n {
            let start = img * total + offset;
            vals.extend_from_slice(&grad.values()[start..start + c * inner]);
        }
        let mut shape = grad.shape().to_vec();
        shape[1] = c;
        parts.push(Tensor::new(shape, vals)?);
        offset += c * inner;
    }
    Ok(parts)
}

/// Elementwise sum of two equally shaped tensors.
pub fn residual_add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x + y)
}
