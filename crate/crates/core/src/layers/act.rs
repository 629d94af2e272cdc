use crate::error::Result;
use crate::tensor::{Real, Tensor};

pub fn tanh_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.act_tanh())
}

/// Gradient through `tanh` given its output `y`.
pub fn tanh_backward<T: Real>(y: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    grad.zip_map(y, |g, y| g * (T::one() - y * y))
}

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient through `relu` given its input `x`.
pub fn relu_backward<T: Real>(x: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    grad.zip_map(x, |g, x| if x > T::zero() { g } else { T::zero() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_masks_non_positive() {
        let x = Tensor::new(vec![3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).values(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::full(vec![3], 1.0)).unwrap();
        assert_eq!(g.values(), &[0.0, 0.0, 1.0]);
    }
}
