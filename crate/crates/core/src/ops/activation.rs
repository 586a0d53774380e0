use crate::tensor::Tensor;

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Subgradient at exactly zero is taken as 0.
pub fn relu_backward(x: &Tensor, upstream: &Tensor) -> Tensor {
    assert_eq!(x.shape(), upstream.shape(), "relu_backward shape mismatch");
    Tensor::from_fn(x.shape(), |i| if x.data()[i] > 0.0 { upstream.data()[i] } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_signs() {
        let neg = Tensor::new(&[3], vec![-1.0, -0.5, -3.0]).unwrap();
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
        let pos = Tensor::new(&[3], vec![1.0, 0.5, 3.0]).unwrap();
        assert_eq!(relu(&pos), pos);
        let x = Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let g = relu_backward(&x, &Tensor::full(&[3], 5.0));
        assert_eq!(g.data(), &[0.0, 0.0, 5.0]);
    }
}
