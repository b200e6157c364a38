use super::tensor::Tensor4;
use crate::error::Result;
use crate::scalar::Scalar;

pub fn relu<T: Scalar>(input: &Tensor4<T>) -> Tensor4<T> {
    input.map(|v| v.max(T::zero()))
}

/// Passes the gradient where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(grad_out: &Tensor4<T>, input: &Tensor4<T>) -> Result<Tensor4<T>> {
    grad_out.check_same_shape(input)?;
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor4::from_vec(grad_out.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_examples() {
        let x = Tensor4::from_vec([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let x = Tensor4::from_vec([1, 1, 1, 2], vec![-1.0, 2.0]).unwrap();
        let g = Tensor4::from_vec([1, 1, 1, 2], vec![5.0, 5.0]).unwrap();
        assert_eq!(relu_backward(&g, &x).unwrap().data(), &[0.0, 5.0]);
    }
}
