use super::tensor::Tensor4;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `L = (1/N) sum_n ||target_n - pred_n||_F^2` (summed over each sample's
/// elements, averaged over the batch) and its gradient `(2/N)(pred - target)`.
pub fn mse_loss<T: Scalar>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<(T, Tensor4<T>)> {
    pred.check_same_shape(target)?;
    let n = pred.batch();
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let inv_n = T::one() / T::from_usize(n).expect("batch size");
    let two_inv_n = inv_n + inv_n;
    let mut total = T::zero();
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            total = total + d * d;
            two_inv_n * d
        })
        .collect();
    Ok((total * inv_n, Tensor4::from_vec(pred.shape(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        let t = Tensor4::from_fn([1, 2, 2, 2], |i| i as f64);
        assert_eq!(mse_loss(&t, &t).unwrap().0, 0.0);
        let p = t.map(|v| v + 1.0);
        let (l, g) = mse_loss(&p, &t).unwrap();
        assert_eq!(l, 8.0);
        assert!(g.data().iter().all(|&v| v == 2.0));
        assert!(mse_loss(&p, &Tensor4::zeros([1, 2, 2, 1])).is_err());
    }

    #[test]
    fn loss_averages_over_batch_only() {
        let t = Tensor4::<f64>::zeros([4, 2, 2, 2]);
        let p = t.map(|_| 1.0);
        assert_eq!(mse_loss(&p, &t).unwrap().0, 8.0);
    }
}
