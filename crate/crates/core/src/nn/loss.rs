use ndarray::Array2;

use super::Scalar;
use crate::error::{Error, Result};

/// Logistic function, evaluated without overflow for large `|z|`.
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Binary cross-entropy on a logit. Returns the loss and its derivative with
/// respect to the logit, `sigmoid(z) - y`.
pub fn bce_with_logits(z: f64, y: f64) -> (f64, f64) {
    let loss = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    (loss, sigmoid(z) - y)
}

/// Mean squared error over cells where `mask` is set. Returns the loss and
/// the gradient with respect to `pred` (zero outside the mask). An empty
/// mask gives zero loss.
pub fn masked_mse<T: Scalar>(pred: &Array2<T>, target: &Array2<T>, mask: &Array2<bool>) -> Result<(f64, Array2<T>)> {
    if pred.shape() != target.shape() || pred.shape() != mask.shape() {
        return Err(Error::Shape(format!(
            "masked MSE shapes differ: {:?} / {:?} / {:?}",
            pred.shape(),
            target.shape(),
            mask.shape()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    let mut grad = Array2::zeros(pred.raw_dim());
    if count == 0 {
        return Ok((0.0, grad));
    }
    let scale = 2.0 / count as f64;
    let mut total = 0.0;
    ndarray::Zip::from(&mut grad)
        .and(pred)
        .and(target)
        .and(mask)
        .for_each(|g, &p, &t, &m| {
            if m {
                let d = (p - t).to_f64();
                total += d * d;
                *g = T::of(scale * d);
            }
        });
    Ok((total / count as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn bce_gradient_is_p_minus_y() {
        for (z, y) in [(0.3, 1.0), (-2.0, 0.0), (5.0, 0.0), (-40.0, 1.0)] {
            let (_, g) = bce_with_logits(z, y);
            assert!((g - (1.0 / (1.0 + (-z).exp()) - y)).abs() < 1e-15);
            let h = 1e-6;
            let num = (bce_with_logits(z + h, y).0 - bce_with_logits(z - h, y).0) / (2.0 * h);
            assert!((num - g).abs() < 1e-7);
        }
    }

    #[test]
    fn bce_matches_naive_form() {
        let (l, _) = bce_with_logits(0.7, 1.0);
        let p: f64 = sigmoid(0.7);
        assert!((l + p.ln()).abs() < 1e-14);
        let (l, _) = bce_with_logits(-800.0, 1.0);
        assert!((l - 800.0).abs() < 1e-9);
    }

    #[test]
    fn masked_mse_ignores_unmasked_targets() {
        let pred = array![[1.0, 2.0], [3.0, 4.0]];
        let mask = array![[true, false], [false, true]];
        let a = masked_mse(&pred, &array![[0.0, 9.0], [7.0, 2.0]], &mask).unwrap();
        let b = masked_mse(&pred, &array![[0.0, -1e6], [1e9, 2.0]], &mask).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.0, 2.5);
        assert_eq!(a.1, array![[1.0, 0.0], [0.0, 2.0]]);
        let empty = Array2::from_elem((2, 2), false);
        assert_eq!(masked_mse(&pred, &pred, &empty).unwrap().0, 0.0);
    }
}
