//! Tensor-level operations.
//!
//! These route through the same kernels as the tape forward pass, so a
//! value computed here is bitwise identical to the traced one.

use crate::error::{Error, Result};
use crate::kernels as kn;
use crate::tensor::{Scalar, Tensor};

/// Affine map `x @ w + b` with `x` treated as `[*, d_in]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = x.rows_cols();
    if w.shape().len() != 2 || w.shape()[0] != k {
        return Err(Error::ShapeMismatch {
            op: "linear",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let n = w.shape()[1];
    if b.len() != n {
        return Err(Error::ShapeMismatch {
            op: "linear",
            lhs: w.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![T::ZERO; m * n];
    kn::linear(x.data(), w.data(), b.data(), &mut out, m, k, n);
    let mut shape = x.shape().to_vec();
    if shape.is_empty() {
        shape = vec![n];
    } else {
        *shape.last_mut().unwrap() = n;
    }
    Ok(Tensor::from_vec_unchecked(shape, out))
}

/// Per-token normalization over the last extent, then affine.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    if eps <= T::ZERO {
        return Err(Error::invalid("layer_norm", format!("eps must be > 0, got {eps}")));
    }
    let (rows, cols) = x.rows_cols();
    if cols < 1 {
        return Err(Error::invalid("layer_norm", "last extent must be >= 1"));
    }
    if gamma.len() != cols || beta.len() != cols {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let mut mean = vec![T::ZERO; rows];
    let mut rstd = vec![T::ZERO; rows];
    kn::layer_norm_stats(x.data(), rows, cols, eps, &mut mean, &mut rstd);
    let mut out = vec![T::ZERO; rows * cols];
    kn::layer_norm_apply(x.data(), gamma.data(), beta.data(), &mean, &rstd, &mut out, rows, cols);
    Ok(Tensor::from_vec_unchecked(x.shape().to_vec(), out))
}

/// Row softmax over the last extent with max-subtraction. `-inf` entries
/// encode blocked logits and come out as exactly 0; a row of only `-inf`
/// is rejected.
pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cols) = x.rows_cols();
    if cols < 1 {
        return Err(Error::invalid("softmax", "last extent must be >= 1"));
    }
    let mut out = vec![T::ZERO; rows * cols];
    kn::softmax_rows(x.data(), &mut out, rows, cols, |_, _| true)?;
    Ok(Tensor::from_vec_unchecked(x.shape().to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t64(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn softmax_symmetry() {
        let y = softmax_lastdim(&t64(vec![2], vec![0.0, 0.0])).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_blocked_entry_is_exact_zero() {
        let x = Tensor::from_vec_unchecked(vec![2], vec![f64::NEG_INFINITY, 0.0]);
        let y = softmax_lastdim(&x).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_direct_evaluation() {
        // exp(1..3)/sum computed independently in extended precision:
        // 0.09003057, 0.24472847, 0.66524096
        let y = softmax_lastdim(&t64(vec![3], vec![1.0, 2.0, 3.0])).unwrap();
        let expected = [0.09003057, 0.24472847, 0.66524096];
        for (a, e) in y.data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-5, "{a} vs {e}");
        }
    }

    #[test]
    fn softmax_all_neg_inf_rejected() {
        let x = Tensor::from_vec_unchecked(vec![2], vec![f64::NEG_INFINITY; 2]);
        assert!(softmax_lastdim(&x).is_err());
    }

    proptest! {
        // rows are probability vectors; -inf logits get weight exactly 0
        #[test]
        fn softmax_rows_are_distributions(
            data in proptest::collection::vec(-30.0f64..30.0, 12),
            blocked in proptest::collection::vec(proptest::bool::ANY, 12),
        ) {
            prop_assume!(blocked.chunks(4).all(|c| c.iter().any(|b| !b)));
            let vals: Vec<f64> = data.iter().zip(&blocked)
                .map(|(&v, &b)| if b { f64::NEG_INFINITY } else { v })
                .collect();
            let x = Tensor::from_vec_unchecked(vec![3, 4], vals);
            let y = softmax_lastdim(&x).unwrap();
            for r in 0..3 {
                let row = &y.data()[r * 4..(r + 1) * 4];
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                for (j, &p) in row.iter().enumerate() {
                    prop_assert!(p >= 0.0);
                    if blocked[r * 4 + j] {
                        prop_assert_eq!(p, 0.0);
                    }
                }
            }
        }
    }
}
