//! Central-difference verification of reverse-mode gradients.
//!
//! Runs in double precision only. The numeric side never touches the
//! reverse pass, so the two routes stay independent.

use crate::error::{Error, Result};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// A scalar-valued function of one flat tensor that can also report its
/// analytic gradient.
pub trait ScalarFn {
    fn value(&self, x: &Tensor<f64>) -> Result<f64>;
    fn value_and_grad(&self, x: &Tensor<f64>) -> Result<(f64, Tensor<f64>)>;
}

/// Adapter: any closure that builds a tape graph from the input node is a
/// [`ScalarFn`]; the analytic gradient comes from the tape's reverse pass.
pub struct TapeFn<F>(pub F)
where
    F: Fn(&mut Tape<f64>, VarId) -> Result<VarId>;

impl<F> ScalarFn for TapeFn<F>
where
    F: Fn(&mut Tape<f64>, VarId) -> Result<VarId>,
{
    fn value(&self, x: &Tensor<f64>) -> Result<f64> {
        let mut tape = Tape::new();
        let xid = tape.input(x);
        let out = (self.0)(&mut tape, xid)?;
        Ok(tape.scalar(out))
    }

    fn value_and_grad(&self, x: &Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
        let mut tape = Tape::new();
        let xid = tape.input(x);
        let out = (self.0)(&mut tape, xid)?;
        let v = tape.scalar(out);
        tape.backward(out)?;
        let g = tape
            .grad(xid)
            .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
        Ok((v, g))
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Number of checked elements.
    pub n: usize,
    /// Worst relative error over all elements.
    pub max_rel_err: f64,
    /// Index of the worst element when it exceeds the tolerance.
    pub failing_index: Option<usize>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failing_index.is_none()
    }
}

/// Compare the reverse-mode gradient of `f` at `x` against central
/// differences `(f(x + h e_i) - f(x - h e_i)) / 2h`. Relative error uses
/// the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check(f: &dyn ScalarFn, x: &Tensor<f64>, step: f64, tol: f64) -> Result<GradCheckReport> {
    if !(1e-6..=1e-4).contains(&step) {
        return Err(Error::invalid(
            "grad_check",
            format!("step must lie in [1e-6, 1e-4], got {step:e}"),
        ));
    }
    let (value, analytic) = f.value_and_grad(x)?;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "grad_check", index: 0 });
    }

    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    let base = x.data().to_vec();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += step;
        let mut minus = base.clone();
        minus[i] -= step;
        let fp = f.value(&Tensor::from_vec(x.shape().to_vec(), plus)?)?;
        let fm = f.value(&Tensor::from_vec(x.shape().to_vec(), minus)?)?;
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let rel = (a - numeric).abs() / denom;
        if rel > max_rel_err {
            max_rel_err = rel;
            worst = Some(i);
        }
    }
    let failing_index = if max_rel_err > tol { worst } else { None };
    Ok(GradCheckReport {
        n: base.len(),
        max_rel_err,
        failing_index,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_exact() {
        // f(x) = sum(x^2), grad = 2x
        let f = TapeFn(|tape: &mut Tape<f64>, x: VarId| {
            let y = tape.mul(x, x)?;
            Ok(tape.sum(y))
        });
        let x = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let (_, g) = f.value_and_grad(&x).unwrap();
        assert_eq!(g.data(), &[2.0, 4.0, 6.0]);
        let report = grad_check(&f, &x, 1e-5, 1e-8).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
        assert!(report.max_rel_err < 1e-8);
    }

    #[test]
    fn step_out_of_range_rejected() {
        let f = TapeFn(|tape: &mut Tape<f64>, x: VarId| Ok(tape.sum(x)));
        let x = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(grad_check(&f, &x, 1e-3, 1e-4).is_err());
        assert!(grad_check(&f, &x, 1e-7, 1e-4).is_err());
    }

    #[test]
    fn wrong_gradient_reports_failing_index() {
        struct Biased;
        impl ScalarFn for Biased {
            fn value(&self, x: &Tensor<f64>) -> Result<f64> {
                Ok(x.data().iter().map(|v| v * v).sum())
            }
            fn value_and_grad(&self, x: &Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
                let v = self.value(x)?;
                let mut g: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
                g[1] += 0.5; // deliberately wrong
                Ok((v, Tensor::from_vec(x.shape().to_vec(), g)?))
            }
        }
        let x = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let report = grad_check(&Biased, &x, 1e-5, 1e-4).unwrap();
        assert!(!report.passed());
        assert_eq!(report.failing_index, Some(1));
    }
}
