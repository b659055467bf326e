//! Central-difference gradient verification.
//!
//! The checker is the independent oracle for every adjoint in this crate:
//! it never touches the backward pass when estimating derivatives, only the
//! forward evaluation at perturbed points.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Central-difference gradient of a scalar-valued function at `x`.
pub fn central_difference<T, F>(eval: F, x: &Tensor<T>, h: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<T>,
{
    if h.is_nan() || h <= T::zero() {
        return Err(Error::InvalidParam {
            name: "central_difference",
            reason: format!("step size must be positive, got {h}"),
        });
    }
    let two_h = T::cast(2.0) * h;
    let mut grad = vec![T::zero(); x.numel()];
    let mut probe = x.data().to_vec();
    for i in 0..x.numel() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = eval(&Tensor::new(x.shape().to_vec(), probe.clone())?)?;
        probe[i] = orig - h;
        let minus = eval(&Tensor::new(x.shape().to_vec(), probe.clone())?)?;
        probe[i] = orig;
        grad[i] = (plus - minus) / two_h;
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Max over coordinates of |analytic - numeric| / max(|analytic|, 1e-8).
pub fn max_relative_error<T: Scalar>(analytic: &Tensor<T>, numeric: &Tensor<T>) -> Result<T> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::ShapeMismatch {
            op: "max_relative_error",
            lhs: analytic.shape().to_vec(),
            rhs: numeric.shape().to_vec(),
        });
    }
    let floor = T::cast(1e-8);
    let mut worst = T::zero();
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        let err = (a - n).abs() / a.abs().max(floor);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Compares the tape's gradient of a scalar function against central
/// differences and returns the max relative error over coordinates.
///
/// `build` records the function onto a fresh tape given the input leaf and
/// returns the scalar root; it is invoked once at `x` for the analytic
/// gradient and twice per coordinate for the difference quotients.
pub fn finite_diff_check<T, F>(build: F, x: &Tensor<T>, h: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, NodeId) -> Result<NodeId>,
{
    let analytic = {
        let mut tape = Tape::new();
        let leaf = tape.leaf(x.clone());
        let root = build(&mut tape, leaf)?;
        let grads = tape.backward(root)?;
        grads
            .wrt(leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()))
    };
    let numeric = central_difference(
        |point: &Tensor<T>| {
            let mut tape = Tape::new();
            let leaf = tape.leaf(point.clone());
            let root = build(&mut tape, leaf)?;
            Ok(tape.value(root)?.item())
        },
        x,
        h,
    )?;
    max_relative_error(&analytic, &numeric)
}
