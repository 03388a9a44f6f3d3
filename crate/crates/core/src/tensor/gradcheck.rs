//! Central finite-difference checks of tape gradients.

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Central-difference gradient of a scalar function of a flat vector.
pub fn central_difference<T: Scalar>(f: impl Fn(&[T]) -> T, x: &[T], eps: T) -> Vec<T> {
    let mut probe = x.to_vec();
    let two = T::one() + T::one();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (two * eps)
        })
        .collect()
}

fn evaluate<T: Scalar, F>(f: &F, inputs: &[Tensor<T>]) -> Result<T>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.constant(t)).collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(Error::NonScalarLoss(tape.shape(out).to_vec()));
    }
    Ok(value[0])
}

/// Checks the gradient of `f` with respect to every input tensor and
/// returns the maximum relative error per input.
pub fn grad_check_many<T: Scalar, F>(f: F, inputs: &[Tensor<T>], eps: T) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let first = evaluate(&f, inputs)?;
    let second = evaluate(&f, inputs)?;
    if first.to_f64().map(f64::to_bits) != second.to_f64().map(f64::to_bits) {
        return Err(Error::NonDeterministic {
            first: first.as_f64(),
            second: second.as_f64(),
        });
    }

    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_grad()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut errors = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    let two = T::one() + T::one();
    for (which, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).expect("leaf was marked requires_grad").to_vec();
        let mut worst = 0.0f64;
        for (i, &a) in analytic.iter().enumerate() {
            let orig = probe[which].data()[i];
            probe[which].data_mut()[i] = orig + eps;
            let up = evaluate(&f, &probe)?;
            probe[which].data_mut()[i] = orig - eps;
            let down = evaluate(&f, &probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (up - down) / (two * eps);
            worst = worst.max(relative_error(a.as_f64(), numeric.as_f64()));
        }
        errors.push(worst);
    }
    Ok(errors)
}

/// Maximum relative error between the tape gradient of scalar `f` at `x`
/// and its central finite difference.
pub fn grad_check<T: Scalar, F>(f: F, x: &Tensor<T>, eps: T) -> Result<f64>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let errors = grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)?;
    Ok(errors[0])
}
