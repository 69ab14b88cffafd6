//! Central finite-difference checks against tape gradients.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Uniform samples in `[-1, 1)`.
pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("shape and data agree")
}

/// Evaluates the scalar produced by `build` at `inputs` without gradients.
pub fn eval_scalar<F>(inputs: &[Tensor], build: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    Ok(tape.value(out).data()[0])
}

/// Central-difference gradient of the scalar built by `build` with respect to
/// `inputs[which]`.
pub fn numerical_gradient<F>(inputs: &[Tensor], which: usize, build: &F) -> Result<Tensor>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut probe = inputs.to_vec();
    let mut grad = Tensor::zeros(inputs[which].shape());
    for i in 0..inputs[which].numel() {
        let x = inputs[which].data()[i];
        probe[which].data_mut()[i] = x + FD_STEP;
        let plus = eval_scalar(&probe, build)?;
        probe[which].data_mut()[i] = x - FD_STEP;
        let minus = eval_scalar(&probe, build)?;
        probe[which].data_mut()[i] = x;
        grad.data_mut()[i] = (plus - minus) / (2.0 * FD_STEP);
    }
    Ok(grad)
}

/// Largest `|autodiff − fd| / max(1, |fd|)` over all inputs.
pub fn max_relative_error<F>(inputs: &[Tensor], build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    for (k, &v) in vars.iter().enumerate() {
        let numeric = numerical_gradient(inputs, k, &build)?;
        let zeros = Tensor::zeros(inputs[k].shape());
        let analytic = grads.get(v).unwrap_or(&zeros);
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            worst = worst.max((a - n).abs() / n.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Fails with a description when the gradient error reaches `tol`.
pub fn check_gradients<F>(inputs: &[Tensor], tol: f64, build: F) -> std::result::Result<f64, String>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let err = max_relative_error(inputs, build).map_err(|e| e.to_string())?;
    if err < tol {
        Ok(err)
    } else {
        Err(format!("gradient relative error {err:e} exceeds {tol:e}"))
    }
}
