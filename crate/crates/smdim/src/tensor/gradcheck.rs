//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, TensorError, Var};

/// A scalar-valued tensor program: builds the loss from the given leaves.
pub trait LossFn: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError> {}
impl<F> LossFn for F where F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError> {}

fn eval(f: &impl LossFn, inputs: &[Tensor]) -> Result<f64, TensorError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    Ok(tape.value(loss).item())
}

/// Compare analytic gradients against central differences on the listed
/// coordinates (`(input index, flat offset)`), returning the max relative
/// error, scaled by `max(|analytic|, |numeric|, 1)`.
pub fn grad_check_coords(
    f: impl LossFn,
    inputs: &[Tensor],
    eps: f64,
    coords: &[(usize, usize)],
) -> Result<f64, TensorError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v, t))
        .collect();

    let mut worst = 0.0f64;
    for &(i, j) in coords {
        let mut plus = inputs.to_vec();
        plus[i].data_mut()[j] += eps;
        let mut minus = inputs.to_vec();
        minus[i].data_mut()[j] -= eps;
        let numeric = (eval(&f, &plus)? - eval(&f, &minus)?) / (2.0 * eps);
        let a = analytic[i].data()[j];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// [`grad_check_coords`] over every coordinate of every input.
pub fn grad_check(f: impl LossFn, inputs: &[Tensor], eps: f64) -> Result<f64, TensorError> {
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    grad_check_coords(f, inputs, eps, &coords)
}
