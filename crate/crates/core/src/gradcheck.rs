//! Central finite-difference check of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::matrix::Matrix;

/// Denominator floor of the relative error, so entries whose gradient is
/// zero in both estimates do not divide by zero.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, RELATIVE_FLOOR)` for one entry.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn evaluate<F>(inputs: &[Matrix<f64>], f: &F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.value(out).item()
}

/// Largest relative error between the tape gradient of the scalar `f` and
/// the fourth-order central difference with step `h`, over every entry of
/// every input. `f` is rebuilt on a fresh tape for each perturbation.
pub fn max_relative_error<F>(inputs: &[Matrix<f64>], h: f64, f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
    let out = f(&mut tape, &vars);
    let mut grads = tape.backward(out);
    let analytic: Vec<Matrix<f64>> =
        vars.iter().zip(inputs).map(|(&v, m)| grads.take_or_zeros(v, m.rows(), m.cols())).collect();

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, m) in inputs.iter().enumerate() {
        for j in 0..m.len() {
            let x = m.as_slice()[j];
            let mut at = |offset: f64| {
                probe[i].as_mut_slice()[j] = x + offset;
                evaluate(&probe, &f)
            };
            let (p1, m1, p2, m2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
            probe[i].as_mut_slice()[j] = x;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            worst = worst.max(relative_error(analytic[i].as_slice()[j], numeric));
        }
    }
    worst
}
