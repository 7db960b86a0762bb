//! Central finite-difference gradient checking at 64-bit precision.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Largest discrepancy found by [`check_gradients`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked elements of |analytic − fd| / max(1, |fd|)
    pub max_rel_error: f64,
    /// (input, flat element) where the maximum occurred
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `step`.
///
/// `f` receives a fresh tape and one variable per entry of `inputs`, and must
/// return a 0-dimensional loss.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut current: Vec<Tensor<f64>> = inputs.iter().map(Tensor::contiguous).collect();
    for which in 0..inputs.len() {
        let base = current[which].to_vec();
        for elem in 0..base.len() {
            let mut probe = |delta: f64| -> Result<f64> {
                let mut vals = base.clone();
                vals[elem] += delta;
                current[which] = Tensor::from_vec(inputs[which].shape(), vals)?;
                eval(&current)
            };
            let plus = probe(step)?;
            let minus = probe(-step)?;
            let fd = (plus - minus) / (2.0 * step);
            let err = (analytic[which][elem] - fd).abs() / fd.abs().max(1.0);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (which, elem);
            }
            report.checked += 1;
        }
        current[which] = inputs[which].contiguous();
    }
    Ok(report)
}
