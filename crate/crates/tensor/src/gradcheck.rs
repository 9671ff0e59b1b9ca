//! Central finite-difference gradient checking on 64-bit tapes.
//!
//! The checker only ever evaluates forward values; it never looks at the
//! gradients a tape produces except to compare them.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of [`check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest per-element `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    /// `(input index, flat element index)` of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub elements: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Denominator floor for the relative error, so elements whose true
/// gradient is zero are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

/// Compares tape gradients of the scalar produced by `build` against
/// central differences with the given `step`, for every element of every
/// input. Inputs are recorded as parameters in order.
pub fn check<F>(inputs: &[Tensor<f64>], step: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).item().expect("scalar output"))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        elements: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).expect("parameter gradient").clone();
        for e in 0..inputs[i].numel() {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.elements += 1;
            if rel > report.max_rel_err || !rel.is_finite() {
                report.max_rel_err = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst = (i, e);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
