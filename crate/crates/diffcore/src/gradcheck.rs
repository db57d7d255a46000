//! Central finite-difference verification of tape gradients.

use crate::array::DiffArray;
use crate::error::{invalid, DiffError, Result};
use crate::tape::{Tape, Var};

/// Worst disagreement found by a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Input and flat coordinate of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates_checked: usize,
}

/// Relative error with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences of step `eps` at every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[DiffArray], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let all: Vec<Option<Vec<usize>>> = vec![None; inputs.len()];
    grad_check_at(f, inputs, eps, &all)
}

/// Like [`grad_check`], restricted to the listed coordinates per input
/// (`None` checks every coordinate of that input).
pub fn grad_check_at<F>(
    f: F,
    inputs: &[DiffArray],
    eps: f64,
    coordinates: &[Option<Vec<usize>>],
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(invalid("grad_check", format!("eps must lie in (0, 1e-3], got {eps}")));
    }
    if coordinates.len() != inputs.len() {
        return Err(invalid("grad_check", "one coordinate selection per input required"));
    }

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.param(a)).collect();
    let out = f(&tape, &vars)?;
    let value = tape.scalar(out)?;
    if !value.is_finite() {
        return Err(DiffError::NonFinite(value));
    }
    let grads = tape.backward(out)?;

    let eval = |arrays: &[DiffArray]| -> Result<f64> {
        let t = Tape::new();
        let vs: Vec<Var> = arrays.iter().map(|a| t.constant(a)).collect();
        let v = t.scalar(f(&t, &vs)?)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(DiffError::NonFinite(v))
        }
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates_checked: 0,
    };
    let mut work: Vec<DiffArray> = inputs.to_vec();
    for (i, sel) in coordinates.iter().enumerate() {
        let analytic = grads.get(vars[i]).expect("params always receive a gradient").to_vec();
        let indices: Vec<usize> = match sel {
            Some(list) => list.clone(),
            None => (0..inputs[i].len()).collect(),
        };
        for j in indices {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[j], numeric);
            if report.coordinates_checked == 0 || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
                report.analytic = analytic[j];
                report.numeric = numeric;
            }
            report.coordinates_checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_eps() {
        let x = DiffArray::scalar(1.0);
        let f = |t: &Tape, v: &[Var]| t.sum(v[0]);
        assert!(grad_check(f, std::slice::from_ref(&x), 0.0).is_err());
        assert!(grad_check(f, std::slice::from_ref(&x), 1e-2).is_err());
    }

    #[test]
    fn rejects_non_finite_output() {
        let x = DiffArray::scalar(1.0);
        let f = |t: &Tape, v: &[Var]| {
            let big = t.affine(v[0], f64::MAX, 0.0)?;
            let bigger = t.affine(big, 10.0, 0.0)?;
            t.sum(bigger)
        };
        assert!(matches!(grad_check(f, &[x], 1e-6), Err(DiffError::NonFinite(_))));
    }

    #[test]
    fn linear_function_is_exact() {
        let x = DiffArray::vector(vec![0.3, -1.2, 2.5]).unwrap();
        let f = |t: &Tape, v: &[Var]| {
            let y = t.affine(v[0], 3.0, 1.0)?;
            t.sum(y)
        };
        let r = grad_check(f, &[x], 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.coordinates_checked, 3);
    }
}
