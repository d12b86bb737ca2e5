use crate::error::Result;
use crate::ndgrad::tape::{Tape, ValueId};
use crate::ndgrad::tensor::Tensor;

/// Central-difference step used by the verification suites.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Acceptance threshold on the relative error reported below.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Symmetric relative error between an analytic and a numeric derivative:
/// `|a - n| / max(1e-12, |a| + |n|)`. The floor keeps jointly-zero
/// derivatives from dividing by zero.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (1e-12f64).max(analytic.abs() + numeric.abs())
}

/// Worst disagreement found by [`finite_difference_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Total scalar derivatives compared.
    pub checked: usize,
    pub worst_param: usize,
    pub worst_element: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Compares a full analytic gradient against central differences and
/// returns the worst relative error.
///
/// `build` records the scalar program onto a fresh tape each time it is
/// called, reading its inputs through the supplied ids in the order of
/// `params`. The analytic pass runs it once with trainable leaves; every
/// numeric evaluation reruns it with one element nudged by `step` in each
/// direction.
///
/// Piecewise-definition points (relu at zero, the log floor, powf at zero
/// with fractional exponent, max-pool ties) have one-sided derivatives that
/// central differences straddle; callers keep test inputs jittered away
/// from those points rather than the checker special-casing them.
pub fn finite_difference_check<F>(params: &[Tensor], step: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[ValueId]) -> Result<ValueId>,
{
    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = params.iter().map(|p| tape.param(p.clone())).collect();
        let root = build(&mut tape, &ids)?;
        tape.backward(root)?;
        ids.iter()
            .zip(params)
            .map(|(&id, p)| match tape.gradient(id) {
                Some(g) => g.clone(),
                None => Tensor::zeros(p.shape().to_vec()),
            })
            .collect()
    };

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = perturbed.iter().map(|p| tape.constant(p.clone())).collect();
        let root = build(&mut tape, &ids)?;
        Ok(tape.value(root).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst_param: 0,
        worst_element: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };

    let mut work: Vec<Tensor> = params.to_vec();
    for pi in 0..params.len() {
        for e in 0..params[pi].len() {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = orig + step;
            let plus = eval(&work)?;
            work[pi].data_mut()[e] = orig - step;
            let minus = eval(&work)?;
            work[pi].data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi].data()[e];
            let err = rel_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = pi;
                report.worst_element = e;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_verifies() {
        // f(x) = sum(x * x): exact analytic gradient, near-exact central
        // difference; well under tolerance.
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 2.4]).unwrap();
        let report = finite_difference_check(&[x], DEFAULT_STEP, |tape, ids| {
            let sq = tape.mul(ids[0], ids[0])?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.passes(DEFAULT_TOLERANCE), "{report:?}");
    }

    #[test]
    fn corrupted_analytic_gradient_is_flagged() {
        // Fault injection at the comparator: a 1% error on one derivative
        // must exceed the tolerance by a wide margin.
        let err = rel_error(1.01, 1.0);
        assert!(err > DEFAULT_TOLERANCE * 10.0);
        let exact = rel_error(1.0, 1.0 + 1e-9);
        assert!(exact < DEFAULT_TOLERANCE);
    }

    #[test]
    fn zero_gradient_pair_counts_as_agreement() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
    }
}
