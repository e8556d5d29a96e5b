//! Finite-difference verification of tape gradients.

use alloc::vec::Vec;

use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Step of the fourth-order central stencil. Its truncation error is
/// `O(STEP^4)`, so the step can stay large enough that cancellation does not
/// swamp gradients many orders below the loss.
pub const STEP: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst relative error, with denominator `max(|a|, |b|, 1e-8)`.
    pub max_rel_error: f64,
    /// `(input, flat coordinate)` at which the worst error occurred.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compares the tape gradient of the scalar `f` at `point` against
/// fourth-order central differences with step [`STEP`] over every
/// coordinate of every input.
///
/// `f` receives a fresh tape and one leaf per entry of `point`; it must be
/// deterministic (any randomness re-seeded inside `f`). Probe evaluations
/// replay the base point's [`Tape::frozen`] values, so stop-gradient
/// quantities stay fixed exactly as the analytic gradient assumes.
pub fn grad_check<F>(f: F, point: &[DenseArray]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|a| tape.leaf(a.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let frozen = tape.frozen_log().to_vec();

    let eval = |pt: &[DenseArray]| -> Result<f64> {
        let mut tape = Tape::replaying(frozen.clone());
        let vars: Vec<Var> = pt.iter().map(|a| tape.constant(a.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    if !tape.value(out).item().is_finite() {
        return Err(Error::NonFiniteProbe(0));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<DenseArray> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let mut probe: Vec<DenseArray> = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    for (ai, arr) in point.iter().enumerate() {
        for ci in 0..arr.len() {
            let x0 = arr.data()[ci];
            let mut at = |offset: f64| -> Result<f64> {
                probe[ai].data_mut()[ci] = x0 + offset;
                let v = eval(&probe)?;
                probe[ai].data_mut()[ci] = x0;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::NonFiniteProbe(report.coordinates))
                }
            };
            let (p1, m1, p2, m2) = (at(STEP)?, at(-STEP)?, at(2.0 * STEP)?, at(-2.0 * STEP)?);
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * STEP);
            let a = analytic[ai].data()[ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (ai, ci);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = DenseArray::vector(&[1.0, 2.0, 3.0]);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum_all(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[2.0, 4.0, 6.0]);

        let r = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum_all(sq))
            },
            &[x],
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.coordinates, 3);
    }
}
