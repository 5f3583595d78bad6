//! Marginal repair: turns a near-feasible matrix into one with exact
//! prescribed marginals at bounded L1 cost.

use crate::error::SeqotError;
use crate::linalg::{l1_distance_unchecked, Matrix};
use crate::plans::{PlanKind, PlanSet};
use crate::problem::{SeqOTProblem, MARGINAL_SUM_TOL};

/// Outcome of one marginal repair.
#[derive(Debug, Clone)]
pub struct RoundingResult {
    pub rounded: Matrix,
    /// `||P - P~||_1`.
    pub l1_change: f64,
    /// `2 (||P 1 - a||_1 + ||P^T 1 - b||_1)`, which the change never exceeds.
    pub bound: f64,
}

fn check_target(which: &'static str, t: &[f64]) -> Result<(), SeqotError> {
    let sum: f64 = t.iter().sum();
    if (sum - 1.0).abs() > MARGINAL_SUM_TOL || t.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(SeqotError::TargetNotDistribution { which, sum });
    }
    Ok(())
}

/// Repairs `P` to have row marginal `a` and column marginal `b` exactly.
///
/// Three phases: shrink overfull rows by `min(1, a_i/(P 1)_i)`, shrink
/// overfull columns the same way, then spread the missing mass as the
/// rank-one update `err_r err_c^T / ||err_r||_1`. Rows and columns with no
/// mass keep scale 1; there is nothing to shrink there.
pub fn round_to_feasible(
    p: &Matrix,
    a: &[f64],
    b: &[f64],
) -> Result<RoundingResult, SeqotError> {
    if p.rows() != a.len() {
        return Err(SeqotError::LengthMismatch { left: p.rows(), right: a.len() });
    }
    if p.cols() != b.len() {
        return Err(SeqotError::LengthMismatch { left: p.cols(), right: b.len() });
    }
    check_target("a", a)?;
    check_target("b", b)?;
    if !(p.total() > 0.0) {
        return Err(SeqotError::ZeroMassInput);
    }

    let row_change = l1_distance_unchecked(&p.row_sums(), a);
    let col_change = l1_distance_unchecked(&p.col_sums(), b);
    let bound = 2.0 * (row_change + col_change);

    let rows = p.row_sums();
    let row_scale: Vec<f64> =
        rows.iter().zip(a).map(|(&r, &ai)| if r > 0.0 { (ai / r).min(1.0) } else { 1.0 }).collect();
    let mut work = Matrix::from_fn(p.rows(), p.cols(), |r, c| row_scale[r] * p.get(r, c));

    let cols = work.col_sums();
    let col_scale: Vec<f64> =
        cols.iter().zip(b).map(|(&c, &bj)| if c > 0.0 { (bj / c).min(1.0) } else { 1.0 }).collect();
    work = Matrix::from_fn(work.rows(), work.cols(), |r, c| work.get(r, c) * col_scale[c]);

    // Scaling never overshoots, so the residuals are nonnegative up to
    // rounding; clamp the dust.
    let err_r: Vec<f64> =
        work.row_sums().iter().zip(a).map(|(&r, &ai)| (ai - r).max(0.0)).collect();
    let err_c: Vec<f64> =
        work.col_sums().iter().zip(b).map(|(&c, &bj)| (bj - c).max(0.0)).collect();
    let missing: f64 = err_r.iter().sum();
    let rounded = if missing > 0.0 {
        Matrix::from_fn(work.rows(), work.cols(), |r, c| {
            work.get(r, c) + err_r[r] * err_c[c] / missing
        })
    } else {
        work
    };

    let l1_change = rounded.l1_diff(p);
    Ok(RoundingResult { rounded, l1_change, bound })
}

/// Rounds a half-step pair to exact feasibility.
///
/// The shared boundary marginal `s` of the half plans is the rounding
/// target at the boundary: each half plan already matches `s` on one side,
/// so only the edge marginals need repair and the pair stays consistent.
pub fn feasible_pair_m2(half: &PlanSet, problem: &SeqOTProblem) -> Result<PlanSet, SeqotError> {
    if problem.chain_len() != 2 || half.plans.len() != 2 {
        return Err(SeqotError::WrongChainLength {
            expected: 2,
            found: problem.chain_len().max(half.plans.len()),
        });
    }
    let s = half.plans[0].col_sums();
    let first = round_to_feasible(&half.plans[0], &problem.a, &s)?;
    let second = round_to_feasible(&half.plans[1], &s, &problem.b)?;
    Ok(PlanSet {
        plans: vec![first.rounded, second.rounded],
        kind: PlanKind::Rounded,
        iteration: half.iteration,
    })
}
