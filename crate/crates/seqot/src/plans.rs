//! Plan families built from a scaling state, their marginals, and
//! objective/Lagrangian evaluation.

use serde::{Deserialize, Serialize};

use crate::error::SeqotError;
use crate::linalg::Matrix;
use crate::metrics::kl_divergence;
use crate::problem::{Backend, GibbsKernels, SeqOTProblem};
use crate::sinkhorn::{halfstep_marginal_targets, HalfUpdatedBoundary, ScalingState};

/// Entries smaller than this carry no entropy; the `0 log 0 = 0` convention
/// plus floating-point safety.
const ENTROPY_MASS_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanKind {
    Induced,
    Primed,
    HalfStep,
    Rounded,
}

/// A tuple of `M` nonnegative matrices, one per chain leg.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanSet {
    pub plans: Vec<Matrix>,
    pub kind: PlanKind,
    /// The iteration the plans were built from.
    pub iteration: u64,
}

impl PlanSet {
    pub fn total_masses(&self) -> Vec<f64> {
        self.plans.iter().map(|p| p.total()).collect()
    }

    pub fn export(&self) -> PlanExport {
        PlanExport {
            plans: self.plans.clone(),
            kind: self.kind,
            iteration: self.iteration,
            mass: self.total_masses(),
        }
    }
}

/// On-disk plan document: `{"plans": [...], "kind": ..., "iteration": ...,
/// "mass": [...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanExport {
    pub plans: Vec<Matrix>,
    pub kind: PlanKind,
    pub iteration: u64,
    pub mass: Vec<f64>,
}

impl PlanExport {
    pub fn into_plan_set(self) -> PlanSet {
        PlanSet { plans: self.plans, kind: self.kind, iteration: self.iteration }
    }
}

/// Plans induced by the iteration:
/// `P^(i) = diag(u^(i)) K^(i) diag(1/u^(i+1))` for every leg but the last,
/// which uses `diag(u^(M+1))` without the reciprocal.
pub fn plans_from_state(
    state: &ScalingState,
    kernels: &GibbsKernels,
) -> Result<PlanSet, SeqotError> {
    let m = kernels.chain_len();
    if state.vectors().len() != m + 1 {
        return Err(SeqotError::DimensionMismatch);
    }
    let eps = kernels.epsilon;
    let mut plans = Vec::with_capacity(m);
    match state.representation() {
        Backend::Linear => {
            let u = state.vectors();
            for i in 0..m {
                let right: Vec<f64> = if i + 1 < m {
                    u[i + 1].iter().map(|&x| 1.0 / x).collect()
                } else {
                    u[m].clone()
                };
                if right.iter().any(|x| !x.is_finite()) {
                    return Err(SeqotError::NumericalUnderflow {
                        n: state.iteration(),
                        context: "reciprocal scaling vector overflowed",
                    });
                }
                plans.push(kernels.kernels[i].scale_rows_cols(&u[i], &right));
            }
        }
        Backend::LogDomain => {
            let f = state.vectors();
            for i in 0..m {
                let lk = &kernels.log_kernels[i];
                let sign = if i + 1 < m { -1.0 } else { 1.0 };
                let plan = Matrix::from_fn(lk.rows(), lk.cols(), |r, c| {
                    ((f[i][r] + sign * f[i + 1][c]) / eps + lk.get(r, c)).exp()
                });
                plans.push(plan);
            }
        }
    }
    Ok(PlanSet { plans, kind: PlanKind::Induced, iteration: state.iteration() })
}

/// Boundary-consistent but unnormalized plans mixing the previous edge
/// vectors with the half-updated boundary (two-leg chains):
/// `P' = (diag(u^(n,1)) K1 diag(1/u^(n+1,2)), diag(u^(n+1,2)) K2 diag(u^(n,3)))`.
pub fn primed_plans(
    state: &ScalingState,
    boundary: &HalfUpdatedBoundary,
    kernels: &GibbsKernels,
) -> Result<PlanSet, SeqotError> {
    if kernels.chain_len() != 2 {
        return Err(SeqotError::WrongChainLength { expected: 2, found: kernels.chain_len() });
    }
    if boundary.repr != state.representation() || boundary.from_iteration != state.iteration() {
        return Err(SeqotError::NonConsecutiveStates {
            first: state.iteration(),
            second: boundary.from_iteration,
        });
    }
    let eps = kernels.epsilon;
    let plans = match state.representation() {
        Backend::Linear => {
            let u = state.vectors();
            let w = &boundary.values;
            let w_recip: Vec<f64> = w.iter().map(|&x| 1.0 / x).collect();
            vec![
                kernels.kernels[0].scale_rows_cols(&u[0], &w_recip),
                kernels.kernels[1].scale_rows_cols(w, &u[2]),
            ]
        }
        Backend::LogDomain => {
            let f = state.vectors();
            let g = &boundary.values;
            let lk0 = &kernels.log_kernels[0];
            let lk1 = &kernels.log_kernels[1];
            vec![
                Matrix::from_fn(lk0.rows(), lk0.cols(), |r, c| {
                    ((f[0][r] - g[c]) / eps + lk0.get(r, c)).exp()
                }),
                Matrix::from_fn(lk1.rows(), lk1.cols(), |r, c| {
                    ((g[r] + f[2][c]) / eps + lk1.get(r, c)).exp()
                }),
            ]
        }
    };
    Ok(PlanSet { plans, kind: PlanKind::Primed, iteration: state.iteration() })
}

/// The primed plans normalized to unit mass by the common normalizer
/// `P = ||diag(u^(n,1)) K1 diag(1/u^(n+1,2))||_1`.
pub fn half_plans(
    state: &ScalingState,
    boundary: &HalfUpdatedBoundary,
    kernels: &GibbsKernels,
) -> Result<PlanSet, SeqotError> {
    let primed = primed_plans(state, boundary, kernels)?;
    let normalizer = primed.plans[0].total();
    if !(normalizer > 0.0) || !normalizer.is_finite() {
        return Err(SeqotError::NumericalUnderflow {
            n: state.iteration(),
            context: "half-plan normalizer lost all mass",
        });
    }
    let plans = primed.plans.iter().map(|p| p.map(|v| v / normalizer)).collect();
    Ok(PlanSet { plans, kind: PlanKind::HalfStep, iteration: state.iteration() })
}

/// Edge marginals and the marginal pair at every boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    /// `P^(1) 1`.
    pub first_edge: Vec<f64>,
    /// `(P^(M))^T 1`.
    pub last_edge: Vec<f64>,
    /// `((P^(i))^T 1, P^(i+1) 1)` for each interior boundary.
    pub boundaries: Vec<(Vec<f64>, Vec<f64>)>,
}

pub fn marginals(ps: &PlanSet) -> Marginals {
    let m = ps.plans.len();
    let first_edge = ps.plans[0].row_sums();
    let last_edge = ps.plans[m - 1].col_sums();
    let boundaries = (0..m - 1)
        .map(|i| (ps.plans[i].col_sums(), ps.plans[i + 1].row_sums()))
        .collect();
    Marginals { first_edge, last_edge, boundaries }
}

/// Dual objective
/// `L(f) = <f^(1), a> + <f^(M+1), b> - eps * sum_i ||P^(i)(f)||_1`,
/// where the plan masses are the exponential sums of the dual problem.
pub fn lagrangian_value(
    state: &ScalingState,
    kernels: &GibbsKernels,
    problem: &SeqOTProblem,
) -> Result<f64, SeqotError> {
    let ps = plans_from_state(state, kernels)?;
    Ok(lagrangian_from_plans(state, &ps, kernels, problem))
}

/// [`lagrangian_value`] with the induced plans already at hand.
pub(crate) fn lagrangian_from_plans(
    state: &ScalingState,
    ps: &PlanSet,
    kernels: &GibbsKernels,
    problem: &SeqOTProblem,
) -> f64 {
    let m = kernels.chain_len();
    let eps = kernels.epsilon;
    let f_first = state.potential(0, eps);
    let f_last = state.potential(m, eps);
    let mut value = 0.0;
    for (w, f) in problem.a.iter().zip(&f_first) {
        if *w > 0.0 {
            value += w * f;
        }
    }
    for (w, f) in problem.b.iter().zip(&f_last) {
        if *w > 0.0 {
            value += w * f;
        }
    }
    let mut mass = 0.0;
    for p in &ps.plans {
        mass += p.total();
    }
    value - eps * mass
}

/// The two divergence terms whose sum, scaled by `eps`, equals the
/// Lagrangian increase across one iteration:
/// `KL(a || P1 (P2 1 / 1^T P1)^(1/2))` and the transposed counterpart for `b`.
pub fn lagrangian_gap_kl(
    state: &ScalingState,
    next: &ScalingState,
    kernels: &GibbsKernels,
    problem: &SeqOTProblem,
) -> Result<(f64, f64), SeqotError> {
    if next.iteration() != state.iteration() + 1 {
        return Err(SeqotError::NonConsecutiveStates {
            first: state.iteration(),
            second: next.iteration(),
        });
    }
    let (ta, tb) = halfstep_marginal_targets(state, kernels)?;
    Ok((kl_divergence(&problem.a, &ta)?, kl_divergence(&problem.b, &tb)?))
}

/// Transport cost and, when a regularization strength is supplied, the
/// entropy-corrected objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub cost: f64,
    pub entropy: Option<f64>,
    /// `cost - eps * sum_i H(P^(i))`.
    pub regularized: Option<f64>,
}

/// Entropy `H(P) = -sum_jk P_jk (log P_jk - 1)` with `0 log 0 = 0`.
pub fn plan_entropy(p: &Matrix) -> f64 {
    let mut h = 0.0;
    for &v in p.data() {
        if v > ENTROPY_MASS_FLOOR {
            h -= v * (v.ln() - 1.0);
        }
    }
    h
}

pub fn objective(
    ps: &PlanSet,
    problem: &SeqOTProblem,
    epsilon: Option<f64>,
) -> Result<Objective, SeqotError> {
    if ps.plans.len() != problem.chain_len() {
        return Err(SeqotError::DimensionMismatch);
    }
    for (p, c) in ps.plans.iter().zip(&problem.costs) {
        if p.rows() != c.rows() || p.cols() != c.cols() {
            return Err(SeqotError::DimensionMismatch);
        }
    }
    let cost: f64 = ps.plans.iter().zip(&problem.costs).map(|(p, c)| c.frob_inner(p)).sum();
    match epsilon {
        Some(eps) => {
            let entropy: f64 = ps.plans.iter().map(plan_entropy).sum();
            Ok(Objective { cost, entropy: Some(entropy), regularized: Some(cost - eps * entropy) })
        }
        None => Ok(Objective { cost, entropy: None, regularized: None }),
    }
}
