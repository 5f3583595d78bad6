//! The scaling iteration: state, update rules in plain and log arithmetic,
//! stopping criteria, the solve loop, and contraction-rate diagnostics.
//!
//! One iteration updates the boundary vectors first, from the previous
//! state, and only then the two edge vectors from the fresh boundary
//! values. The update order is fixed; the convergence analysis depends
//! on it.

use crate::error::SeqotError;
use crate::linalg::{all_positive_finite, l1_distance_unchecked, logsumexp, recip, Matrix};
use crate::plans::{self, PlanSet};
use crate::problem::{Backend, GibbsKernels, SeqOTProblem, SolveConfig, StoppingCriterion};
use crate::rounding;

/// Scaling vectors `u^(i)` (linear) or dual potentials `f^(i) = eps log u^(i)`
/// (log-domain), together with the iteration counter.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingState {
    repr: Backend,
    vectors: Vec<Vec<f64>>,
    n: u64,
}

impl ScalingState {
    pub fn from_vectors(repr: Backend, vectors: Vec<Vec<f64>>, n: u64) -> Self {
        ScalingState { repr, vectors, n }
    }

    pub fn iteration(&self) -> u64 {
        self.n
    }

    pub fn representation(&self) -> Backend {
        self.repr
    }

    /// Raw stored vectors: `u` for the linear representation, `f` for log.
    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    /// Scaling vector `u^(i)`, converting from the log representation when
    /// needed. Conversion happens at most once per call.
    pub fn scaling_vector(&self, i: usize, epsilon: f64) -> Vec<f64> {
        match self.repr {
            Backend::Linear => self.vectors[i].clone(),
            Backend::LogDomain => self.vectors[i].iter().map(|&f| (f / epsilon).exp()).collect(),
        }
    }

    pub fn scaling_vectors(&self, epsilon: f64) -> Vec<Vec<f64>> {
        (0..self.vectors.len()).map(|i| self.scaling_vector(i, epsilon)).collect()
    }

    /// Dual potential `f^(i) = eps log u^(i)`.
    pub fn potential(&self, i: usize, epsilon: f64) -> Vec<f64> {
        match self.repr {
            Backend::Linear => self.vectors[i].iter().map(|&u| epsilon * u.ln()).collect(),
            Backend::LogDomain => self.vectors[i].clone(),
        }
    }

    pub fn to_linear(&self, epsilon: f64) -> ScalingState {
        ScalingState {
            repr: Backend::Linear,
            vectors: (0..self.vectors.len()).map(|i| self.scaling_vector(i, epsilon)).collect(),
            n: self.n,
        }
    }

    pub fn to_log(&self, epsilon: f64) -> ScalingState {
        ScalingState {
            repr: Backend::LogDomain,
            vectors: (0..self.vectors.len()).map(|i| self.potential(i, epsilon)).collect(),
            n: self.n,
        }
    }

    fn dims(&self) -> Vec<usize> {
        self.vectors.iter().map(|v| v.len()).collect()
    }
}

/// The boundary vector after the half update, before the edges move.
///
/// Carries the representation it was computed in: scaling values for
/// `Linear`, potentials for `LogDomain`.
#[derive(Debug, Clone)]
pub struct HalfUpdatedBoundary {
    pub values: Vec<f64>,
    pub repr: Backend,
    pub from_iteration: u64,
}

fn check_dims(state: &ScalingState, kernels: &GibbsKernels) -> Result<(), SeqotError> {
    if state.dims() != kernels.dims() {
        return Err(SeqotError::DimensionMismatch);
    }
    Ok(())
}

/// Initial vectors: edges normalized by the adjacent kernel mass, interior
/// all-ones. For a two-leg chain this is
/// `u^(0,1) = 1/||K1||, u^(0,2) = 1, u^(0,3) = 1/||K2||`.
pub fn init_state(kernels: &GibbsKernels, backend: Backend) -> ScalingState {
    let dims = kernels.dims();
    let m = kernels.chain_len();
    let vectors = match backend {
        Backend::Linear => {
            let first = 1.0 / kernels.kernels[0].total();
            let last = 1.0 / kernels.kernels[m - 1].total();
            (0..=m)
                .map(|i| {
                    let v = if i == 0 {
                        first
                    } else if i == m {
                        last
                    } else {
                        1.0
                    };
                    vec![v; dims[i]]
                })
                .collect()
        }
        Backend::LogDomain => {
            let eps = kernels.epsilon;
            let first = -eps * kernels.log_mass(0);
            let last = -eps * kernels.log_mass(m - 1);
            (0..=m)
                .map(|i| {
                    let v = if i == 0 {
                        first
                    } else if i == m {
                        last
                    } else {
                        0.0
                    };
                    vec![v; dims[i]]
                })
                .collect()
        }
    };
    ScalingState { repr: backend, vectors, n: 0 }
}

fn underflow(n: u64, context: &'static str) -> SeqotError {
    SeqotError::NumericalUnderflow { n, context }
}

fn check_denominator(v: &[f64], n: u64, context: &'static str) -> Result<(), SeqotError> {
    if v.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(underflow(n, context));
    }
    Ok(())
}

fn sqrt_ratio(num: &[f64], den: &[f64]) -> Vec<f64> {
    num.iter().zip(den).map(|(a, b)| (a / b).sqrt()).collect()
}

/// One full iteration of the general chain in linear arithmetic.
pub fn step_general(
    state: &ScalingState,
    kernels: &GibbsKernels,
    problem: &SeqOTProblem,
) -> Result<ScalingState, SeqotError> {
    check_dims(state, kernels)?;
    if state.repr != Backend::Linear {
        return step_log_domain(state, kernels, problem);
    }
    let m = kernels.chain_len();
    let u = &state.vectors;
    let mut next: Vec<Vec<f64>> = vec![Vec::new(); m + 1];

    // Boundaries from the previous state.
    for j in 1..m {
        let num = kernels.kernels[j - 1].tr_matvec(&u[j - 1]);
        let den = if j < m - 1 {
            kernels.kernels[j].matvec(&recip(&u[j + 1]))
        } else {
            kernels.kernels[m - 1].matvec(&u[m])
        };
        check_denominator(&den, state.n, "boundary update denominator")?;
        let v = sqrt_ratio(&num, &den);
        if !all_positive_finite(&v) {
            return Err(underflow(state.n, "boundary vector left the positive cone"));
        }
        next[j] = v;
    }

    // Edges from the freshly updated boundaries.
    let den_a = kernels.kernels[0].matvec(&recip(&next[1]));
    check_denominator(&den_a, state.n, "first edge denominator")?;
    next[0] = problem.a.iter().zip(&den_a).map(|(a, d)| a / d).collect();

    let den_b = kernels.kernels[m - 1].tr_matvec(&next[m - 1]);
    check_denominator(&den_b, state.n, "last edge denominator")?;
    next[m] = problem.b.iter().zip(&den_b).map(|(b, d)| b / d).collect();

    for v in [&next[0], &next[m]] {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(underflow(state.n, "edge vector overflowed"));
        }
    }

    Ok(ScalingState { repr: Backend::Linear, vectors: next, n: state.n + 1 })
}

/// The two-leg specialization: one boundary update, then both edges.
pub fn step_m2(
    state: &ScalingState,
    kernels: &GibbsKernels,
    problem: &SeqOTProblem,
) -> Result<ScalingState, SeqotError> {
    if kernels.chain_len() != 2 {
        return Err(SeqotError::WrongChainLength { expected: 2, found: kernels.chain_len() });
    }
    check_dims(state, kernels)?;
    if state.repr != Backend::Linear {
        return step_log_domain(state, kernels, problem);
    }
    let u = &state.vectors;
    let num = kernels.kernels[0].tr_matvec(&u[0]);
    let den = kernels.kernels[1].matvec(&u[2]);
    check_denominator(&den, state.n, "boundary update denominator")?;
    let w = sqrt_ratio(&num, &den);
    if !all_positive_finite(&w) {
        return Err(underflow(state.n, "boundary vector left the positive cone"));
    }
    let den_a = kernels.kernels[0].matvec(&recip(&w));
    check_denominator(&den_a, state.n, "first edge denominator")?;
    let den_b = kernels.kernels[1].tr_matvec(&w);
    check_denominator(&den_b, state.n, "last edge denominator")?;
    let ua = problem.a.iter().zip(&den_a).map(|(a, d)| a / d).collect();
    let ub = problem.b.iter().zip(&den_b).map(|(b, d)| b / d).collect();
    Ok(ScalingState { repr: Backend::Linear, vectors: vec![ua, w, ub], n: state.n + 1 })
}

/// One full iteration in log space; mathematically the same map as
/// [`step_general`] under `f = eps log u`, stable for small `eps`.
pub fn step_log_domain(
    state: &ScalingState,
    kernels: &GibbsKernels,
    problem: &SeqOTProblem,
) -> Result<ScalingState, SeqotError> {
    check_dims(state, kernels)?;
    if state.repr != Backend::LogDomain {
        return step_log_domain(&state.to_log(kernels.epsilon), kernels, problem);
    }
    let m = kernels.chain_len();
    let eps = kernels.epsilon;
    let f = &state.vectors;
    let mut next: Vec<Vec<f64>> = vec![Vec::new(); m + 1];
    let mut scratch = Vec::new();

    // lse over k of f_k/eps + logK_{k,t}: aggregates a kernel column.
    let col_lse = |lk: &Matrix, g: &[f64], t: usize, scratch: &mut Vec<f64>| {
        scratch.clear();
        for k in 0..lk.rows() {
            scratch.push(g[k] / eps + lk.get(k, t));
        }
        logsumexp(scratch)
    };
    // lse over k of sign * f_k/eps + logK_{t,k}: aggregates a kernel row.
    let row_lse = |lk: &Matrix, g: &[f64], sign: f64, t: usize, scratch: &mut Vec<f64>| {
        scratch.clear();
        for k in 0..lk.cols() {
            scratch.push(sign * g[k] / eps + lk.get(t, k));
        }
        logsumexp(scratch)
    };

    for j in 1..m {
        let lk_prev = &kernels.log_kernels[j - 1];
        let mut v = Vec::with_capacity(lk_prev.cols());
        for t in 0..lk_prev.cols() {
            let num = col_lse(lk_prev, &f[j - 1], t, &mut scratch);
            let den = if j < m - 1 {
                row_lse(&kernels.log_kernels[j], &f[j + 1], -1.0, t, &mut scratch)
            } else {
                row_lse(&kernels.log_kernels[m - 1], &f[m], 1.0, t, &mut scratch)
            };
            v.push(eps / 2.0 * (num - den));
        }
        next[j] = v;
    }

    let lk0 = &kernels.log_kernels[0];
    let mut fa = Vec::with_capacity(problem.a.len());
    for t in 0..problem.a.len() {
        let lse = row_lse(lk0, &next[1], -1.0, t, &mut scratch);
        fa.push(eps * problem.a[t].ln() - eps * lse);
    }
    next[0] = fa;

    let lkm = &kernels.log_kernels[m - 1];
    let mut fb = Vec::with_capacity(problem.b.len());
    for t in 0..problem.b.len() {
        let lse = col_lse(lkm, &next[m - 1], t, &mut scratch);
        fb.push(eps * problem.b[t].ln() - eps * lse);
    }
    next[m] = fb;

    Ok(ScalingState { repr: Backend::LogDomain, vectors: next, n: state.n + 1 })
}

/// Dispatches on the state representation.
pub fn step(
    state: &ScalingState,
    kernels: &GibbsKernels,
    problem: &SeqOTProblem,
) -> Result<ScalingState, SeqotError> {
    match state.repr {
        Backend::Linear => step_general(state, kernels, problem),
        Backend::LogDomain => step_log_domain(state, kernels, problem),
    }
}

/// The half update applied to the single boundary of a two-leg chain,
/// keeping the edges at their previous values.
pub fn half_update_boundary(
    state: &ScalingState,
    kernels: &GibbsKernels,
) -> Result<HalfUpdatedBoundary, SeqotError> {
    if kernels.chain_len() != 2 {
        return Err(SeqotError::WrongChainLength { expected: 2, found: kernels.chain_len() });
    }
    check_dims(state, kernels)?;
    let values = match state.repr {
        Backend::Linear => {
            let num = kernels.kernels[0].tr_matvec(&state.vectors[0]);
            let den = kernels.kernels[1].matvec(&state.vectors[2]);
            check_denominator(&den, state.n, "half update denominator")?;
            let w = sqrt_ratio(&num, &den);
            if !all_positive_finite(&w) {
                return Err(underflow(state.n, "half-updated boundary left the positive cone"));
            }
            w
        }
        Backend::LogDomain => {
            let eps = kernels.epsilon;
            let (lk0, lk1) = (&kernels.log_kernels[0], &kernels.log_kernels[1]);
            let f = &state.vectors;
            let mut w = Vec::with_capacity(lk0.cols());
            let mut scratch = Vec::new();
            for t in 0..lk0.cols() {
                scratch.clear();
                for k in 0..lk0.rows() {
                    scratch.push(f[0][k] / eps + lk0.get(k, t));
                }
                let num = logsumexp(&scratch);
                scratch.clear();
                for k in 0..lk1.cols() {
                    scratch.push(f[2][k] / eps + lk1.get(t, k));
                }
                let den = logsumexp(&scratch);
                w.push(eps / 2.0 * (num - den));
            }
            w
        }
    };
    Ok(HalfUpdatedBoundary { values, repr: state.repr, from_iteration: state.n })
}

/// The marginal targets entering the half-step stopping criterion:
/// `P1 (P2 1 / 1^T P1)^(1/2)` against `a`, and the transposed counterpart
/// against `b`.
pub fn halfstep_marginal_targets(
    state: &ScalingState,
    kernels: &GibbsKernels,
) -> Result<(Vec<f64>, Vec<f64>), SeqotError> {
    if kernels.chain_len() != 2 {
        return Err(SeqotError::WrongChainLength { expected: 2, found: kernels.chain_len() });
    }
    let ps = plans::plans_from_state(state, kernels)?;
    halfstep_targets_from_plans(&ps, state.n)
}

fn halfstep_targets_from_plans(
    ps: &PlanSet,
    n: u64,
) -> Result<(Vec<f64>, Vec<f64>), SeqotError> {
    let cols1 = ps.plans[0].col_sums();
    let rows2 = ps.plans[1].row_sums();
    if cols1.iter().chain(&rows2).any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(underflow(n, "boundary marginal lost all mass"));
    }
    let grow = sqrt_ratio(&rows2, &cols1);
    let shrink = sqrt_ratio(&cols1, &rows2);
    let target_a = ps.plans[0].matvec(&grow);
    let target_b = ps.plans[1].tr_matvec(&shrink);
    Ok((target_a, target_b))
}

/// Half-step residual
/// `||a - P1 (P2 1 / 1^T P1)^(1/2)||_1 + ||b - P2^T (1^T P1 / P2 1)^(1/2)||_1`.
pub fn halfstep_residual(
    state: &ScalingState,
    kernels: &GibbsKernels,
    problem: &SeqOTProblem,
) -> Result<f64, SeqotError> {
    let (ta, tb) = halfstep_marginal_targets(state, kernels)?;
    Ok(l1_distance_unchecked(&problem.a, &ta) + l1_distance_unchecked(&problem.b, &tb))
}

/// Largest L1 mismatch across plan boundaries,
/// `max_i ||(P^(i))^T 1 - P^(i+1) 1||_1`.
pub fn boundary_residual(
    state: &ScalingState,
    kernels: &GibbsKernels,
) -> Result<f64, SeqotError> {
    let ps = plans::plans_from_state(state, kernels)?;
    Ok(boundary_residual_from_plans(&ps))
}

fn boundary_residual_from_plans(ps: &PlanSet) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..ps.plans.len() - 1 {
        let left = ps.plans[i].col_sums();
        let right = ps.plans[i + 1].row_sums();
        worst = worst.max(l1_distance_unchecked(&left, &right));
    }
    worst
}

/// Per-iteration diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub n: u64,
    /// Absent for chains longer than two legs.
    pub halfstep_residual: Option<f64>,
    pub boundary_residual: f64,
    pub lagrangian: f64,
    /// Hilbert distance of each scaling vector to a reference, when one
    /// was supplied.
    pub hilbert_to_reference: Option<Vec<f64>>,
}

/// Contraction coefficients of the kernels and the induced geometric rate.
///
/// The predicted distance bound after `n` iterations is
/// `coefficient * rate^(exponent_multiplier * n)`; the coefficient depends
/// on the optimal vectors and stays empty until a reference fills it in.
#[derive(Debug, Clone, PartialEq)]
pub struct ContractionReport {
    pub lambdas: Vec<f64>,
    pub rate: f64,
    pub exponent_multiplier: u32,
    pub coefficient: Option<f64>,
}

impl ContractionReport {
    pub fn with_coefficient(mut self, coefficient: f64) -> Self {
        self.coefficient = Some(coefficient);
        self
    }

    /// Bound for the edge vectors after `n` iterations.
    pub fn edge_bound(&self, n: u64) -> Option<f64> {
        self.coefficient
            .map(|c| c * self.rate.powi((self.exponent_multiplier as u64 * n) as i32))
    }

    /// Bound for interior vectors: one half-update behind the edges on
    /// two-leg chains (exponent `2n - 1`, defined for `n >= 1`), identical
    /// to the edge bound otherwise.
    pub fn interior_bound(&self, n: u64) -> Option<f64> {
        if self.exponent_multiplier == 2 {
            if n == 0 {
                return None;
            }
            self.coefficient.map(|c| c * self.rate.powi((2 * n - 1) as i32))
        } else {
            self.edge_bound(n)
        }
    }
}

/// Birkhoff coefficients of every kernel, computed from the log kernels so
/// small regularization strengths cannot overflow the oscillation ratio.
pub fn contraction_bound(kernels: &GibbsKernels) -> ContractionReport {
    let lambdas: Vec<f64> = kernels
        .log_kernels
        .iter()
        .map(|lk| {
            let (nr, nc) = (lk.rows(), lk.cols());
            let mut log_gamma = 0.0f64;
            for i in 0..nr {
                for j in 0..nr {
                    for k in 0..nc {
                        for l in 0..nc {
                            let v = lk.get(i, k) + lk.get(j, l) - lk.get(j, k) - lk.get(i, l);
                            log_gamma = log_gamma.max(v);
                        }
                    }
                }
            }
            // (sqrt(gamma)-1)/(sqrt(gamma)+1) = tanh(log(gamma)/4)
            (log_gamma / 4.0).tanh()
        })
        .collect();
    let rate = lambdas.iter().fold(0.0, |m: f64, &l| m.max(l));
    let exponent_multiplier = if kernels.chain_len() == 2 { 2 } else { 1 };
    ContractionReport { lambdas, rate, exponent_multiplier, coefficient: None }
}

/// Worst-case iteration count for the half-step criterion at residual
/// threshold `delta`: `1 + (4/delta^2) log(||K1|| ||K2|| / K)` with
/// `K = min_jl sum_k K1_jk K2_kl`. Evaluated in log space.
pub fn iteration_bound(kernels: &GibbsKernels, delta_residual: f64) -> Result<f64, SeqotError> {
    if kernels.chain_len() != 2 {
        return Err(SeqotError::WrongChainLength { expected: 2, found: kernels.chain_len() });
    }
    if !(delta_residual > 0.0) {
        return Err(SeqotError::InvalidConfig(format!(
            "residual threshold must be positive, got {delta_residual}"
        )));
    }
    let (lk1, lk2) = (&kernels.log_kernels[0], &kernels.log_kernels[1]);
    let mut log_k_min = f64::INFINITY;
    let mut scratch = Vec::with_capacity(lk1.cols());
    for j in 0..lk1.rows() {
        for l in 0..lk2.cols() {
            scratch.clear();
            for k in 0..lk1.cols() {
                scratch.push(lk1.get(j, k) + lk2.get(k, l));
            }
            log_k_min = log_k_min.min(logsumexp(&scratch));
        }
    }
    let log_ratio = kernels.log_mass(0) + kernels.log_mass(1) - log_k_min;
    Ok(1.0 + 4.0 / (delta_residual * delta_residual) * log_ratio)
}

/// Result of a full solve.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub config: SolveConfig,
    /// The residual threshold actually used.
    pub threshold: f64,
    pub converged: bool,
    pub terminal: ScalingState,
    pub induced: PlanSet,
    /// Half-step plans at the terminal iteration (two-leg chains only).
    pub half: Option<PlanSet>,
    /// Exactly feasible rounded plans (two-leg chains only).
    pub rounded: Option<PlanSet>,
    pub induced_objective: plans::Objective,
    pub rounded_objective: Option<plans::Objective>,
    pub trace: Vec<TraceRecord>,
    pub warnings: Vec<String>,
}

impl SolveReport {
    /// Residual of the configured criterion at the terminal iteration.
    pub fn terminal_residual(&self) -> f64 {
        let last = self.trace.last().expect("trace always has the initial record");
        match self.config.criterion {
            StoppingCriterion::HalfStepResidual => {
                last.halfstep_residual.unwrap_or(last.boundary_residual)
            }
            StoppingCriterion::BoundaryResidual => last.boundary_residual,
        }
    }
}

/// Hilbert distance of each layer to reference scaling vectors.
///
/// For log states the distance is taken directly on potentials:
/// `d_H(u, u_hat) = (max_j (f - f_hat)_j - min_j (f - f_hat)_j) / eps`.
pub fn hilbert_to_reference(
    state: &ScalingState,
    epsilon: f64,
    reference: &[Vec<f64>],
) -> Result<Vec<f64>, SeqotError> {
    if reference.len() != state.vectors.len() {
        return Err(SeqotError::LengthMismatch {
            left: reference.len(),
            right: state.vectors.len(),
        });
    }
    let mut out = Vec::with_capacity(reference.len());
    for (i, r) in reference.iter().enumerate() {
        match state.repr {
            Backend::Linear => out.push(crate::metrics::hilbert_metric(&state.vectors[i], r)?),
            Backend::LogDomain => {
                if r.len() != state.vectors[i].len() {
                    return Err(SeqotError::LengthMismatch {
                        left: r.len(),
                        right: state.vectors[i].len(),
                    });
                }
                let mut hi = f64::NEG_INFINITY;
                let mut lo = f64::INFINITY;
                for (f, ur) in state.vectors[i].iter().zip(r) {
                    if !(*ur > 0.0) || !ur.is_finite() {
                        return Err(SeqotError::NonPositiveEntry { index: i, value: *ur });
                    }
                    let gap = f - epsilon * ur.ln();
                    hi = hi.max(gap);
                    lo = lo.min(gap);
                }
                out.push((hi - lo) / epsilon);
            }
        }
    }
    Ok(out)
}

/// Runs the iteration to the configured stopping criterion.
///
/// The criterion is evaluated from iteration 1 on; a budget of zero returns
/// the initial state flagged as not converged. Hitting the budget is not an
/// error: the report carries the best state seen with `converged = false`.
pub fn solve(problem: &SeqOTProblem, config: &SolveConfig) -> Result<SolveReport, SeqotError> {
    solve_with_reference(problem, config, None)
}

/// [`solve`], additionally logging per-layer Hilbert distances to reference
/// scaling vectors in every trace record.
pub fn solve_with_reference(
    problem: &SeqOTProblem,
    config: &SolveConfig,
    reference: Option<&[Vec<f64>]>,
) -> Result<SolveReport, SeqotError> {
    problem.validate().map_err(SeqotError::InvalidProblem)?;
    config.validate()?;
    let m = problem.chain_len();

    let mut warnings = Vec::new();
    let threshold = match config.residual_tolerance {
        Some(t) => t,
        None => {
            let delta = config.delta.expect("validated: delta set when tolerance absent");
            if m != 2 {
                return Err(SeqotError::InvalidConfig(
                    "delta-driven thresholds carry a guarantee only for two-leg chains; \
                     pass residual_tolerance explicitly"
                        .into(),
                ));
            }
            let max_cost = problem.max_cost();
            if max_cost == 0.0 {
                // Free problem: any feasible tuple is optimal.
                f64::INFINITY
            } else {
                delta / (16.0 * max_cost)
            }
        }
    };
    if m == 2 {
        if let Some(delta) = config.delta {
            let composed = crate::problem::compose_min_cost(problem)?;
            let composed_max = composed.costs.max_abs();
            if delta >= composed_max {
                warnings.push(format!(
                    "delta {delta} is not below the composed cost sup-norm {composed_max}; \
                     the suboptimality analysis assumes delta < ||C||_inf"
                ));
            }
        }
    } else if config.delta.is_some() && config.residual_tolerance.is_some() {
        warnings.push(
            "chains longer than two legs stop on the residual tolerance only; \
             no suboptimality guarantee is attached to delta"
                .into(),
        );
    }

    let kernels = crate::problem::build_kernels(problem, config.epsilon)?;
    if config.backend == Backend::Linear && kernels.has_subnormal_entries() {
        let index = kernels
            .kernels
            .iter()
            .position(|k| k.data().iter().any(|&v| v < f64::MIN_POSITIVE))
            .unwrap_or(0);
        return Err(SeqotError::ZeroKernelEntry { index });
    }
    if let Some(r) = reference {
        if r.len() != m + 1 {
            return Err(SeqotError::LengthMismatch { left: r.len(), right: m + 1 });
        }
    }

    let mut state = init_state(&kernels, config.backend);
    let mut trace = Vec::new();
    let record = |state: &ScalingState,
                  trace: &mut Vec<TraceRecord>|
     -> Result<(Option<f64>, f64), SeqotError> {
        let ps = plans::plans_from_state(state, &kernels)?;
        let boundary = boundary_residual_from_plans(&ps);
        let halfstep = if m == 2 {
            let (ta, tb) = halfstep_targets_from_plans(&ps, state.n)?;
            Some(
                l1_distance_unchecked(&problem.a, &ta) + l1_distance_unchecked(&problem.b, &tb),
            )
        } else {
            None
        };
        let should_log = state.n % config.trace_stride == 0;
        if should_log {
            let lagrangian = plans::lagrangian_from_plans(state, &ps, &kernels, problem);
            let hilbert = match reference {
                Some(r) => Some(hilbert_to_reference(state, config.epsilon, r)?),
                None => None,
            };
            trace.push(TraceRecord {
                n: state.n,
                halfstep_residual: halfstep,
                boundary_residual: boundary,
                lagrangian,
                hilbert_to_reference: hilbert,
            });
        }
        Ok((halfstep, boundary))
    };

    record(&state, &mut trace)?;
    let mut converged = false;
    loop {
        if state.n >= config.max_iters {
            break;
        }
        state = step(&state, &kernels, problem)?;
        let (halfstep, boundary) = record(&state, &mut trace)?;
        let residual = match config.criterion {
            StoppingCriterion::HalfStepResidual => {
                halfstep.expect("half-step criterion requires a two-leg chain")
            }
            StoppingCriterion::BoundaryResidual => boundary,
        };
        if residual <= threshold {
            converged = true;
            break;
        }
    }
    if m != 2 && config.criterion == StoppingCriterion::HalfStepResidual {
        // Unreachable: config validation below guards this path.
        unreachable!("half-step criterion on a chain longer than two legs");
    }

    // Make sure the terminal iteration is always in the trace.
    if trace.last().map(|r| r.n) != Some(state.n) {
        let ps = plans::plans_from_state(&state, &kernels)?;
        let boundary = boundary_residual_from_plans(&ps);
        let halfstep = if m == 2 {
            let (ta, tb) = halfstep_targets_from_plans(&ps, state.n)?;
            Some(l1_distance_unchecked(&problem.a, &ta) + l1_distance_unchecked(&problem.b, &tb))
        } else {
            None
        };
        let lagrangian = plans::lagrangian_from_plans(&state, &ps, &kernels, problem);
        let hilbert = match reference {
            Some(r) => Some(hilbert_to_reference(&state, config.epsilon, r)?),
            None => None,
        };
        trace.push(TraceRecord {
            n: state.n,
            halfstep_residual: halfstep,
            boundary_residual: boundary,
            lagrangian,
            hilbert_to_reference: hilbert,
        });
    }

    let induced = plans::plans_from_state(&state, &kernels)?;
    let induced_objective = plans::objective(&induced, problem, Some(config.epsilon))?;
    let (half, rounded, rounded_objective) = if m == 2 {
        let boundary = half_update_boundary(&state, &kernels)?;
        let half = plans::half_plans(&state, &boundary, &kernels)?;
        let rounded = rounding::feasible_pair_m2(&half, problem)?;
        let obj = plans::objective(&rounded, problem, Some(config.epsilon))?;
        (Some(half), Some(rounded), Some(obj))
    } else {
        (None, None, None)
    };

    Ok(SolveReport {
        config: config.clone(),
        threshold,
        converged,
        terminal: state,
        induced,
        half,
        rounded,
        induced_objective,
        rounded_objective,
        trace,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::build_kernels;
    use crate::testutil::{t1, t2, uniform_m_chain};

    const T1_EPS: f64 = 1.0;
    const T2_EPS: f64 = 0.5;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn init_all_ones_kernels() {
        let p = t1();
        let k = build_kernels(&p, T1_EPS).unwrap();
        let s = init_state(&k, Backend::Linear);
        assert_eq!(s.vectors(), &[vec![0.25, 0.25], vec![1.0, 1.0], vec![0.25, 0.25]]);
        assert_eq!(s.iteration(), 0);
    }

    #[test]
    fn init_extends_to_longer_chains() {
        let p = uniform_m_chain(3);
        let k = build_kernels(&p, 1.0).unwrap();
        let s = init_state(&k, Backend::Linear);
        assert_eq!(
            s.vectors(),
            &[vec![0.25, 0.25], vec![1.0, 1.0], vec![1.0, 1.0], vec![0.25, 0.25]]
        );
    }

    #[test]
    fn init_normalizes_by_kernel_mass() {
        let p = t2();
        let k = build_kernels(&p, T2_EPS).unwrap();
        let s = init_state(&k, Backend::Linear);
        let mass = 2.0 + 2.0 * (-2.0f64).exp();
        assert!(close(s.vectors()[0][0], 1.0 / mass, 1e-15));
        assert!(close(s.vectors()[0][1], 1.0 / mass, 1e-15));
    }

    #[test]
    fn log_init_matches_linear_init() {
        let p = t2();
        let k = build_kernels(&p, T2_EPS).unwrap();
        let lin = init_state(&k, Backend::Linear);
        let log = init_state(&k, Backend::LogDomain);
        for i in 0..3 {
            let via_log = log.scaling_vector(i, T2_EPS);
            for (x, y) in lin.vectors()[i].iter().zip(&via_log) {
                assert!(close(*x, *y, 1e-15 * x.abs().max(1.0)));
            }
        }
    }

    #[test]
    fn step_on_three_leg_uniform_chain() {
        // One hand evaluation of the four update rules.
        let p = uniform_m_chain(3);
        let k = build_kernels(&p, 1.0).unwrap();
        let s = step_general(&init_state(&k, Backend::Linear), &k, &p).unwrap();
        assert_eq!(s.iteration(), 1);
        let want: Vec<Vec<f64>> =
            vec![vec![0.125, 0.125], vec![0.5, 0.5], vec![2.0, 2.0], vec![0.125, 0.125]];
        for (got, want) in s.vectors().iter().zip(&want) {
            for (g, w) in got.iter().zip(want) {
                assert!(close(*g, *w, 1e-15), "{:?}", s.vectors());
            }
        }
        let ps = crate::plans::plans_from_state(&s, &k).unwrap();
        for plan in &ps.plans {
            for &v in plan.data() {
                assert!(close(v, 0.25, 1e-15));
            }
        }
    }

    #[test]
    fn uniform_instance_is_a_fixed_point() {
        let p = t1();
        let k = build_kernels(&p, T1_EPS).unwrap();
        let mut s = init_state(&k, Backend::Linear);
        for _ in 0..3 {
            s = step_m2(&s, &k, &p).unwrap();
            assert_eq!(s.vectors(), &[vec![0.25, 0.25], vec![1.0, 1.0], vec![0.25, 0.25]]);
        }
    }

    #[test]
    fn log_fixed_point_matches() {
        let p = t1();
        let k = build_kernels(&p, T1_EPS).unwrap();
        let mut s = init_state(&k, Backend::LogDomain);
        s = step_log_domain(&s, &k, &p).unwrap();
        let quarter = 0.25f64.ln();
        for (i, want) in [quarter, 0.0, quarter].iter().enumerate() {
            for &f in &s.vectors()[i] {
                assert!(close(f, *want, 1e-15), "layer {i}: {f} vs {want}");
            }
        }
    }

    #[test]
    fn m2_step_agrees_with_general_step() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let p = crate::instances::random_problem(&mut rng, &[3, 4, 2]);
            let k = build_kernels(&p, 0.7).unwrap();
            let s0 = init_state(&k, Backend::Linear);
            let a = step_m2(&s0, &k, &p).unwrap();
            let b = step_general(&s0, &k, &p).unwrap();
            for (va, vb) in a.vectors().iter().zip(b.vectors()) {
                for (x, y) in va.iter().zip(vb) {
                    assert!(close(*x, *y, 1e-14 * x.abs().max(1.0)));
                }
            }
        }
    }

    #[test]
    fn log_and_linear_backends_agree() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        for trial in 0..100 {
            let p = crate::instances::random_problem(&mut rng, &[3, 3, 3]);
            let eps = 0.1 + 0.9 * (trial as f64 / 100.0);
            let k = build_kernels(&p, eps).unwrap();
            let mut lin = init_state(&k, Backend::Linear);
            let mut log = init_state(&k, Backend::LogDomain);
            for _ in 0..5 {
                lin = step_general(&lin, &k, &p).unwrap();
                log = step_log_domain(&log, &k, &p).unwrap();
            }
            for i in 0..3 {
                let via_log = log.scaling_vector(i, eps);
                for (x, y) in lin.vectors()[i].iter().zip(&via_log) {
                    assert!(
                        close(*x, *y, 1e-10 * x.abs().max(1.0)),
                        "trial {trial} layer {i}: {x} vs {y}"
                    );
                }
            }
        }
    }

    #[test]
    fn tiny_epsilon_needs_the_log_backend() {
        // ||C||_inf = 1 and eps = 1e-3 pushes exp(-C/eps) to zero; the
        // linear path refuses, the log path stays finite.
        let p = t2();
        let k = build_kernels(&p, 1e-3).unwrap();
        assert!(k.has_subnormal_entries());

        let cfg = SolveConfig::with_tolerance(1e-3, 1e-3).max_iters(5);
        let err = solve(&p, &cfg).unwrap_err();
        assert!(matches!(err, SeqotError::ZeroKernelEntry { .. }));

        let s0 = init_state(&k, Backend::Linear);
        assert!(matches!(
            step_general(&s0, &k, &p),
            Err(SeqotError::NumericalUnderflow { .. })
        ));

        let mut s = init_state(&k, Backend::LogDomain);
        for _ in 0..3 {
            s = step_log_domain(&s, &k, &p).unwrap();
        }
        for v in s.vectors() {
            assert!(v.iter().all(|x| x.is_finite()), "{v:?}");
        }
    }

    #[test]
    fn halfstep_residual_is_zero_at_the_uniform_fixed_point() {
        let p = t1();
        let k = build_kernels(&p, T1_EPS).unwrap();
        let mut s = init_state(&k, Backend::Linear);
        assert!(halfstep_residual(&s, &k, &p).unwrap() <= 1e-15);
        for _ in 0..2 {
            s = step_m2(&s, &k, &p).unwrap();
            assert!(halfstep_residual(&s, &k, &p).unwrap() <= 1e-15);
        }
    }

    #[test]
    fn halfstep_residual_decreases_on_t2() {
        let p = t2();
        let k = build_kernels(&p, T2_EPS).unwrap();
        let mut s = init_state(&k, Backend::Linear);
        let mut prev = halfstep_residual(&s, &k, &p).unwrap();
        assert!(prev > 0.0);
        for _ in 0..20 {
            s = step_m2(&s, &k, &p).unwrap();
            let cur = halfstep_residual(&s, &k, &p).unwrap();
            assert!(cur <= prev + 1e-12, "residual rose from {prev} to {cur}");
            prev = cur;
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn marginal_equalities_hold_after_one_step() {
        let p = t2();
        let k = build_kernels(&p, T2_EPS).unwrap();
        let s = step_m2(&init_state(&k, Backend::Linear), &k, &p).unwrap();
        let ps = crate::plans::plans_from_state(&s, &k).unwrap();
        let rows = ps.plans[0].row_sums();
        let cols = ps.plans[1].col_sums();
        assert!(l1_distance_unchecked(&rows, &p.a) <= 1e-15);
        assert!(l1_distance_unchecked(&cols, &p.b) <= 1e-15);
    }

    #[test]
    fn boundary_residual_examples() {
        let p = t1();
        let k = build_kernels(&p, T1_EPS).unwrap();
        let s = init_state(&k, Backend::Linear);
        assert!(boundary_residual(&s, &k).unwrap() <= 1e-15);

        let p3 = uniform_m_chain(3);
        let k3 = build_kernels(&p3, 1.0).unwrap();
        let s3 = step_general(&init_state(&k3, Backend::Linear), &k3, &p3).unwrap();
        assert!(boundary_residual(&s3, &k3).unwrap() <= 1e-15);

        let p2 = t2();
        let k2 = build_kernels(&p2, T2_EPS).unwrap();
        let mut s2 = init_state(&k2, Backend::Linear);
        assert!(boundary_residual(&s2, &k2).unwrap() > 0.0);
        for _ in 0..200 {
            s2 = step_m2(&s2, &k2, &p2).unwrap();
        }
        assert!(boundary_residual(&s2, &k2).unwrap() < 1e-10);
    }

    #[test]
    fn criterion_sandwich_on_t2() {
        let p = t2();
        let k = build_kernels(&p, T2_EPS).unwrap();
        let mut s = init_state(&k, Backend::Linear);
        for _ in 0..30 {
            let hs_n = halfstep_residual(&s, &k, &p).unwrap();
            let b_n = boundary_residual(&s, &k).unwrap();
            let next = step_m2(&s, &k, &p).unwrap();
            let b_next = boundary_residual(&next, &k).unwrap();
            assert!(hs_n <= b_n + 1e-10);
            assert!(b_next <= hs_n + 1e-10);
            s = next;
        }
    }

    #[test]
    fn contraction_report_examples() {
        let p = t1();
        let k = build_kernels(&p, T1_EPS).unwrap();
        let r = contraction_bound(&k);
        assert_eq!(r.rate, 0.0);
        assert_eq!(r.exponent_multiplier, 2);

        // Mixed pair: one kernel flat, one with oscillation 2.
        let c1 = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, -(2.0f64.ln())]]).unwrap();
        // Costs must be nonnegative; shift so entries are {ln2, 0}.
        let c1 = c1.map(|v| v + 2.0f64.ln());
        let p2 = SeqOTProblem::new(
            vec![c1, Matrix::zeros(2, 2)],
            vec![0.5, 0.5],
            vec![0.5, 0.5],
        )
        .unwrap();
        let k2 = build_kernels(&p2, 1.0).unwrap();
        let r2 = contraction_bound(&k2);
        let want = (2.0f64.sqrt() - 1.0) / (2.0f64.sqrt() + 1.0);
        assert!(close(r2.rate, want, 1e-12), "{} vs {want}", r2.rate);
        assert!(close(r2.lambdas[0], want, 1e-12));
        assert_eq!(r2.lambdas[1], 0.0);

        let p3 = uniform_m_chain(4);
        let k3 = build_kernels(&p3, 1.0).unwrap();
        let r3 = contraction_bound(&k3);
        assert_eq!(r3.exponent_multiplier, 1);
        assert_eq!(r3.rate, r3.lambdas.iter().cloned().fold(0.0, f64::max));
    }

    #[test]
    fn contraction_matches_metric_module_on_moderate_kernels() {
        let p = t2();
        let k = build_kernels(&p, T2_EPS).unwrap();
        let report = contraction_bound(&k);
        for (lk, lam) in k.kernels.iter().zip(&report.lambdas) {
            let direct = crate::metrics::birkhoff_lambda(lk).unwrap();
            assert!(close(*lam, direct, 1e-12));
        }
    }

    #[test]
    fn iteration_bound_closed_forms() {
        let p = t1();
        let k = build_kernels(&p, T1_EPS).unwrap();
        let b = iteration_bound(&k, 0.1).unwrap();
        let want = 1.0 + 400.0 * 8.0f64.ln();
        assert!(close(b, want, 1e-9), "{b} vs {want}");
        assert!(close(b, 832.7766166719343, 1e-6));
        let b1 = iteration_bound(&k, 1.0).unwrap();
        assert!(close(b1, 1.0 + 4.0 * 8.0f64.ln(), 1e-12));
    }

    #[test]
    fn iteration_bound_dominates_actual_termination_on_t2() {
        let p = t2();
        let k = build_kernels(&p, T2_EPS).unwrap();
        let bound = iteration_bound(&k, 0.05).unwrap();
        assert!(bound.is_finite() && bound > 0.0);
        let cfg = SolveConfig::with_tolerance(T2_EPS, 0.05);
        let report = solve(&p, &cfg).unwrap();
        assert!(report.converged);
        assert!((report.terminal.iteration() as f64) <= bound.ceil());
    }

    #[test]
    fn solve_t1_converges_in_one_step() {
        let p = t1();
        let cfg = SolveConfig::with_delta(T1_EPS, 0.1);
        let report = solve(&p, &cfg).unwrap();
        assert!(report.converged);
        assert_eq!(report.terminal.iteration(), 1);
        let rounded = report.rounded.unwrap();
        for plan in &rounded.plans {
            for &v in plan.data() {
                assert!(close(v, 0.25, 1e-12));
            }
        }
        assert!(report.rounded_objective.unwrap().cost.abs() <= 1e-15);
    }

    #[test]
    fn solve_t2_meets_the_suboptimality_target() {
        let p = t2();
        let delta = 0.05;
        let eps = crate::problem::epsilon_from_delta(&p, delta).unwrap();
        let cfg = SolveConfig::with_delta(eps, delta).backend(Backend::LogDomain);
        let report = solve(&p, &cfg).unwrap();
        assert!(report.converged);
        // Exact optimum of this instance is 0.1.
        let cost = report.rounded_objective.unwrap().cost;
        assert!(cost <= 0.1 + delta, "rounded cost {cost}");
        assert!(cost >= 0.1 - 1e-9, "rounded cost {cost} below the optimum");
    }

    #[test]
    fn zero_budget_returns_unconverged_initial_report() {
        let p = t2();
        let cfg = SolveConfig::with_delta(T2_EPS, 0.05).max_iters(0);
        let report = solve(&p, &cfg).unwrap();
        assert!(!report.converged);
        assert_eq!(report.terminal.iteration(), 0);
        assert_eq!(report.trace.len(), 1);
    }

    #[test]
    fn lagrangian_never_decreases_along_the_trace() {
        let p = t2();
        let cfg = SolveConfig::with_tolerance(T2_EPS, 1e-9);
        let report = solve(&p, &cfg).unwrap();
        for w in report.trace.windows(2) {
            assert!(w[1].lagrangian >= w[0].lagrangian - 1e-12);
        }
    }

    #[test]
    fn general_chain_requires_explicit_tolerance() {
        let p = uniform_m_chain(3);
        let cfg = SolveConfig::with_delta(1.0, 0.1);
        assert!(matches!(solve(&p, &cfg), Err(SeqotError::InvalidConfig(_))));
        let cfg = SolveConfig::with_tolerance(1.0, 1e-8);
        let report = solve(&p, &cfg).unwrap();
        assert!(report.converged);
        assert!(report.rounded.is_none());
    }

    #[test]
    fn delta_above_composed_cost_warns() {
        let p = t2();
        let cfg = SolveConfig::with_delta(T2_EPS, 5.0);
        let report = solve(&p, &cfg).unwrap();
        assert!(!report.warnings.is_empty());
    }

    #[test]
    fn trace_stride_still_records_the_terminal_iteration() {
        let p = t2();
        let mut cfg = SolveConfig::with_tolerance(T2_EPS, 1e-6);
        cfg.trace_stride = 7;
        let report = solve(&p, &cfg).unwrap();
        assert_eq!(report.trace.first().unwrap().n, 0);
        assert_eq!(report.trace.last().unwrap().n, report.terminal.iteration());
    }
}
