//! Problem representation, validation, Gibbs kernels, and the accuracy-driven
//! choice of the regularization strength.

use serde::{Deserialize, Serialize};

use crate::error::{SeqotError, Violation};
use crate::linalg::{logsumexp, Matrix};

/// Absolute tolerance for marginal sums; file-based inputs carry rounding noise.
pub const MARGINAL_SUM_TOL: f64 = 1e-12;

/// A chain of `M >= 2` cost matrices with prescribed edge marginals.
///
/// `costs[i]` has shape `dims[i] x dims[i+1]`; `a` lives on the first index
/// set, `b` on the last. Consecutive plans must agree on their shared
/// boundary marginal, which is what distinguishes this from `M` independent
/// transport problems.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqOTProblem {
    pub dims: Vec<usize>,
    pub costs: Vec<Matrix>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl SeqOTProblem {
    /// Builds and validates a problem, inferring `dims` from the matrices.
    pub fn new(costs: Vec<Matrix>, a: Vec<f64>, b: Vec<f64>) -> Result<Self, Vec<Violation>> {
        let mut dims = Vec::with_capacity(costs.len() + 1);
        if let Some(first) = costs.first() {
            dims.push(first.rows());
            for c in &costs {
                dims.push(c.cols());
            }
        }
        let p = SeqOTProblem { dims, costs, a, b };
        p.validate()?;
        Ok(p)
    }

    /// Chain length `M`.
    pub fn chain_len(&self) -> usize {
        self.costs.len()
    }

    /// Checks every well-formedness condition and reports all violations.
    pub fn validate(&self) -> Result<(), Vec<Violation>> {
        let mut out = Vec::new();
        let m = self.costs.len();
        if m < 2 {
            out.push(Violation::ChainTooShort { m });
        }
        if self.dims.len() == m + 1 {
            for (i, c) in self.costs.iter().enumerate() {
                if c.rows() != self.dims[i] || c.cols() != self.dims[i + 1] {
                    out.push(Violation::ShapeMismatch {
                        index: i,
                        found_rows: c.rows(),
                        found_cols: c.cols(),
                        want_rows: self.dims[i],
                        want_cols: self.dims[i + 1],
                    });
                }
            }
        } else if !self.costs.is_empty() {
            out.push(Violation::ShapeMismatch {
                index: 0,
                found_rows: self.costs[0].rows(),
                found_cols: self.costs[0].cols(),
                want_rows: self.dims.first().copied().unwrap_or(0),
                want_cols: 0,
            });
        }
        for (i, c) in self.costs.iter().enumerate() {
            for r in 0..c.rows() {
                for k in 0..c.cols() {
                    let v = c.get(r, k);
                    if !v.is_finite() {
                        out.push(Violation::NonFiniteCost { index: i, row: r, col: k });
                    } else if v < 0.0 {
                        out.push(Violation::NegativeCost { index: i, row: r, col: k, value: v });
                    }
                }
            }
        }
        check_marginal(&mut out, "a", &self.a, self.dims.first().copied());
        check_marginal(&mut out, "b", &self.b, self.dims.last().copied());
        if out.is_empty() {
            Ok(())
        } else {
            Err(out)
        }
    }

    /// `max_i ||C^(i)||_inf`.
    pub fn max_cost(&self) -> f64 {
        self.costs.iter().map(|c| c.max_abs()).fold(0.0, f64::max)
    }
}

fn check_marginal(out: &mut Vec<Violation>, which: &'static str, v: &[f64], want_len: Option<usize>) {
    if let Some(len) = want_len {
        if v.len() != len {
            out.push(Violation::ShapeMismatch {
                index: usize::MAX,
                found_rows: v.len(),
                found_cols: 1,
                want_rows: len,
                want_cols: 1,
            });
            return;
        }
    }
    for (i, &x) in v.iter().enumerate() {
        if !(x >= 0.0) || !x.is_finite() {
            out.push(Violation::NegativeMarginalEntry { which, index: i, value: x });
        }
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > MARGINAL_SUM_TOL {
        out.push(Violation::NonStochasticMarginal { which, sum, tol: MARGINAL_SUM_TOL });
    }
}

/// Validates a problem, passing it through unchanged when well-formed.
pub fn validate_problem(p: SeqOTProblem) -> Result<SeqOTProblem, Vec<Violation>> {
    p.validate()?;
    Ok(p)
}

/// Entry-wise exponentials `K^(i) = exp(-C^(i)/eps)` together with their
/// exact logarithms `-C^(i)/eps`.
///
/// The log matrices are kept alongside the exponentiated ones so the
/// log-domain backend never has to recover them from underflowed entries.
#[derive(Debug, Clone)]
pub struct GibbsKernels {
    pub epsilon: f64,
    pub kernels: Vec<Matrix>,
    pub log_kernels: Vec<Matrix>,
    dims: Vec<usize>,
}

impl GibbsKernels {
    pub fn chain_len(&self) -> usize {
        self.kernels.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// True when some exponentiated entry fell below the smallest positive
    /// normal number. The linear backend refuses to run in that case.
    pub fn has_subnormal_entries(&self) -> bool {
        self.kernels.iter().any(|k| k.data().iter().any(|&v| v < f64::MIN_POSITIVE))
    }

    /// `log ||K^(i)||_1`, evaluated stably from the log kernel.
    pub fn log_mass(&self, i: usize) -> f64 {
        logsumexp(self.log_kernels[i].data())
    }
}

/// Builds the Gibbs kernels for a validated problem.
pub fn build_kernels(p: &SeqOTProblem, epsilon: f64) -> Result<GibbsKernels, SeqotError> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(SeqotError::NonPositiveEpsilon(epsilon));
    }
    let log_kernels: Vec<Matrix> = p.costs.iter().map(|c| c.map(|v| -v / epsilon)).collect();
    let kernels: Vec<Matrix> = log_kernels.iter().map(|l| l.map(f64::exp)).collect();
    Ok(GibbsKernels { epsilon, kernels, log_kernels, dims: p.dims.clone() })
}

/// Cost matrix of the two-leg composition, with the minimizing middle index.
#[derive(Debug, Clone)]
pub struct ComposedCost {
    pub costs: Matrix,
    /// `argmin[i][j]` is the smallest `k` attaining the minimum.
    pub argmin: Vec<Vec<usize>>,
}

/// `C_{ij} = min_k C1_{ik} + C2_{kj}` for a two-matrix chain.
///
/// Ties break toward the smallest `k` so plan lifting is deterministic.
pub fn compose_min_cost(p: &SeqOTProblem) -> Result<ComposedCost, SeqotError> {
    if p.chain_len() != 2 {
        return Err(SeqotError::WrongChainLength { expected: 2, found: p.chain_len() });
    }
    let (c1, c2) = (&p.costs[0], &p.costs[1]);
    let (m1, m2, m3) = (c1.rows(), c1.cols(), c2.cols());
    let mut costs = Matrix::zeros(m1, m3);
    let mut argmin = vec![vec![0usize; m3]; m1];
    for i in 0..m1 {
        for j in 0..m3 {
            let mut best = f64::INFINITY;
            let mut best_k = 0;
            for k in 0..m2 {
                let v = c1.get(i, k) + c2.get(k, j);
                if v < best {
                    best = v;
                    best_k = k;
                }
            }
            costs.set(i, j, best);
            argmin[i][j] = best_k;
        }
    }
    Ok(ComposedCost { costs, argmin })
}

/// Regularization strength achieving suboptimality `delta` for a two-leg
/// chain: `delta / (2 log(m1 * m2^2 * m3))`.
pub fn epsilon_from_delta(p: &SeqOTProblem, delta: f64) -> Result<f64, SeqotError> {
    if p.chain_len() != 2 {
        return Err(SeqotError::WrongChainLength { expected: 2, found: p.chain_len() });
    }
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(SeqotError::InvalidConfig(format!("delta must be positive, got {delta}")));
    }
    let (m1, m2, m3) = (p.dims[0] as f64, p.dims[1] as f64, p.dims[2] as f64);
    let product = m1 * m2 * m2 * m3;
    if product <= 1.0 {
        return Err(SeqotError::DegenerateDimensions);
    }
    Ok(delta / (2.0 * product.ln()))
}

/// Which per-iteration residual decides termination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoppingCriterion {
    /// L1 distance of the half-updated edge marginals to `a` and `b`.
    HalfStepResidual,
    /// L1 mismatch across plan boundaries.
    BoundaryResidual,
}

/// Iteration arithmetic: plain scaling vectors, or their logarithms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Linear,
    LogDomain,
}

/// Solver configuration.
///
/// When `residual_tolerance` is absent the threshold is derived from `delta`
/// as `delta / (16 max_i ||C^(i)||_inf)`, which carries the suboptimality
/// guarantee for two-leg chains. Longer chains must supply the tolerance
/// explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveConfig {
    pub epsilon: f64,
    pub delta: Option<f64>,
    pub max_iters: u64,
    pub criterion: StoppingCriterion,
    pub backend: Backend,
    pub residual_tolerance: Option<f64>,
    /// Record every `trace_stride`-th iteration (the first and last are
    /// always recorded). Defaults to 1.
    pub trace_stride: u64,
}

impl SolveConfig {
    /// Threshold driven by a target suboptimality `delta`.
    pub fn with_delta(epsilon: f64, delta: f64) -> Self {
        SolveConfig {
            epsilon,
            delta: Some(delta),
            max_iters: 100_000,
            criterion: StoppingCriterion::HalfStepResidual,
            backend: Backend::Linear,
            residual_tolerance: None,
            trace_stride: 1,
        }
    }

    /// Threshold given directly as a residual tolerance.
    pub fn with_tolerance(epsilon: f64, tolerance: f64) -> Self {
        SolveConfig {
            epsilon,
            delta: None,
            max_iters: 100_000,
            criterion: StoppingCriterion::HalfStepResidual,
            backend: Backend::Linear,
            residual_tolerance: Some(tolerance),
            trace_stride: 1,
        }
    }

    pub fn backend(mut self, backend: Backend) -> Self {
        self.backend = backend;
        self
    }

    pub fn criterion(mut self, criterion: StoppingCriterion) -> Self {
        self.criterion = criterion;
        self
    }

    pub fn max_iters(mut self, max_iters: u64) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn validate(&self) -> Result<(), SeqotError> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(SeqotError::NonPositiveEpsilon(self.epsilon));
        }
        if let Some(d) = self.delta {
            if !(d > 0.0) || !d.is_finite() {
                return Err(SeqotError::InvalidConfig(format!("delta must be positive, got {d}")));
            }
        }
        if let Some(t) = self.residual_tolerance {
            if !(t > 0.0) || !t.is_finite() {
                return Err(SeqotError::InvalidConfig(format!(
                    "residual tolerance must be positive, got {t}"
                )));
            }
        }
        if self.delta.is_none() && self.residual_tolerance.is_none() {
            return Err(SeqotError::InvalidConfig(
                "either delta or residual_tolerance must be set".into(),
            ));
        }
        if self.trace_stride == 0 {
            return Err(SeqotError::InvalidConfig("trace_stride must be at least 1".into()));
        }
        Ok(())
    }
}

/// On-disk problem document: `{"costs": [...], "a": [...], "b": [...]}` with
/// dimensions inferred.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemFile {
    pub costs: Vec<Matrix>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl ProblemFile {
    pub fn into_problem(self) -> Result<SeqOTProblem, Vec<Violation>> {
        SeqOTProblem::new(self.costs, self.a, self.b)
    }

    pub fn from_problem(p: &SeqOTProblem) -> Self {
        ProblemFile { costs: p.costs.clone(), a: p.a.clone(), b: p.b.clone() }
    }
}
