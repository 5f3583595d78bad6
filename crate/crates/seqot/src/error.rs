//! Error types shared across the library.

use thiserror::Error;

/// A single violated well-formedness condition of a problem instance.
///
/// Validation reports every violation it finds, not just the first.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Violation {
    #[error("marginal `{which}` sums to {sum} (expected 1 within {tol})")]
    NonStochasticMarginal { which: &'static str, sum: f64, tol: f64 },
    #[error("marginal `{which}` has negative entry {value} at index {index}")]
    NegativeMarginalEntry { which: &'static str, index: usize, value: f64 },
    #[error("cost matrix {index} has negative entry {value} at ({row}, {col})")]
    NegativeCost { index: usize, row: usize, col: usize, value: f64 },
    #[error("cost matrix {index} has non-finite entry at ({row}, {col})")]
    NonFiniteCost { index: usize, row: usize, col: usize },
    #[error("cost matrix {index} is {found_rows}x{found_cols}, expected {want_rows}x{want_cols}")]
    ShapeMismatch {
        index: usize,
        found_rows: usize,
        found_cols: usize,
        want_rows: usize,
        want_cols: usize,
    },
    #[error("chain length {m} is below the minimum of 2")]
    ChainTooShort { m: usize },
}

/// Library-wide error type.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SeqotError {
    #[error("invalid problem: {}", format_violations(.0))]
    InvalidProblem(Vec<Violation>),
    #[error("epsilon must be positive and finite, got {0}")]
    NonPositiveEpsilon(f64),
    #[error("operation requires chain length {expected}, problem has {found}")]
    WrongChainLength { expected: usize, found: usize },
    #[error("all dimensions are 1; the dimension-dependent logarithm vanishes")]
    DegenerateDimensions,
    #[error("vector lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("entry {value} at index {index} is not strictly positive and finite")]
    NonPositiveEntry { index: usize, value: f64 },
    #[error("denominator entry {index} is zero while the numerator carries mass")]
    ZeroDenominatorWithPositiveMass { index: usize },
    #[error("numerical underflow in the linear backend at iteration {n}: {context}")]
    NumericalUnderflow { n: u64, context: &'static str },
    #[error("kernel {index} has an entry below the smallest positive normal number; use the log-domain backend")]
    ZeroKernelEntry { index: usize },
    #[error("matrix has zero total mass; nothing to rescale")]
    ZeroMassInput,
    #[error("rounding target `{which}` is not a distribution (sum {sum})")]
    TargetNotDistribution { which: &'static str, sum: f64 },
    #[error("instance size {size} exceeds the exact-solver limit {limit}")]
    ScaleExceeded { size: usize, limit: usize },
    #[error("supplies and demands differ in total mass by {gap}")]
    InfeasibleSupplies { gap: f64 },
    #[error("reference iteration stalled at residual {residual} after {iters} iterations")]
    ReferenceNotConverged { residual: f64, iters: u64 },
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("states are not consecutive iterations: {first} and {second}")]
    NonConsecutiveStates { first: u64, second: u64 },
    #[error("state dimensions do not match the kernels")]
    DimensionMismatch,
}

fn format_violations(vs: &[Violation]) -> String {
    vs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}
