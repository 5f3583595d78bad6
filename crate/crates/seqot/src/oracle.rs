//! Desk-scale ground truth: the exact unregularized optimum via min-cost
//! flow on the layered graph, a second oracle through cost composition, and
//! a high-precision regularized reference for rate diagnostics.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::SeqotError;
use crate::linalg::Matrix;
use crate::plans::{PlanKind, PlanSet};
use crate::problem::{
    build_kernels, compose_min_cost, Backend, SeqOTProblem, SolveConfig, StoppingCriterion,
};
use crate::sinkhorn;

/// Upper limit on `sum_i m_i * m_(i+1)` for the exact solver.
pub const SCALE_LIMIT: usize = 10_000;

/// Residual supply below this counts as fully routed.
const SUPPLY_TOL: f64 = 1e-12;

/// Residual capacities below this are treated as saturated so float dust
/// cannot stall an augmentation.
const CAP_EPS: f64 = 1e-15;

/// Exact optimum with one optimal plan tuple and node potentials.
#[derive(Debug, Clone)]
pub struct ExactSolution {
    pub optimum: f64,
    pub plans: PlanSet,
    /// Per-layer node potentials certifying optimality through reduced
    /// costs.
    pub dual_certificate: Option<Vec<Vec<f64>>>,
}

/// Scaling vectors of a near-exactly converged regularized solve.
#[derive(Debug, Clone)]
pub struct ReferenceVectors {
    pub u_hat: Vec<Vec<f64>>,
    pub residual_at_reference: f64,
}

#[derive(Debug, Clone)]
struct FlowArc {
    to: usize,
    rev: usize,
    cap: f64,
    cost: f64,
    flow: f64,
    forward: bool,
}

struct FlowNetwork {
    adj: Vec<Vec<FlowArc>>,
    potential: Vec<f64>,
}

#[derive(PartialEq)]
struct HeapKey(f64);

impl Eq for HeapKey {}
impl PartialOrd for HeapKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl FlowNetwork {
    fn new(n: usize) -> Self {
        FlowNetwork { adj: vec![Vec::new(); n], potential: vec![0.0; n] }
    }

    fn add_arc(&mut self, u: usize, v: usize, cap: f64, cost: f64) {
        let rev_u = self.adj[v].len();
        let rev_v = self.adj[u].len();
        self.adj[u].push(FlowArc { to: v, rev: rev_u, cap, cost, flow: 0.0, forward: true });
        self.adj[v].push(FlowArc { to: u, rev: rev_v, cap: 0.0, cost: -cost, flow: 0.0, forward: false });
    }

    /// Shortest-path distances under reduced costs from `s`; returns the
    /// parent arc of every reached node.
    fn dijkstra(&self, s: usize) -> (Vec<f64>, Vec<Option<(usize, usize)>>) {
        let n = self.adj.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; n];
        let mut heap = BinaryHeap::new();
        dist[s] = 0.0;
        heap.push(Reverse((HeapKey(0.0), s)));
        while let Some(Reverse((HeapKey(d), u))) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            for (idx, arc) in self.adj[u].iter().enumerate() {
                if arc.cap <= CAP_EPS {
                    continue;
                }
                // Nonnegative up to float dust; clamp so the heap order
                // stays consistent.
                let rc = (arc.cost + self.potential[u] - self.potential[arc.to]).max(0.0);
                let nd = d + rc;
                if nd < dist[arc.to] {
                    dist[arc.to] = nd;
                    parent[arc.to] = Some((u, idx));
                    heap.push(Reverse((HeapKey(nd), arc.to)));
                }
            }
        }
        (dist, parent)
    }

    /// Successive shortest paths from `s` to `t` until the residual supply
    /// drops to the tolerance. Returns the unrouted remainder.
    fn route(&mut self, s: usize, t: usize, supply: f64) -> Result<f64, SeqotError> {
        let mut excess = supply;
        while excess > SUPPLY_TOL {
            let (dist, parent) = self.dijkstra(s);
            if !dist[t].is_finite() {
                return Ok(excess);
            }
            let cap = dist[t];
            for (v, d) in dist.iter().enumerate() {
                self.potential[v] += d.min(cap);
            }
            // Bottleneck along the path.
            let mut bottleneck = f64::INFINITY;
            let mut v = t;
            while v != s {
                let (u, idx) = parent[v].expect("reached node has a parent");
                bottleneck = bottleneck.min(self.adj[u][idx].cap);
                v = u;
            }
            let push = bottleneck.min(excess);
            let mut v = t;
            while v != s {
                let (u, idx) = parent[v].expect("reached node has a parent");
                let rev = self.adj[u][idx].rev;
                self.adj[u][idx].cap -= push;
                if self.adj[u][idx].forward {
                    self.adj[u][idx].flow += push;
                } else {
                    self.adj[v][rev].flow -= push;
                }
                self.adj[v][rev].cap += push;
                v = u;
            }
            excess -= push;
        }
        Ok(excess.max(0.0))
    }
}

/// Min-cost routing of supplies `a` into demands `b` through a chain of
/// cost matrices. Returns the optimum, the per-leg flow matrices, and the
/// per-layer node potentials.
fn min_cost_chain_flow(
    chain: &[&Matrix],
    a: &[f64],
    b: &[f64],
) -> Result<(f64, Vec<Matrix>, Vec<Vec<f64>>), SeqotError> {
    let mut dims = Vec::with_capacity(chain.len() + 1);
    dims.push(chain[0].rows());
    for c in chain {
        dims.push(c.cols());
    }
    let total_a: f64 = a.iter().sum();
    let total_b: f64 = b.iter().sum();
    if (total_a - total_b).abs() > 2.0 * SUPPLY_TOL {
        return Err(SeqotError::InfeasibleSupplies { gap: (total_a - total_b).abs() });
    }

    let offsets: Vec<usize> = dims
        .iter()
        .scan(1usize, |acc, &d| {
            let here = *acc;
            *acc += d;
            Some(here)
        })
        .collect();
    let node_count = 1 + dims.iter().sum::<usize>() + 1;
    let source = 0;
    let sink = node_count - 1;

    let mut net = FlowNetwork::new(node_count);
    for (i, &ai) in a.iter().enumerate() {
        net.add_arc(source, offsets[0] + i, ai, 0.0);
    }
    for (l, c) in chain.iter().enumerate() {
        for j in 0..c.rows() {
            for k in 0..c.cols() {
                net.add_arc(offsets[l] + j, offsets[l + 1] + k, f64::INFINITY, c.get(j, k));
            }
        }
    }
    for (k, &bk) in b.iter().enumerate() {
        net.add_arc(offsets[chain.len()] + k, sink, bk, 0.0);
    }

    let leftover = net.route(source, sink, total_a)?;
    if leftover > SUPPLY_TOL {
        return Err(SeqotError::InfeasibleSupplies { gap: leftover });
    }

    let mut plans = Vec::with_capacity(chain.len());
    for (l, c) in chain.iter().enumerate() {
        let mut plan = Matrix::zeros(c.rows(), c.cols());
        for j in 0..c.rows() {
            let mut k = 0;
            for arc in &net.adj[offsets[l] + j] {
                if arc.forward && arc.to >= offsets[l + 1] && arc.to < offsets[l + 1] + c.cols() {
                    plan.set(j, k, arc.flow.max(0.0));
                    k += 1;
                }
            }
        }
        plans.push(plan);
    }
    let optimum: f64 = plans.iter().zip(chain).map(|(p, c)| c.frob_inner(p)).sum();
    let potentials: Vec<Vec<f64>> = dims
        .iter()
        .enumerate()
        .map(|(l, &d)| (0..d).map(|j| net.potential[offsets[l] + j]).collect())
        .collect();
    Ok((optimum, plans, potentials))
}

fn check_scale(p: &SeqOTProblem) -> Result<(), SeqotError> {
    let size: usize = p.dims.windows(2).map(|w| w[0] * w[1]).sum();
    if size > SCALE_LIMIT {
        return Err(SeqotError::ScaleExceeded { size, limit: SCALE_LIMIT });
    }
    Ok(())
}

/// Exact unregularized optimum by successive shortest paths on the layered
/// graph: supplies `a` on the first layer, demands `b` on the last, one arc
/// per cost entry in between.
pub fn exact_seqot(p: &SeqOTProblem) -> Result<ExactSolution, SeqotError> {
    p.validate().map_err(SeqotError::InvalidProblem)?;
    check_scale(p)?;
    let chain: Vec<&Matrix> = p.costs.iter().collect();
    let (optimum, plans, potentials) = min_cost_chain_flow(&chain, &p.a, &p.b)?;
    Ok(ExactSolution {
        optimum,
        plans: PlanSet { plans, kind: PlanKind::Exact, iteration: 0 },
        dual_certificate: Some(potentials),
    })
}

/// Second oracle for two-leg chains: solve the flat transport problem under
/// the composed cost `C_ij = min_k C1_ik + C2_kj`, then route each unit of
/// plan mass through its minimizing middle index (smallest on ties).
pub fn reduce_to_ot(p: &SeqOTProblem) -> Result<(f64, PlanSet), SeqotError> {
    if p.chain_len() != 2 {
        return Err(SeqotError::WrongChainLength { expected: 2, found: p.chain_len() });
    }
    p.validate().map_err(SeqotError::InvalidProblem)?;
    check_scale(p)?;
    let composed = compose_min_cost(p)?;
    let (optimum, mut flat, _) = min_cost_chain_flow(&[&composed.costs], &p.a, &p.b)?;
    let gamma = flat.remove(0);
    let mut first = Matrix::zeros(p.dims[0], p.dims[1]);
    let mut second = Matrix::zeros(p.dims[1], p.dims[2]);
    for i in 0..gamma.rows() {
        for j in 0..gamma.cols() {
            let mass = gamma.get(i, j);
            if mass > 0.0 {
                let k = composed.argmin[i][j];
                first.set(i, k, first.get(i, k) + mass);
                second.set(k, j, second.get(k, j) + mass);
            }
        }
    }
    Ok((optimum, PlanSet { plans: vec![first, second], kind: PlanKind::Exact, iteration: 0 }))
}

/// Runs the log-domain backend down to boundary residual `1e-13` (capped at
/// a million iterations) and returns the terminal scaling vectors. Plans
/// induced by these vectors are feasible far below test tolerances, so they
/// serve as the reference optimum for rate checks.
pub fn high_precision_reference(
    p: &SeqOTProblem,
    epsilon: f64,
) -> Result<ReferenceVectors, SeqotError> {
    const RESIDUAL_FLOOR: f64 = 1e-13;
    const ITER_CAP: u64 = 1_000_000;
    let mut config = SolveConfig::with_tolerance(epsilon, RESIDUAL_FLOOR)
        .backend(Backend::LogDomain)
        .criterion(StoppingCriterion::BoundaryResidual)
        .max_iters(ITER_CAP);
    // Residuals are needed only at the end; skip intermediate records.
    config.trace_stride = u64::MAX;
    let report = sinkhorn::solve(p, &config)?;
    let residual = report.trace.last().map(|r| r.boundary_residual).unwrap_or(f64::NAN);
    if !report.converged {
        return Err(SeqotError::ReferenceNotConverged {
            residual,
            iters: report.terminal.iteration(),
        });
    }
    let u_hat = report.terminal.scaling_vectors(epsilon);
    for v in &u_hat {
        if !crate::linalg::all_positive_finite(v) {
            return Err(SeqotError::NumericalUnderflow {
                n: report.terminal.iteration(),
                context: "reference vectors overflow the linear range",
            });
        }
    }
    Ok(ReferenceVectors { u_hat, residual_at_reference: residual })
}
