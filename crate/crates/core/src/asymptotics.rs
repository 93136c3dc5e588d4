//! Large-sample covariance recursion `Sigma_t` of the interactive estimators,
//! the trace-ratio collapse criterion and the trace bounds built on chain
//! products of the limiting transition matrices.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::dynamics::{DynamicsError, SampleSchedule, SharingMode, TransitionMatrix};
use crate::graph::{InteractionGraph, NodeId};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AsymptoticsError {
    #[error("limiting proportion is zero: {0}")]
    ZeroProportion(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("round {t} is outside 1..={rounds}")]
    RoundOutOfRange { t: usize, rounds: usize },
    #[error("{0} is not a learner")]
    NotLearner(NodeId),
    #[error(transparent)]
    Schedule(#[from] DynamicsError),
}

/// Limiting proportions of one round `t >= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundProportions {
    /// `p_{t, nu -> mu}` by edge index.
    pub p_edge: Vec<f64>,
    /// `q_{t, i ∩ j}`: proportion of samples shared by the datasets of `i` and `j`.
    pub q: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimitProportions {
    /// `p_{0, mu}`; ignored for nature nodes.
    pub p_bar_0: Vec<f64>,
    /// Rounds `1..=T`.
    pub rounds: Vec<RoundProportions>,
    /// Relative sample totals `n_t` for `t = 0..=T`; only ratios matter.
    pub totals: Vec<f64>,
}

impl LimitProportions {
    /// Proportions implied by a sample schedule treated as the limit shape.
    pub fn from_schedule(
        graph: &InteractionGraph,
        schedule: &SampleSchedule,
        rounds: usize,
    ) -> Result<Self, AsymptoticsError> {
        let k = graph.node_count();
        let n0 = schedule.round_total(graph, 0)? as f64;
        let p_bar_0 = graph
            .nodes()
            .map(|v| {
                if graph.is_nature(v) || n0 == 0.0 {
                    Ok(0.0)
                } else {
                    Ok(schedule.initial_count(v)? as f64 / n0)
                }
            })
            .collect::<Result<Vec<_>, DynamicsError>>()?;
        let mut totals = vec![n0];
        let mut out = Vec::with_capacity(rounds);
        for t in 1..=rounds {
            let nt = schedule.round_total(graph, t)? as f64;
            totals.push(nt);
            let counts = schedule.edge_counts(graph, t)?;
            let scale = if nt > 0.0 { 1.0 / nt } else { 0.0 };
            let p_edge: Vec<f64> = counts.iter().map(|&c| c as f64 * scale).collect();
            let mut q = DMatrix::zeros(k, k);
            for i in graph.learners() {
                for j in graph.learners() {
                    q[(i.0, j.0)] = match schedule.sharing_mode {
                        SharingMode::IndependentPerEdge if i != j => 0.0,
                        SharingMode::IndependentPerEdge => in_share(graph, &p_edge, i),
                        SharingMode::BroadcastPerSource => graph
                            .in_neighbors(i)
                            .iter()
                            .filter(|s| graph.in_neighbors(j).contains(s))
                            .map(|&s| {
                                let ci = counts[graph.edge_index(s, i).expect("edge")];
                                let cj = counts[graph.edge_index(s, j).expect("edge")];
                                ci.min(cj) as f64 * scale
                            })
                            .sum(),
                    };
                }
            }
            out.push(RoundProportions { p_edge, q });
        }
        Ok(LimitProportions { p_bar_0, rounds: out, totals })
    }

    /// Independent per-edge datasets with the given edge proportions per round.
    pub fn independent(graph: &InteractionGraph, p_bar_0: Vec<f64>, p_edge: Vec<Vec<f64>>, totals: Vec<f64>) -> Self {
        let k = graph.node_count();
        let rounds = p_edge
            .into_iter()
            .map(|p| {
                let mut q = DMatrix::zeros(k, k);
                for v in graph.learners() {
                    q[(v.0, v.0)] = in_share(graph, &p, v);
                }
                RoundProportions { p_edge: p, q }
            })
            .collect();
        LimitProportions { p_bar_0, rounds, totals }
    }

    pub fn horizon(&self) -> usize {
        self.rounds.len()
    }

    /// `b_{t,s} = n_t / n_s`, taken as 1 when either total is zero.
    pub fn b(&self, t: usize, s: usize) -> f64 {
        let (nt, ns) = (self.totals[t], self.totals[s]);
        if nt == 0.0 || ns == 0.0 {
            1.0
        } else {
            nt / ns
        }
    }

    pub fn round(&self, t: usize) -> Result<&RoundProportions, AsymptoticsError> {
        if t == 0 || t > self.rounds.len() {
            return Err(AsymptoticsError::RoundOutOfRange { t, rounds: self.rounds.len() });
        }
        Ok(&self.rounds[t - 1])
    }

    /// `sum_nu p_{t, nu -> node}`.
    pub fn in_share(&self, graph: &InteractionGraph, t: usize, node: NodeId) -> Result<f64, AsymptoticsError> {
        Ok(in_share(graph, &self.round(t)?.p_edge, node))
    }

    /// Limiting transition matrix `P_t`.
    pub fn transition(&self, graph: &InteractionGraph, t: usize) -> Result<TransitionMatrix, AsymptoticsError> {
        let r = self.round(t)?;
        for v in graph.learners() {
            if in_share(graph, &r.p_edge, v) <= 0.0 {
                return Err(AsymptoticsError::ZeroProportion(format!("in-edges of {v} at round {t}")));
            }
        }
        Ok(TransitionMatrix::from_edge_weights(graph, t, &r.p_edge))
    }

    fn check_shape(&self, graph: &InteractionGraph) -> Result<(), AsymptoticsError> {
        let k = graph.node_count();
        let mismatch = |expected, got| Err(AsymptoticsError::DimensionMismatch { expected, got });
        if self.p_bar_0.len() != k {
            return mismatch(k, self.p_bar_0.len());
        }
        if self.totals.len() != self.rounds.len() + 1 {
            return mismatch(self.rounds.len() + 1, self.totals.len());
        }
        for r in &self.rounds {
            if r.p_edge.len() != graph.edges().len() {
                return mismatch(graph.edges().len(), r.p_edge.len());
            }
            if r.q.nrows() != k || r.q.ncols() != k {
                return mismatch(k, r.q.nrows());
            }
        }
        Ok(())
    }
}

fn in_share(graph: &InteractionGraph, p_edge: &[f64], node: NodeId) -> f64 {
    graph.in_neighbors(node).iter().map(|&s| p_edge[graph.edge_index(s, node).expect("edge")]).sum()
}

/// `Sigma_t`, a `dK x dK` matrix of `d x d` blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceState {
    pub t: usize,
    pub d: usize,
    pub sigma: DMatrix<f64>,
}

impl CovarianceState {
    pub fn block(&self, i: NodeId, j: NodeId) -> DMatrix<f64> {
        self.sigma.view((i.0 * self.d, j.0 * self.d), (self.d, self.d)).into_owned()
    }

    pub fn block_trace(&self, i: NodeId) -> f64 {
        (0..self.d).map(|a| self.sigma[(i.0 * self.d + a, i.0 * self.d + a)]).sum()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.sigma.clone().symmetric_eigenvalues().min()
    }

    /// PSD up to `-1e-9 * ||Sigma||_2`.
    pub fn is_psd(&self) -> bool {
        let eig = self.sigma.clone().symmetric_eigenvalues();
        let scale = eig.iter().fold(0.0f64, |m, e| m.max(e.abs()));
        eig.min() >= -1e-9 * scale
    }

    pub fn is_symmetric(&self) -> bool {
        let scale = self.sigma.amax().max(1.0);
        (&self.sigma - self.sigma.transpose()).amax() <= 1e-10 * scale
    }
}

pub fn sigma0(
    graph: &InteractionGraph,
    props: &LimitProportions,
    v_star: &DMatrix<f64>,
) -> Result<CovarianceState, AsymptoticsError> {
    props.check_shape(graph)?;
    let d = v_star.nrows();
    let k = graph.node_count();
    let mut sigma = DMatrix::zeros(d * k, d * k);
    for v in graph.nodes().filter(|&v| !graph.is_nature(v)) {
        let p = props.p_bar_0[v.0];
        if p <= 0.0 {
            return Err(AsymptoticsError::ZeroProportion(format!("round 0 at {v}")));
        }
        sigma.view_mut((v.0 * d, v.0 * d), (d, d)).copy_from(&(v_star / p));
    }
    Ok(CovarianceState { t: 0, d, sigma })
}

pub fn v_t(
    graph: &InteractionGraph,
    props: &LimitProportions,
    v_star: &DMatrix<f64>,
    t: usize,
) -> Result<DMatrix<f64>, AsymptoticsError> {
    props.check_shape(graph)?;
    let d = v_star.nrows();
    let k = graph.node_count();
    let r = props.round(t)?;
    let learners = graph.learners();
    let mut shares = vec![0.0; k];
    for &v in &learners {
        shares[v.0] = in_share(graph, &r.p_edge, v);
        if shares[v.0] <= 0.0 {
            return Err(AsymptoticsError::ZeroProportion(format!("in-edges of {v} at round {t}")));
        }
    }
    let mut out = DMatrix::zeros(d * k, d * k);
    for &i in &learners {
        for &j in &learners {
            let c = r.q[(i.0, j.0)] / (shares[i.0] * shares[j.0]);
            if c != 0.0 {
                out.view_mut((i.0 * d, j.0 * d), (d, d)).copy_from(&(v_star * c));
            }
        }
    }
    Ok(out)
}

/// `Sigma_t = b (P ⊗ I) Sigma_{t-1} (P ⊗ I)^T + V_t`, computed block-wise.
pub fn recurse(
    prev: &CovarianceState,
    p_bar: &TransitionMatrix,
    b_ratio: f64,
    v_t_mat: &DMatrix<f64>,
) -> Result<CovarianceState, AsymptoticsError> {
    let d = prev.d;
    let k = p_bar.dim();
    if prev.sigma.nrows() != d * k {
        return Err(AsymptoticsError::DimensionMismatch { expected: d * k, got: prev.sigma.nrows() });
    }
    if v_t_mat.nrows() != d * k || v_t_mat.ncols() != d * k {
        return Err(AsymptoticsError::DimensionMismatch { expected: d * k, got: v_t_mat.nrows() });
    }
    let p = &p_bar.p;
    // A = (P ⊗ I) Sigma: block (i, l) = sum_m P_im Sigma_ml
    let mut a = DMatrix::zeros(d * k, d * k);
    for i in 0..k {
        for m in (0..k).filter(|&m| p[(i, m)] != 0.0) {
            let rows = prev.sigma.rows(m * d, d) * p[(i, m)];
            let mut dst = a.rows_mut(i * d, d);
            dst += rows;
        }
    }
    // A (P ⊗ I)^T: block (i, j) = sum_l A_il P_jl
    let mut out = v_t_mat.clone();
    for j in 0..k {
        for l in (0..k).filter(|&l| p[(j, l)] != 0.0) {
            let cols = a.columns(l * d, d) * (b_ratio * p[(j, l)]);
            let mut dst = out.columns_mut(j * d, d);
            dst += cols;
        }
    }
    let sigma = (&out + out.transpose()) * 0.5;
    Ok(CovarianceState { t: prev.t + 1, d, sigma })
}

/// `Sigma_0, ..., Sigma_T`.
pub fn covariance_series(
    graph: &InteractionGraph,
    props: &LimitProportions,
    v_star: &DMatrix<f64>,
    rounds: usize,
) -> Result<Vec<CovarianceState>, AsymptoticsError> {
    if rounds > props.horizon() {
        return Err(AsymptoticsError::RoundOutOfRange { t: rounds, rounds: props.horizon() });
    }
    let mut out = vec![sigma0(graph, props, v_star)?];
    for t in 1..=rounds {
        let p = props.transition(graph, t)?;
        let v = v_t(graph, props, v_star, t)?;
        let next = recurse(out.last().expect("nonempty"), &p, props.b(t, t - 1), &v)?;
        out.push(next);
    }
    Ok(out)
}

/// `Tr(Sigma_{t,mu,mu}) / Tr(V*)` for learners, `values[t - 1][j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRatioSeries {
    pub learners: Vec<NodeId>,
    pub values: Vec<Vec<f64>>,
}

impl TraceRatioSeries {
    pub fn rounds(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, t: usize, node: NodeId) -> Option<f64> {
        let j = self.learners.iter().position(|&v| v == node)?;
        self.values.get(t.checked_sub(1)?).map(|row| row[j])
    }

    pub fn curve(&self, node: NodeId) -> Vec<(usize, f64)> {
        (1..=self.rounds()).filter_map(|t| self.get(t, node).map(|r| (t, r))).collect()
    }
}

pub fn trace_ratio_series(
    graph: &InteractionGraph,
    props: &LimitProportions,
    v_star: &DMatrix<f64>,
    rounds: usize,
) -> Result<TraceRatioSeries, AsymptoticsError> {
    let series = covariance_series(graph, props, v_star, rounds)?;
    Ok(ratios_of(graph, &series, v_star.trace()))
}

pub fn ratios_of(graph: &InteractionGraph, series: &[CovarianceState], trace_v: f64) -> TraceRatioSeries {
    let learners = graph.learners();
    let values = series[1..]
        .iter()
        .map(|s| learners.iter().map(|&v| s.block_trace(v) / trace_v).collect())
        .collect();
    TraceRatioSeries { learners, values }
}

/// Rows `mu` of `J_{T, t+1}` for `t = 0..=T` (index `t`).
fn chain_rows(
    graph: &InteractionGraph,
    props: &LimitProportions,
    rounds: usize,
    mu: NodeId,
) -> Result<Vec<Vec<f64>>, AsymptoticsError> {
    let k = graph.node_count();
    let mut row = vec![0.0; k];
    row[mu.0] = 1.0;
    let mut rows = vec![Vec::new(); rounds + 1];
    rows[rounds] = row.clone();
    for t in (1..=rounds).rev() {
        let p = props.transition(graph, t)?.p;
        let next: Vec<f64> = (0..k).map(|c| (0..k).map(|r| row[r] * p[(r, c)]).sum()).collect();
        row = next;
        rows[t - 1] = row.clone();
    }
    Ok(rows)
}

/// Lower and upper bounds on `Tr(Sigma_{T,mu,mu})`.
///
/// Each round contributes `b_{T,t} (sum_{nu in M_l} J_{T,t+1,mu,nu})^2` over
/// the total (lower) or smallest (upper) learner in-share. The round-0 term of
/// the lower bound keeps the squared row mass on non-nature nodes, which is
/// what Cauchy-Schwarz gives when part of the row sits on nature nodes.
pub fn trace_bounds(
    graph: &InteractionGraph,
    props: &LimitProportions,
    v_star: &DMatrix<f64>,
    rounds: usize,
    mu: NodeId,
) -> Result<(f64, f64), AsymptoticsError> {
    if !graph.is_learner(mu) {
        return Err(AsymptoticsError::NotLearner(mu));
    }
    props.check_shape(graph)?;
    if rounds > props.horizon() {
        return Err(AsymptoticsError::RoundOutOfRange { t: rounds, rounds: props.horizon() });
    }
    let learners = graph.learners();
    let rows = chain_rows(graph, props, rounds, mu)?;
    let mut lower = 0.0;
    let mut upper = 0.0;
    for t in 1..=rounds {
        let r = props.round(t)?;
        let mass: f64 = learners.iter().map(|v| rows[t][v.0]).sum();
        let shares: Vec<f64> = learners.iter().map(|&v| in_share(graph, &r.p_edge, v)).collect();
        let total: f64 = shares.iter().sum();
        let min = shares.iter().cloned().fold(f64::INFINITY, f64::min);
        if min <= 0.0 {
            return Err(AsymptoticsError::ZeroProportion(format!("learner in-edges at round {t}")));
        }
        let b = props.b(rounds, t);
        lower += b * mass * mass / total;
        upper += b * mass * mass / min;
    }
    let fitted: Vec<NodeId> = graph.nodes().filter(|&v| !graph.is_nature(v)).collect();
    let p0: Vec<f64> = fitted.iter().map(|v| props.p_bar_0[v.0]).collect();
    if p0.iter().any(|&p| p <= 0.0) {
        return Err(AsymptoticsError::ZeroProportion("round 0".into()));
    }
    let mass0: f64 = fitted.iter().map(|v| rows[0][v.0]).sum();
    let b0 = props.b(rounds, 0);
    lower += b0 * mass0 * mass0 / p0.iter().sum::<f64>();
    upper += b0 / p0.iter().cloned().fold(f64::INFINITY, f64::min);
    let tr = v_star.trace();
    Ok((lower * tr, upper * tr))
}

pub fn kron_identity(p: &DMatrix<f64>, d: usize) -> DMatrix<f64> {
    p.kronecker(&DMatrix::identity(d, d))
}

/// `Sigma_T` from the unrolled sum over chain products, with explicit
/// Kronecker products.
pub fn unrolled_sum(
    graph: &InteractionGraph,
    props: &LimitProportions,
    v_star: &DMatrix<f64>,
    rounds: usize,
) -> Result<DMatrix<f64>, AsymptoticsError> {
    let d = v_star.nrows();
    let k = graph.node_count();
    let mats: Vec<TransitionMatrix> =
        (1..=rounds).map(|t| props.transition(graph, t)).collect::<Result<_, _>>()?;
    let chain = |s: usize| {
        // J_{T, s} = P_T ... P_s
        let mut acc = DMatrix::identity(k, k);
        for m in &mats[s.saturating_sub(1)..] {
            acc = &m.p * acc;
        }
        acc
    };
    let s0 = sigma0(graph, props, v_star)?.sigma;
    let j1 = kron_identity(&chain(1), d);
    let mut total = &j1 * s0 * j1.transpose() * props.b(rounds, 0);
    for t in 1..=rounds {
        let j = kron_identity(&chain(t + 1), d);
        total += &j * v_t(graph, props, v_star, t)? * j.transpose() * props.b(rounds, t);
    }
    Ok(total)
}
