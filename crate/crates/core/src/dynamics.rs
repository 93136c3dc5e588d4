//! Sample schedules, row-stochastic transition matrices, their chain products,
//! and the block transfer operators of the pooled least-squares recursion.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{InteractionGraph, NodeId};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("no sample count for edge {src} -> {dst} at round {round}")]
    MissingScheduleEntry { round: usize, src: NodeId, dst: NodeId },
    #[error("no round-0 sample count for {0}")]
    MissingInitialCount(NodeId),
    #[error("sample count for {what} must be at least 1")]
    ZeroCount { what: String },
    #[error("learner {node} pools {pooled} samples at round {round}, fewer than dimension {d}")]
    Underdetermined { node: NodeId, round: usize, pooled: usize, d: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("aggregate Gram matrix of {0} is singular")]
    SingularAggregateGram(NodeId),
    #[error("transition matrices are defined for rounds t >= 1")]
    RoundZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingMode {
    /// Every edge carries its own independent dataset.
    #[default]
    IndependentPerEdge,
    /// A source draws one dataset per round; each out-edge receives a prefix of it.
    BroadcastPerSource,
}

/// Per-edge count override, optionally restricted to an inclusive round range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeOverride {
    pub src: NodeId,
    pub dst: NodeId,
    pub n: usize,
    pub rounds: Option<(usize, usize)>,
}

/// Sample counts for round-0 fits and every `(round, edge)` pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSchedule {
    pub default_n: Option<usize>,
    pub n0_overrides: BTreeMap<NodeId, usize>,
    pub edge_overrides: Vec<EdgeOverride>,
    pub sharing_mode: SharingMode,
}

impl SampleSchedule {
    pub fn constant(n: usize) -> Self {
        SampleSchedule {
            default_n: Some(n),
            n0_overrides: BTreeMap::new(),
            edge_overrides: Vec::new(),
            sharing_mode: SharingMode::IndependentPerEdge,
        }
    }

    pub fn with_sharing(mut self, mode: SharingMode) -> Self {
        self.sharing_mode = mode;
        self
    }

    /// `n_{0, node}`.
    pub fn initial_count(&self, node: NodeId) -> Result<usize, DynamicsError> {
        self.n0_overrides
            .get(&node)
            .copied()
            .or(self.default_n)
            .ok_or(DynamicsError::MissingInitialCount(node))
    }

    /// `n_{round, src -> dst}`; the last matching override wins.
    pub fn edge_count(&self, round: usize, src: NodeId, dst: NodeId) -> Result<usize, DynamicsError> {
        self.edge_overrides
            .iter()
            .rev()
            .find(|o| {
                o.src == src && o.dst == dst && o.rounds.is_none_or(|(lo, hi)| lo <= round && round <= hi)
            })
            .map(|o| o.n)
            .or(self.default_n)
            .ok_or(DynamicsError::MissingScheduleEntry { round, src, dst })
    }

    /// Counts for every edge of `graph` at `round`, in edge-index order.
    pub fn edge_counts(&self, graph: &InteractionGraph, round: usize) -> Result<Vec<usize>, DynamicsError> {
        graph.edges().iter().map(|&(s, t)| self.edge_count(round, s, t)).collect()
    }

    /// Size of the dataset `n_{round, node}` a node generates in a round.
    pub fn source_total(&self, graph: &InteractionGraph, round: usize, node: NodeId) -> Result<usize, DynamicsError> {
        let counts = graph
            .out_neighbors(node)
            .iter()
            .map(|&dst| self.edge_count(round, node, dst))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(match self.sharing_mode {
            SharingMode::IndependentPerEdge => counts.iter().sum(),
            SharingMode::BroadcastPerSource => counts.into_iter().max().unwrap_or(0),
        })
    }

    /// Total samples generated in a round (`n_t`); for round 0, the total over
    /// non-nature round-0 fits.
    pub fn round_total(&self, graph: &InteractionGraph, round: usize) -> Result<usize, DynamicsError> {
        if round == 0 {
            graph
                .nodes()
                .filter(|&v| !graph.is_nature(v))
                .map(|v| self.initial_count(v))
                .sum()
        } else {
            graph.nodes().map(|v| self.source_total(graph, round, v)).sum()
        }
    }

    /// Pooled in-edge count of a learner at a round.
    pub fn pooled_count(&self, graph: &InteractionGraph, round: usize, node: NodeId) -> Result<usize, DynamicsError> {
        graph.in_neighbors(node).iter().map(|&src| self.edge_count(round, src, node)).sum()
    }

    /// Checks count positivity and that every pooled design can have full rank.
    pub fn validate(&self, graph: &InteractionGraph, d: usize, rounds: usize) -> Result<(), DynamicsError> {
        for v in graph.nodes().filter(|&v| !graph.is_nature(v)) {
            if self.initial_count(v)? == 0 {
                return Err(DynamicsError::ZeroCount { what: format!("round 0 at {v}") });
            }
        }
        for round in 1..=rounds {
            for &(s, t) in graph.edges() {
                if self.edge_count(round, s, t)? == 0 {
                    return Err(DynamicsError::ZeroCount { what: format!("{s} -> {t} at round {round}") });
                }
            }
            for v in graph.learners() {
                let pooled = self.pooled_count(graph, round, v)?;
                if pooled < d {
                    return Err(DynamicsError::Underdetermined { node: v, round, pooled, d });
                }
            }
        }
        Ok(())
    }
}

/// `P_t`: learner rows hold the in-edge sample shares, frozen rows are unit vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub t: usize,
    pub p: DMatrix<f64>,
}

impl TransitionMatrix {
    /// Builds a transition matrix from per-edge weights (counts or limiting
    /// proportions), normalizing each learner row.
    pub fn from_edge_weights(graph: &InteractionGraph, t: usize, weights: &[f64]) -> Self {
        let k = graph.node_count();
        let mut p = DMatrix::zeros(k, k);
        for v in graph.nodes() {
            if !graph.is_learner(v) {
                p[(v.0, v.0)] = 1.0;
            }
        }
        for (e, &(src, dst)) in graph.edges().iter().enumerate() {
            p[(dst.0, src.0)] = weights[e];
        }
        for v in graph.learners() {
            let total: f64 = p.row(v.0).sum();
            p.row_mut(v.0).scale_mut(1.0 / total);
        }
        TransitionMatrix { t, p }
    }

    pub fn dim(&self) -> usize {
        self.p.nrows()
    }
}

pub fn transition_matrix(
    graph: &InteractionGraph,
    schedule: &SampleSchedule,
    t: usize,
) -> Result<TransitionMatrix, DynamicsError> {
    if t == 0 {
        return Err(DynamicsError::RoundZero);
    }
    let weights: Vec<f64> = schedule.edge_counts(graph, t)?.into_iter().map(|n| n as f64).collect();
    Ok(TransitionMatrix::from_edge_weights(graph, t, &weights))
}

/// `J = P_t P_{t-1} ... P_{s+1}` for `mats = [P_{s+1}, ..., P_t]`; the empty
/// product is `I_k`.
pub fn chain_product(k: usize, mats: &[TransitionMatrix]) -> Result<DMatrix<f64>, DynamicsError> {
    let mut acc = DMatrix::identity(k, k);
    for m in mats {
        if m.p.nrows() != k || m.p.ncols() != k {
            return Err(DynamicsError::DimensionMismatch { expected: k, got: m.p.nrows() });
        }
        acc = &m.p * acc;
    }
    Ok(acc)
}

/// `P ⊗ I_d`.
pub fn population_transfer(p: &TransitionMatrix, d: usize) -> DMatrix<f64> {
    p.p.kronecker(&DMatrix::<f64>::identity(d, d))
}

/// Realized transfer operator `T_t` from per-edge Gram matrices `X^T X`
/// (indexed like `graph.edges()`).
pub fn realized_transfer(
    graph: &InteractionGraph,
    grams: &[DMatrix<f64>],
    d: usize,
) -> Result<DMatrix<f64>, DynamicsError> {
    if grams.len() != graph.edges().len() {
        return Err(DynamicsError::DimensionMismatch { expected: graph.edges().len(), got: grams.len() });
    }
    if let Some(g) = grams.iter().find(|g| g.nrows() != d || g.ncols() != d) {
        return Err(DynamicsError::DimensionMismatch { expected: d, got: g.nrows() });
    }
    let k = graph.node_count();
    let mut out = DMatrix::zeros(d * k, d * k);
    for v in graph.nodes() {
        if !graph.is_learner(v) {
            out.view_mut((v.0 * d, v.0 * d), (d, d)).copy_from(&DMatrix::<f64>::identity(d, d));
            continue;
        }
        let in_edges: Vec<usize> = graph
            .in_neighbors(v)
            .iter()
            .map(|&src| graph.edge_index(src, v).expect("in-neighbor edge exists"))
            .collect();
        let aggregate = in_edges.iter().fold(DMatrix::zeros(d, d), |acc, &e| acc + &grams[e]);
        let chol = aggregate.cholesky().ok_or(DynamicsError::SingularAggregateGram(v))?;
        for &e in &in_edges {
            let src = graph.edges()[e].0;
            let block = chol.solve(&grams[e]);
            out.view_mut((v.0 * d, src.0 * d), (d, d)).copy_from(&block);
        }
    }
    Ok(out)
}

/// Mixed noise vector of a learner: `(sum_m G_m)^{-1} sum_m X_m^T eps_m`.
pub fn mixed_noise(aggregate_gram: &DMatrix<f64>, cross: &DVector<f64>) -> Option<DVector<f64>> {
    aggregate_gram.clone().cholesky().map(|c| c.solve(cross))
}
