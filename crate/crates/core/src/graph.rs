//! Interaction digraphs and the reachability-based collapse taxonomy.
//!
//! Nodes are dense 0-based indices internally. Every user-facing label uses
//! the 1-based `muK` spelling.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index of a model in an [`InteractionGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }

    /// 1-based label, `mu1` for index 0.
    pub fn label(self) -> String {
        format!("mu{}", self.0 + 1)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "mu{}", self.0 + 1)
    }
}

impl FromStr for NodeId {
    type Err = GraphError;

    /// Accepts `muK` or a bare 1-based integer `K`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let digits = s.strip_prefix("mu").unwrap_or(s);
        match digits.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(NodeId(k - 1)),
            _ => Err(GraphError::BadLabel(s.to_string())),
        }
    }
}

impl Serialize for NodeId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(usize),
            Str(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Num(k) if k >= 1 => Ok(NodeId(k - 1)),
            Raw::Num(k) => Err(serde::de::Error::custom(format!("node labels are 1-based, got {k}"))),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

pub type NodeSet = BTreeSet<NodeId>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("duplicate edge {0} -> {1}")]
    DuplicateEdge(NodeId, NodeId),
    #[error("nature node {0} has an incoming edge from {1}")]
    NatureNodeHasInEdge(NodeId, NodeId),
    #[error("node index {index} out of range for a graph with {nodes} nodes")]
    NodeIndexOutOfRange { index: usize, nodes: usize },
    #[error("unknown canonical graph `{0}`")]
    UnknownCanonicalName(String),
    #[error("bad parameters for canonical graph `{name}`: {reason}")]
    BadParams { name: String, reason: String },
    #[error("bad node label `{0}`")]
    BadLabel(String),
}

/// Checks the structural invariants of a raw graph description.
pub fn validate(nodes: usize, edges: &[(NodeId, NodeId)], nature: &[NodeId]) -> Result<(), GraphError> {
    let check = |v: NodeId| {
        if v.0 < nodes {
            Ok(())
        } else {
            Err(GraphError::NodeIndexOutOfRange { index: v.0, nodes })
        }
    };
    let mut seen = BTreeSet::new();
    for &(a, b) in edges {
        check(a)?;
        check(b)?;
        if !seen.insert((a, b)) {
            return Err(GraphError::DuplicateEdge(a, b));
        }
    }
    for &v in nature {
        check(v)?;
    }
    let nature: BTreeSet<_> = nature.iter().copied().collect();
    if let Some(&(src, dst)) = edges.iter().find(|(_, dst)| nature.contains(dst)) {
        return Err(GraphError::NatureNodeHasInEdge(dst, src));
    }
    Ok(())
}

/// A directed graph of models; edge `(src, dst)` means `dst` trains on data
/// generated by `src`. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionGraph {
    nodes: usize,
    edges: Vec<(NodeId, NodeId)>,
    nature: Vec<bool>,
    in_nbrs: Vec<Vec<NodeId>>,
    out_nbrs: Vec<Vec<NodeId>>,
}

impl InteractionGraph {
    pub fn new(nodes: usize, edges: Vec<(NodeId, NodeId)>, nature: Vec<NodeId>) -> Result<Self, GraphError> {
        validate(nodes, &edges, &nature)?;
        let mut edges = edges;
        edges.sort();
        let mut is_nature = vec![false; nodes];
        for v in nature {
            is_nature[v.0] = true;
        }
        let mut in_nbrs = vec![Vec::new(); nodes];
        let mut out_nbrs = vec![Vec::new(); nodes];
        for &(a, b) in &edges {
            out_nbrs[a.0].push(b);
            in_nbrs[b.0].push(a);
        }
        for list in in_nbrs.iter_mut().chain(out_nbrs.iter_mut()) {
            list.sort();
        }
        Ok(InteractionGraph { nodes, edges, nature: is_nature, in_nbrs, out_nbrs })
    }

    /// Convenience constructor from 1-based `(src, dst)` pairs.
    pub fn from_one_based(nodes: usize, edges: &[(usize, usize)], nature: &[usize]) -> Result<Self, GraphError> {
        let to_id = |k: usize| {
            if k == 0 {
                Err(GraphError::BadLabel("0".into()))
            } else {
                Ok(NodeId(k - 1))
            }
        };
        let edges = edges
            .iter()
            .map(|&(a, b)| Ok((to_id(a)?, to_id(b)?)))
            .collect::<Result<Vec<_>, GraphError>>()?;
        let nature = nature.iter().map(|&k| to_id(k)).collect::<Result<Vec<_>, _>>()?;
        Self::new(nodes, edges, nature)
    }

    pub fn node_count(&self) -> usize {
        self.nodes
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes).map(NodeId)
    }

    /// Edges in sorted `(src, dst)` order. Positions in this slice are the
    /// edge indices used throughout the crate.
    pub fn edges(&self) -> &[(NodeId, NodeId)] {
        &self.edges
    }

    pub fn edge_index(&self, src: NodeId, dst: NodeId) -> Option<usize> {
        self.edges.binary_search(&(src, dst)).ok()
    }

    pub fn in_neighbors(&self, v: NodeId) -> &[NodeId] {
        &self.in_nbrs[v.0]
    }

    pub fn out_neighbors(&self, v: NodeId) -> &[NodeId] {
        &self.out_nbrs[v.0]
    }

    pub fn is_nature(&self, v: NodeId) -> bool {
        self.nature[v.0]
    }

    pub fn nature_nodes(&self) -> NodeSet {
        self.nodes().filter(|&v| self.is_nature(v)).collect()
    }

    /// True for nodes with at least one incoming edge.
    pub fn is_learner(&self, v: NodeId) -> bool {
        !self.in_nbrs[v.0].is_empty()
    }

    pub fn learners(&self) -> Vec<NodeId> {
        self.nodes().filter(|&v| self.is_learner(v)).collect()
    }

    /// Returns a copy with one extra edge.
    pub fn with_edge(&self, src: NodeId, dst: NodeId) -> Result<Self, GraphError> {
        let mut edges = self.edges.clone();
        edges.push((src, dst));
        Self::new(self.nodes, edges, self.nature_nodes().into_iter().collect())
    }

    /// Nodes reachable from `sources` by a directed path of length at least one.
    pub fn reachable_from(&self, sources: &NodeSet) -> NodeSet {
        let mut seen = vec![false; self.nodes];
        let mut queue = VecDeque::new();
        for s in sources {
            for &w in self.out_neighbors(*s) {
                if !seen[w.0] {
                    seen[w.0] = true;
                    queue.push_back(w);
                }
            }
        }
        while let Some(u) = queue.pop_front() {
            for &w in self.out_neighbors(u) {
                if !seen[w.0] {
                    seen[w.0] = true;
                    queue.push_back(w);
                }
            }
        }
        self.nodes().filter(|v| seen[v.0]).collect()
    }

    pub fn classify(&self) -> CollapsePartition {
        let m_l: NodeSet = self.nodes().filter(|&v| self.is_learner(v)).collect();
        let m_u: NodeSet = self.nodes().filter(|&v| !self.is_learner(v)).collect();
        let from_stable = self.reachable_from(&m_u);
        let m_l_inf: NodeSet = m_l.difference(&from_stable).copied().collect();
        let from_unstable = self.reachable_from(&m_l_inf);
        let m_l_c: NodeSet = m_l
            .iter()
            .copied()
            .filter(|v| m_l_inf.contains(v) || from_unstable.contains(v))
            .collect();
        let m_l_nc = m_l.difference(&m_l_c).copied().collect();
        CollapsePartition { m_u, m_l, m_l_inf, m_l_c, m_l_nc }
    }

    /// Per-node long-run behaviour implied by the partition.
    pub fn predict_collapse(&self) -> BTreeMap<NodeId, CollapseLabel> {
        let part = self.classify();
        self.nodes()
            .map(|v| {
                let label = if part.m_u.contains(&v) {
                    CollapseLabel::Frozen
                } else if part.m_l_c.contains(&v) {
                    CollapseLabel::Collapses
                } else {
                    CollapseLabel::Bounded
                };
                (v, label)
            })
            .collect()
    }
}

/// The five node sets of the collapse taxonomy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollapsePartition {
    pub m_u: NodeSet,
    pub m_l: NodeSet,
    pub m_l_inf: NodeSet,
    pub m_l_c: NodeSet,
    pub m_l_nc: NodeSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollapseLabel {
    Collapses,
    Bounded,
    Frozen,
}

/// Named graphs from the literature on interacting learners.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Canonical {
    /// One model retrained on its own output.
    SelfLoop,
    /// `T` nodes with an edge `a -> b` for every `a < b`; node 1 is nature.
    Accumulating(usize),
    /// Six-node illustration with two stable sources.
    Fig2,
    /// Nature feeds mu2, which also distills from a closed trio.
    Exm3,
    /// Five-node experiment graph.
    Exp5,
    /// Eight-node experiment graph.
    Exp8,
    /// Hierarchical distillation, stable.
    OneDiffLeft,
    /// The same with the single edge mu2 -> mu1 added.
    OneDiffRight,
    /// Nature mu1 feeding mu2, which also learns from itself.
    TwoNode,
}

impl Canonical {
    pub const NAMES: [&'static str; 9] = [
        "self_loop",
        "accumulating",
        "fig2",
        "exm3",
        "exp5",
        "exp8",
        "onediff_left",
        "onediff_right",
        "two_node",
    ];

    pub fn parse(name: &str, params: &[i64]) -> Result<Self, GraphError> {
        let no_params = |c: Canonical| {
            if params.is_empty() {
                Ok(c)
            } else {
                Err(GraphError::BadParams { name: name.to_string(), reason: "takes no parameters".into() })
            }
        };
        match name {
            "self_loop" => no_params(Canonical::SelfLoop),
            "accumulating" => match params {
                [t] if *t >= 1 => Ok(Canonical::Accumulating(*t as usize)),
                _ => Err(GraphError::BadParams {
                    name: name.to_string(),
                    reason: "expects one positive node count".into(),
                }),
            },
            "fig2" => no_params(Canonical::Fig2),
            "exm3" => no_params(Canonical::Exm3),
            "exp5" => no_params(Canonical::Exp5),
            "exp8" => no_params(Canonical::Exp8),
            "onediff_left" => no_params(Canonical::OneDiffLeft),
            "onediff_right" => no_params(Canonical::OneDiffRight),
            "two_node" => no_params(Canonical::TwoNode),
            other => Err(GraphError::UnknownCanonicalName(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Canonical::SelfLoop => "self_loop",
            Canonical::Accumulating(_) => "accumulating",
            Canonical::Fig2 => "fig2",
            Canonical::Exm3 => "exm3",
            Canonical::Exp5 => "exp5",
            Canonical::Exp8 => "exp8",
            Canonical::OneDiffLeft => "onediff_left",
            Canonical::OneDiffRight => "onediff_right",
            Canonical::TwoNode => "two_node",
        }
    }

    pub fn params(self) -> Vec<i64> {
        match self {
            Canonical::Accumulating(t) => vec![t as i64],
            _ => Vec::new(),
        }
    }

    pub fn build(self) -> InteractionGraph {
        let graph = match self {
            Canonical::SelfLoop => InteractionGraph::from_one_based(1, &[(1, 1)], &[]),
            Canonical::Accumulating(t) => {
                let edges: Vec<_> = (1..=t).flat_map(|a| (a + 1..=t).map(move |b| (a, b))).collect();
                InteractionGraph::from_one_based(t, &edges, &[1])
            }
            Canonical::Fig2 => {
                InteractionGraph::from_one_based(6, &[(1, 3), (2, 3), (2, 5), (3, 6), (4, 4), (4, 5)], &[1, 2])
            }
            Canonical::Exm3 => {
                let mut edges = vec![(1, 2), (5, 2)];
                edges.extend(distinct_pairs(3..=5));
                InteractionGraph::from_one_based(5, &edges, &[1])
            }
            Canonical::Exp5 => {
                InteractionGraph::from_one_based(5, &[(1, 2), (2, 5), (3, 4), (3, 5), (4, 3)], &[1])
            }
            Canonical::Exp8 => {
                let mut edges = vec![(1, 3), (2, 4), (3, 4), (4, 8), (7, 8)];
                edges.extend(distinct_pairs(5..=7));
                InteractionGraph::from_one_based(8, &edges, &[1, 2])
            }
            Canonical::OneDiffLeft => InteractionGraph::from_one_based(6, &one_diff_left_edges(), &[6]),
            Canonical::OneDiffRight => {
                let mut edges = one_diff_left_edges();
                edges.push((2, 1));
                InteractionGraph::from_one_based(6, &edges, &[6])
            }
            Canonical::TwoNode => InteractionGraph::from_one_based(2, &[(1, 2), (2, 2)], &[1]),
        };
        graph.expect("canonical graphs are valid")
    }
}

fn distinct_pairs(range: std::ops::RangeInclusive<usize>) -> Vec<(usize, usize)> {
    let nodes: Vec<usize> = range.collect();
    nodes
        .iter()
        .flat_map(|&i| nodes.iter().filter(move |&&j| j != i).map(move |&j| (i, j)))
        .collect()
}

// mu_i distills from every mu_j, j < i, for 2 <= i <= 5; mu3 also learns from
// mu4, mu5 and the natural source mu6. mu1 is a frozen round-0 fit.
fn one_diff_left_edges() -> Vec<(usize, usize)> {
    let mut edges: Vec<_> = (2..=5).flat_map(|i| (1..i).map(move |j| (j, i))).collect();
    edges.extend([(4, 3), (5, 3), (6, 3)]);
    edges
}

pub fn build_canonical(name: &str, params: &[i64]) -> Result<InteractionGraph, GraphError> {
    Canonical::parse(name, params).map(Canonical::build)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: &[usize]) -> NodeSet {
        ids.iter().map(|&k| NodeId(k - 1)).collect()
    }

    #[test]
    fn validate_examples() {
        assert!(InteractionGraph::from_one_based(2, &[(1, 2)], &[1]).is_ok());
        assert_eq!(
            InteractionGraph::from_one_based(2, &[(2, 1)], &[1]),
            Err(GraphError::NatureNodeHasInEdge(NodeId(0), NodeId(1)))
        );
        assert_eq!(
            InteractionGraph::from_one_based(1, &[(1, 1), (1, 1)], &[]),
            Err(GraphError::DuplicateEdge(NodeId(0), NodeId(0)))
        );
        assert!(matches!(
            InteractionGraph::from_one_based(2, &[(1, 3)], &[]),
            Err(GraphError::NodeIndexOutOfRange { index: 2, nodes: 2 })
        ));
    }

    #[test]
    fn reachability_fig2() {
        let g = Canonical::Fig2.build();
        assert_eq!(g.reachable_from(&set(&[1, 2])), set(&[3, 5, 6]));
        assert!(g.reachable_from(&NodeSet::new()).is_empty());
        let s = Canonical::SelfLoop.build();
        assert_eq!(s.reachable_from(&set(&[1])), set(&[1]));
    }

    #[test]
    fn classify_fig2() {
        let p = Canonical::Fig2.build().classify();
        assert_eq!(p.m_u, set(&[1, 2]));
        assert_eq!(p.m_l_inf, set(&[4]));
        assert_eq!(p.m_l_c, set(&[4, 5]));
        assert_eq!(p.m_l_nc, set(&[3, 6]));
    }

    #[test]
    fn classify_small_cases() {
        let p = Canonical::Exp5.build().classify();
        assert_eq!(p.m_u, set(&[1]));
        assert_eq!(p.m_l_c, set(&[3, 4, 5]));
        assert_eq!(p.m_l_nc, set(&[2]));

        let p = Canonical::SelfLoop.build().classify();
        assert!(p.m_u.is_empty());
        assert_eq!(p.m_l_inf, set(&[1]));
        assert_eq!(p.m_l_c, set(&[1]));
        assert!(p.m_l_nc.is_empty());

        let p = Canonical::Exm3.build().classify();
        assert_eq!(p.m_l_inf, set(&[3, 4, 5]));
        assert_eq!(p.m_l_c, set(&[2, 3, 4, 5]));
    }

    #[test]
    fn canonical_builders() {
        let g = build_canonical("accumulating", &[3]).unwrap();
        assert_eq!(g.node_count(), 3);
        assert_eq!(g.edges(), &[(NodeId(0), NodeId(1)), (NodeId(0), NodeId(2)), (NodeId(1), NodeId(2))]);
        assert_eq!(g.nature_nodes(), set(&[1]));

        let g = build_canonical("self_loop", &[]).unwrap();
        assert_eq!(g.edges(), &[(NodeId(0), NodeId(0))]);

        let left = build_canonical("onediff_left", &[]).unwrap();
        let right = build_canonical("onediff_right", &[]).unwrap();
        assert_eq!(left.with_edge(NodeId(1), NodeId(0)).unwrap(), right);

        assert!(matches!(build_canonical("nope", &[]), Err(GraphError::UnknownCanonicalName(_))));
        assert!(matches!(build_canonical("accumulating", &[]), Err(GraphError::BadParams { .. })));
        assert!(matches!(build_canonical("fig2", &[1]), Err(GraphError::BadParams { .. })));
    }

    #[test]
    fn onediff_pair() {
        assert!(Canonical::OneDiffLeft.build().classify().m_l_c.is_empty());
        assert_eq!(Canonical::OneDiffRight.build().classify().m_l_c, set(&[1, 2, 3, 4, 5]));
    }

    #[test]
    fn labels_round_trip() {
        assert_eq!("mu4".parse::<NodeId>().unwrap(), NodeId(3));
        assert_eq!("4".parse::<NodeId>().unwrap(), NodeId(3));
        assert!("mu0".parse::<NodeId>().is_err());
        let json = serde_json::to_string(&NodeId(2)).unwrap();
        assert_eq!(json, "\"mu3\"");
        let back: NodeId = serde_json::from_str("3").unwrap();
        assert_eq!(back, NodeId(2));
    }
}
