//! Interactive learning among generative models on a directed interaction
//! graph: graph classification, multi-round co-training simulation and the
//! asymptotic covariance recursion that predicts model collapse.

pub mod asymptotics;
pub mod dynamics;
pub mod fit;
pub mod graph;
pub mod models;
pub mod rng;
pub mod sandwich;
pub mod simulator;

pub use graph::{Canonical, CollapseLabel, CollapsePartition, InteractionGraph, NodeId, NodeSet};
pub use models::{make_model, LossModel, ModelKind};
