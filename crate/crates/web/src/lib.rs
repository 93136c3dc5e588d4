//! Browser bindings: classify a graph, compute its limiting trace-ratio
//! curves, and run a small Monte Carlo. Inputs and outputs are JSON strings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use netcollapse::asymptotics::{trace_ratio_series as limit_series, LimitProportions};
use netcollapse::dynamics::SampleSchedule;
use netcollapse::graph::{build_canonical, CollapseLabel, InteractionGraph};
use nalgebra::DMatrix;
use netcollapse::simulator::{run_monte_carlo_with, BetaStarMode, RiskAlignment, SimConfig};
use netcollapse::{make_model, ModelKind};

/// Either `{"canonical": "exp5", "params": [..]}` or an explicit graph with
/// 1-based node numbers: `{"nodes": 3, "edges": [[1, 2]], "nature": [1]}`.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum GraphInput {
    Canonical {
        canonical: String,
        #[serde(default)]
        params: Vec<i64>,
    },
    Explicit {
        nodes: usize,
        edges: Vec<(usize, usize)>,
        #[serde(default)]
        nature: Vec<usize>,
    },
}

impl GraphInput {
    fn build(&self) -> Result<InteractionGraph, String> {
        match self {
            GraphInput::Canonical { canonical, params } => build_canonical(canonical, params),
            GraphInput::Explicit { nodes, edges, nature } => InteractionGraph::from_one_based(*nodes, edges, nature),
        }
        .map_err(|e| e.to_string())
    }
}

fn parse_graph(json: &str) -> Result<InteractionGraph, String> {
    serde_json::from_str::<GraphInput>(json).map_err(|e| format!("graph: {e}"))?.build()
}

#[derive(Debug, Serialize)]
pub struct Classification {
    pub edges: Vec<(String, String)>,
    pub nature: Vec<String>,
    pub labels: BTreeMap<String, CollapseLabel>,
    pub m_l_inf: Vec<String>,
    pub m_l_c: Vec<String>,
    pub m_l_nc: Vec<String>,
}

pub fn classify(graph_json: &str) -> Result<Classification, String> {
    let g = parse_graph(graph_json)?;
    let p = g.classify();
    let names = |s: &netcollapse::NodeSet| s.iter().map(|v| v.label()).collect();
    Ok(Classification {
        edges: g.edges().iter().map(|(a, b)| (a.label(), b.label())).collect(),
        nature: names(&g.nature_nodes()),
        labels: g.predict_collapse().into_iter().map(|(v, l)| (v.label(), l)).collect(),
        m_l_inf: names(&p.m_l_inf),
        m_l_c: names(&p.m_l_c),
        m_l_nc: names(&p.m_l_nc),
    })
}

/// One curve per learner, indexed by `t - 1`.
#[derive(Debug, Serialize)]
pub struct Curves {
    pub rounds: usize,
    pub curves: BTreeMap<String, Vec<Option<f64>>>,
    pub note: Option<String>,
}

/// Limiting `Tr(Sigma_t) / Tr(V*)` with equal sample sizes everywhere; the
/// ratio does not depend on `V*`, so the identity stands in for it.
pub fn trace_ratios(graph_json: &str, rounds: usize) -> Result<Curves, String> {
    let g = parse_graph(graph_json)?;
    let props = LimitProportions::from_schedule(&g, &SampleSchedule::constant(1), rounds).map_err(|e| e.to_string())?;
    let series = limit_series(&g, &props, &DMatrix::identity(1, 1), rounds).map_err(|e| e.to_string())?;
    let curves = g
        .learners()
        .into_iter()
        .map(|v| (v.label(), (1..=rounds).map(|t| series.get(t, v)).collect()))
        .collect();
    Ok(Curves { rounds, curves, note: None })
}

#[derive(Debug, Deserialize)]
pub struct SimInput {
    pub graph: GraphInput,
    #[serde(default = "default_kind")]
    pub kind: ModelKind,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_trials")]
    pub n_trials: usize,
    #[serde(default = "default_n")]
    pub n_sample: usize,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_kind() -> ModelKind {
    ModelKind::Linear
}
fn default_rounds() -> usize {
    20
}
fn default_trials() -> usize {
    50
}
fn default_n() -> usize {
    100
}
fn default_d() -> usize {
    3
}

/// Monte Carlo risk ratios, run on the calling thread.
pub fn simulate(input_json: &str) -> Result<Curves, String> {
    let input: SimInput = serde_json::from_str(input_json).map_err(|e| e.to_string())?;
    let graph = input.graph.build()?;
    let config = SimConfig {
        graph,
        schedule: SampleSchedule::constant(input.n_sample),
        model: make_model(input.kind, input.d, 1.0).map_err(|e| e.to_string())?,
        rounds: input.rounds,
        n_trials: input.n_trials,
        seed: input.seed,
        beta_star: BetaStarMode::RandomNormal,
        risk_alignment: if input.kind == ModelKind::SingleIndexQuadratic {
            RiskAlignment::SignAligned
        } else {
            RiskAlignment::Raw
        },
    };
    let series = run_monte_carlo_with(&config, Some(1)).map_err(|e| e.to_string())?;
    let curves = series
        .learners
        .iter()
        .map(|&v| (v.label(), (1..=series.rounds).map(|t| series.ratio(t, v)).collect()))
        .collect();
    let note = (series.failed_trials > 0).then(|| format!("{} of {} trials failed", series.failed_trials, series.n_trials));
    Ok(Curves { rounds: series.rounds, curves, note })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string())).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn classify_graph(graph_json: &str) -> Result<String, JsValue> {
    to_js(classify(graph_json))
}

#[wasm_bindgen]
pub fn trace_ratio_series(graph_json: &str, rounds: usize) -> Result<String, JsValue> {
    to_js(trace_ratios(graph_json, rounds))
}

#[wasm_bindgen]
pub fn simulate_risk(input_json: &str) -> Result<String, JsValue> {
    to_js(simulate(input_json))
}
