//! JSON run configuration: a hand-walked schema so every diagnostic carries
//! the key path it refers to.

use std::collections::BTreeMap;

use serde_json::{json, Map, Value};
use thiserror::Error;

use netcollapse::dynamics::{EdgeOverride, SampleSchedule, SharingMode};
use netcollapse::graph::{Canonical, GraphError, InteractionGraph, NodeId};
use netcollapse::models::{LossModel, ModelKind};
use netcollapse::simulator::{BetaStarMode, RiskAlignment, SimConfig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("{path} {message}")]
    Schema { path: String, message: String },
    #[error("unknown canonical graph `{0}`")]
    UnknownCanonicalName(String),
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Schema { path: path.into(), message: message.into() }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GraphSpec {
    Canonical(Canonical),
    Explicit { nodes: usize, edges: Vec<(NodeId, NodeId)>, nature: Vec<NodeId> },
}

impl GraphSpec {
    pub fn build(&self) -> Result<InteractionGraph, GraphError> {
        match self {
            GraphSpec::Canonical(c) => Ok(c.build()),
            GraphSpec::Explicit { nodes, edges, nature } => InteractionGraph::new(*nodes, edges.clone(), nature.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub d: usize,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub rounds: usize,
    pub n_trials: usize,
    pub seed: u64,
    pub risk_alignment: RiskAlignment,
    pub beta_star: BetaStarMode,
    pub sandwich_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifySpec {
    /// Round at which the empirical covariance is compared.
    pub t: usize,
    pub n_trials: usize,
    /// Relative Frobenius tolerance.
    pub tolerance: f64,
    pub audit_trials: usize,
    pub residual_tolerance: f64,
}

impl Default for VerifySpec {
    fn default() -> Self {
        VerifySpec { t: 3, n_trials: 2000, tolerance: 0.15, audit_trials: 20, residual_tolerance: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSpec {
    pub dir: String,
    pub formats: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub graph: GraphSpec,
    pub schedule: SampleSchedule,
    pub model: ModelSpec,
    pub experiment: ExperimentSpec,
    pub verify: VerifySpec,
    pub output: OutputSpec,
}

pub const DEFAULT_N_SAMPLE: usize = 1000;

struct Obj<'a> {
    path: String,
    map: &'a Map<String, Value>,
}

impl<'a> Obj<'a> {
    fn new(value: &'a Value, path: &str, allowed: &[&str]) -> Result<Self, ConfigError> {
        let map = value.as_object().ok_or_else(|| schema(path, "must be an object"))?;
        for key in map.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(schema(join(path, key), "is not a recognized key"));
            }
        }
        Ok(Obj { path: path.to_string(), map })
    }

    fn at(&self, key: &str) -> String {
        join(&self.path, key)
    }

    fn get(&self, key: &str) -> Option<&'a Value> {
        self.map.get(key).filter(|v| !v.is_null())
    }

    fn require(&self, key: &str) -> Result<&'a Value, ConfigError> {
        self.get(key).ok_or_else(|| schema(self.at(key), "required"))
    }

    fn uint(&self, key: &str) -> Result<Option<u64>, ConfigError> {
        self.get(key).map(|v| v.as_u64().ok_or_else(|| schema(self.at(key), "must be a non-negative integer"))).transpose()
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        Ok(self.uint(key)?.map_or(default, |v| v as usize))
    }

    fn float_or(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        self.get(key)
            .map(|v| v.as_f64().ok_or_else(|| schema(self.at(key), "must be a number")))
            .transpose()
            .map(|v| v.unwrap_or(default))
    }

    fn str(&self, key: &str) -> Result<Option<&'a str>, ConfigError> {
        self.get(key).map(|v| v.as_str().ok_or_else(|| schema(self.at(key), "must be a string"))).transpose()
    }

    fn array(&self, key: &str) -> Result<Option<&'a Vec<Value>>, ConfigError> {
        self.get(key).map(|v| v.as_array().ok_or_else(|| schema(self.at(key), "must be an array"))).transpose()
    }
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn node_ref(v: &Value, path: &str, nodes: usize) -> Result<NodeId, ConfigError> {
    let id = match v {
        Value::Number(n) => match n.as_u64() {
            Some(k) if k >= 1 => NodeId(k as usize - 1),
            _ => return Err(schema(path, "node numbers are 1-based positive integers")),
        },
        Value::String(s) => s.parse().map_err(|_| schema(path, format!("`{s}` is not a node label")))?,
        _ => return Err(schema(path, "must be a node label such as \"mu1\"")),
    };
    if id.0 >= nodes {
        return Err(schema(path, format!("refers to {id}, but the graph has {nodes} nodes")));
    }
    Ok(id)
}

fn parse_graph(v: &Value) -> Result<GraphSpec, ConfigError> {
    let obj = Obj::new(v, "graph", &["canonical", "params", "nodes", "edges", "nature"])?;
    if let Some(name) = obj.str("canonical")? {
        for key in ["nodes", "edges", "nature"] {
            if obj.get(key).is_some() {
                return Err(schema(obj.at(key), "cannot be combined with graph.canonical"));
            }
        }
        let params = match obj.array("params")? {
            None => Vec::new(),
            Some(a) => a
                .iter()
                .enumerate()
                .map(|(i, p)| p.as_i64().ok_or_else(|| schema(format!("graph.params[{i}]"), "must be an integer")))
                .collect::<Result<Vec<_>, _>>()?,
        };
        return match Canonical::parse(name, &params) {
            Ok(c) => Ok(GraphSpec::Canonical(c)),
            Err(GraphError::UnknownCanonicalName(n)) => Err(ConfigError::UnknownCanonicalName(n)),
            Err(e) => Err(schema("graph.params", e.to_string())),
        };
    }
    if obj.get("params").is_some() {
        return Err(schema("graph.params", "only applies to canonical graphs"));
    }
    let nodes = obj.uint("nodes")?.ok_or_else(|| schema("graph.nodes", "required (or give graph.canonical)"))? as usize;
    let mut edges = Vec::new();
    for (i, e) in obj.array("edges")?.into_iter().flatten().enumerate() {
        let path = format!("graph.edges[{i}]");
        match e.as_array().map(Vec::as_slice) {
            Some([a, b]) => edges.push((node_ref(a, &format!("{path}[0]"), nodes)?, node_ref(b, &format!("{path}[1]"), nodes)?)),
            _ => return Err(schema(path, "must be a [source, target] pair")),
        }
    }
    let nature = obj
        .array("nature")?
        .into_iter()
        .flatten()
        .enumerate()
        .map(|(i, n)| node_ref(n, &format!("graph.nature[{i}]"), nodes))
        .collect::<Result<Vec<_>, _>>()?;
    netcollapse::graph::validate(nodes, &edges, &nature).map_err(|e| schema("graph", e.to_string()))?;
    Ok(GraphSpec::Explicit { nodes, edges, nature })
}

fn parse_schedule(v: Option<&Value>, nodes: usize) -> Result<SampleSchedule, ConfigError> {
    let empty = json!({});
    let obj = Obj::new(v.unwrap_or(&empty), "schedule", &["n_sample", "n0", "edges", "sharing_mode"])?;
    let mut schedule = SampleSchedule::constant(obj.usize_or("n_sample", DEFAULT_N_SAMPLE)?);
    if let Some(mode) = obj.str("sharing_mode")? {
        schedule.sharing_mode = match mode {
            "independent_per_edge" => SharingMode::IndependentPerEdge,
            "broadcast_per_source" => SharingMode::BroadcastPerSource,
            _ => return Err(schema("schedule.sharing_mode", "must be independent_per_edge or broadcast_per_source")),
        };
    }
    if let Some(n0) = obj.get("n0") {
        let map = n0.as_object().ok_or_else(|| schema("schedule.n0", "must map node labels to counts"))?;
        for (label, count) in map {
            let path = format!("schedule.n0.{label}");
            let id = node_ref(&Value::String(label.clone()), &path, nodes)?;
            let n = count.as_u64().ok_or_else(|| schema(&path, "must be a non-negative integer"))?;
            schedule.n0_overrides.insert(id, n as usize);
        }
    }
    for (i, e) in obj.array("edges")?.into_iter().flatten().enumerate() {
        let path = format!("schedule.edges[{i}]");
        let o = Obj::new(e, &path, &["src", "dst", "n", "rounds"])?;
        let src = node_ref(o.require("src")?, &o.at("src"), nodes)?;
        let dst = node_ref(o.require("dst")?, &o.at("dst"), nodes)?;
        let n = o.uint("n")?.ok_or_else(|| schema(o.at("n"), "required"))? as usize;
        let rounds = match o.array("rounds")?.map(Vec::as_slice) {
            None => None,
            Some([a, b]) => match (a.as_u64(), b.as_u64()) {
                (Some(a), Some(b)) if 1 <= a && a <= b => Some((a as usize, b as usize)),
                _ => return Err(schema(o.at("rounds"), "must be [first, last] with 1 <= first <= last")),
            },
            Some(_) => return Err(schema(o.at("rounds"), "must be [first, last]")),
        };
        schedule.edge_overrides.push(EdgeOverride { src, dst, n, rounds });
    }
    Ok(schedule)
}

fn parse_model(v: Option<&Value>) -> Result<ModelSpec, ConfigError> {
    let empty = json!({});
    let obj = Obj::new(v.unwrap_or(&empty), "model", &["kind", "d", "noise_sigma"])?;
    let kind = match obj.str("kind")? {
        None => ModelKind::Linear,
        Some(k) => k.parse().map_err(|_| schema("model.kind", format!("unknown kind `{k}`")))?,
    };
    let d = obj.usize_or("d", 5)?;
    if d == 0 {
        return Err(schema("model.d", "must be at least 1"));
    }
    let noise_sigma = obj.float_or("noise_sigma", 1.0)?;
    if !(noise_sigma.is_finite() && noise_sigma > 0.0) {
        return Err(schema("model.noise_sigma", "must be positive"));
    }
    Ok(ModelSpec { kind, d, noise_sigma })
}

fn parse_experiment(v: Option<&Value>, d: usize) -> Result<ExperimentSpec, ConfigError> {
    let v = v.ok_or_else(|| schema("experiment.seed", "required"))?;
    let obj = Obj::new(v, "experiment", &["T", "n_trials", "seed", "risk_alignment", "beta_star", "sandwich_samples"])?;
    let seed = obj.uint("seed")?.ok_or_else(|| schema("experiment.seed", "required"))?;
    let rounds = obj.usize_or("T", 50)?;
    let n_trials = obj.usize_or("n_trials", 1000)?;
    if rounds == 0 {
        return Err(schema("experiment.T", "must be at least 1"));
    }
    if n_trials == 0 {
        return Err(schema("experiment.n_trials", "must be at least 1"));
    }
    let risk_alignment = match obj.str("risk_alignment")? {
        None | Some("raw") => RiskAlignment::Raw,
        Some("sign_aligned") => RiskAlignment::SignAligned,
        Some(_) => return Err(schema("experiment.risk_alignment", "must be raw or sign_aligned")),
    };
    let beta_star = match obj.get("beta_star") {
        None => BetaStarMode::RandomNormal,
        Some(Value::String(s)) if s == "random_normal" => BetaStarMode::RandomNormal,
        Some(Value::Array(a)) => {
            let v = a
                .iter()
                .enumerate()
                .map(|(i, x)| x.as_f64().ok_or_else(|| schema(format!("experiment.beta_star[{i}]"), "must be a number")))
                .collect::<Result<Vec<_>, _>>()?;
            if v.len() != d {
                return Err(schema("experiment.beta_star", format!("has length {}, model.d is {d}", v.len())));
            }
            BetaStarMode::Fixed(v)
        }
        Some(_) => return Err(schema("experiment.beta_star", "must be \"random_normal\" or an array of numbers")),
    };
    let sandwich_samples = obj.usize_or("sandwich_samples", 100_000)?;
    Ok(ExperimentSpec { rounds, n_trials, seed, risk_alignment, beta_star, sandwich_samples })
}

fn parse_verify(v: Option<&Value>) -> Result<VerifySpec, ConfigError> {
    let empty = json!({});
    let obj = Obj::new(v.unwrap_or(&empty), "verify", &["t", "n_trials", "tolerance", "audit_trials", "residual_tolerance"])?;
    let def = VerifySpec::default();
    let spec = VerifySpec {
        t: obj.usize_or("t", def.t)?,
        n_trials: obj.usize_or("n_trials", def.n_trials)?,
        tolerance: obj.float_or("tolerance", def.tolerance)?,
        audit_trials: obj.usize_or("audit_trials", def.audit_trials)?,
        residual_tolerance: obj.float_or("residual_tolerance", def.residual_tolerance)?,
    };
    if spec.t == 0 {
        return Err(schema("verify.t", "must be at least 1"));
    }
    if spec.n_trials < 2 {
        return Err(schema("verify.n_trials", "must be at least 2"));
    }
    Ok(spec)
}

fn parse_output(v: Option<&Value>) -> Result<OutputSpec, ConfigError> {
    let empty = json!({});
    let obj = Obj::new(v.unwrap_or(&empty), "output", &["dir", "formats"])?;
    let dir = obj.str("dir")?.unwrap_or("out").to_string();
    let formats = match obj.array("formats")? {
        None => vec!["csv".to_string(), "json".to_string()],
        Some(a) => a
            .iter()
            .enumerate()
            .map(|(i, f)| match f.as_str() {
                Some(s @ ("csv" | "json")) => Ok(s.to_string()),
                _ => Err(schema(format!("output.formats[{i}]"), "must be \"csv\" or \"json\"")),
            })
            .collect::<Result<_, _>>()?,
    };
    Ok(OutputSpec { dir, formats })
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let root: Value = serde_json::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    from_value(&root)
}

pub fn from_value(root: &Value) -> Result<RunConfig, ConfigError> {
    let obj = Obj::new(root, "", &["graph", "schedule", "model", "experiment", "verify", "output"])?;
    let graph = parse_graph(obj.require("graph")?)?;
    let nodes = match &graph {
        GraphSpec::Canonical(c) => c.build().node_count(),
        GraphSpec::Explicit { nodes, .. } => *nodes,
    };
    let schedule = parse_schedule(obj.get("schedule"), nodes)?;
    let model = parse_model(obj.get("model"))?;
    let experiment = parse_experiment(obj.get("experiment"), model.d)?;
    let verify = parse_verify(obj.get("verify"))?;
    let output = parse_output(obj.get("output"))?;
    let cfg = RunConfig { graph, schedule, model, experiment, verify, output };
    let g = cfg.graph.build().map_err(|e| schema("graph", e.to_string()))?;
    for (i, o) in cfg.schedule.edge_overrides.iter().enumerate() {
        if g.edge_index(o.src, o.dst).is_none() {
            return Err(schema(format!("schedule.edges[{i}]"), format!("{} -> {} is not an edge of the graph", o.src, o.dst)));
        }
    }
    Ok(cfg)
}

impl RunConfig {
    pub fn to_json(&self) -> Value {
        let graph = match &self.graph {
            GraphSpec::Canonical(c) => json!({ "canonical": c.name(), "params": c.params() }),
            GraphSpec::Explicit { nodes, edges, nature } => json!({
                "nodes": nodes,
                "edges": edges.iter().map(|(a, b)| json!([a.label(), b.label()])).collect::<Vec<_>>(),
                "nature": nature.iter().map(|v| v.label()).collect::<Vec<_>>(),
            }),
        };
        let n0: BTreeMap<String, usize> =
            self.schedule.n0_overrides.iter().map(|(k, &v)| (k.label(), v)).collect();
        let edges: Vec<Value> = self
            .schedule
            .edge_overrides
            .iter()
            .map(|o| {
                let mut e = json!({ "src": o.src.label(), "dst": o.dst.label(), "n": o.n });
                if let Some((a, b)) = o.rounds {
                    e["rounds"] = json!([a, b]);
                }
                e
            })
            .collect();
        let sharing = match self.schedule.sharing_mode {
            SharingMode::IndependentPerEdge => "independent_per_edge",
            SharingMode::BroadcastPerSource => "broadcast_per_source",
        };
        let e = &self.experiment;
        json!({
            "graph": graph,
            "schedule": {
                "n_sample": self.schedule.default_n.unwrap_or(DEFAULT_N_SAMPLE),
                "n0": n0,
                "edges": edges,
                "sharing_mode": sharing,
            },
            "model": { "kind": self.model.kind.name(), "d": self.model.d, "noise_sigma": self.model.noise_sigma },
            "experiment": {
                "T": e.rounds,
                "n_trials": e.n_trials,
                "seed": e.seed,
                "risk_alignment": match e.risk_alignment {
                    RiskAlignment::Raw => "raw",
                    RiskAlignment::SignAligned => "sign_aligned",
                },
                "beta_star": match &e.beta_star {
                    BetaStarMode::RandomNormal => json!("random_normal"),
                    BetaStarMode::Fixed(v) => json!(v),
                },
                "sandwich_samples": e.sandwich_samples,
            },
            "verify": {
                "t": self.verify.t,
                "n_trials": self.verify.n_trials,
                "tolerance": self.verify.tolerance,
                "audit_trials": self.verify.audit_trials,
                "residual_tolerance": self.verify.residual_tolerance,
            },
            "output": { "dir": self.output.dir, "formats": self.output.formats },
        })
    }

    pub fn graph(&self) -> InteractionGraph {
        self.graph.build().expect("validated at parse time")
    }

    pub fn loss_model(&self) -> LossModel {
        LossModel::new(self.model.kind, self.model.d, self.model.noise_sigma).expect("validated at parse time")
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            graph: self.graph(),
            schedule: self.schedule.clone(),
            model: self.loss_model(),
            rounds: self.experiment.rounds,
            n_trials: self.experiment.n_trials,
            seed: self.experiment.seed,
            beta_star: self.experiment.beta_star.clone(),
            risk_alignment: self.experiment.risk_alignment,
        }
    }

    /// Non-fatal notes about the configuration.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.schedule.edge_overrides.iter().any(|o| o.rounds.is_some()) {
            out.push(
                "schedule varies across rounds; the asymptotic results assume no single round dominates the \
                 total sample size, which is not checked"
                    .to_string(),
            );
        }
        out
    }
}
