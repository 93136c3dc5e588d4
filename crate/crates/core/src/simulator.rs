//! The interactive training protocol over an interaction graph, benchmark
//! fits on natural data, and Monte Carlo risk estimation.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{realized_transfer, DynamicsError, SampleSchedule, SharingMode};
use crate::fit::{fit, spectral_start, FitError, FitOptions};
use crate::graph::{InteractionGraph, NodeId};
use crate::models::{Dataset, LossModel, ModelError, ModelKind};
use crate::rng::{stream, Lane};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Schedule(#[from] DynamicsError),
    #[error("trial {trial}, round {round}, node {node}: {source}")]
    Fit { trial: u64, round: usize, node: NodeId, source: FitError },
    #[error("trial {trial}, round {round}: {source}")]
    Sampling { trial: u64, round: usize, source: ModelError },
    #[error("{failed} of {total} trials failed (limit is 1%); first failure: {first}")]
    TooManyFailedTrials { failed: usize, total: usize, first: String },
    #[error("recursion audit needs the linear kind")]
    NotLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaStarMode {
    /// i.i.d. standard normal entries drawn from the experiment seed.
    RandomNormal,
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskAlignment {
    #[default]
    Raw,
    /// `min(|b - b*|^2, |b + b*|^2)`; only changes the single-index kind.
    SignAligned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub graph: InteractionGraph,
    pub schedule: SampleSchedule,
    pub model: LossModel,
    pub rounds: usize,
    pub n_trials: usize,
    pub seed: u64,
    pub beta_star: BetaStarMode,
    pub risk_alignment: RiskAlignment,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_trials == 0 {
            return Err(SimError::Config("n_trials must be at least 1".into()));
        }
        if self.rounds == 0 {
            return Err(SimError::Config("T must be at least 1".into()));
        }
        if let BetaStarMode::Fixed(v) = &self.beta_star {
            if v.len() != self.model.d {
                return Err(SimError::Config(format!("beta_star has length {}, d is {}", v.len(), self.model.d)));
            }
        }
        self.schedule.validate(&self.graph, self.model.d, self.rounds)?;
        Ok(())
    }

    /// Ground truth for the whole experiment (shared by every trial).
    pub fn beta_star(&self) -> DVector<f64> {
        match &self.beta_star {
            BetaStarMode::Fixed(v) => DVector::from_column_slice(v),
            BetaStarMode::RandomNormal => {
                let mut rng = stream(self.seed, u64::MAX, 0, Lane::BetaStar);
                DVector::from_fn(self.model.d, |_, _| StandardNormal.sample(&mut rng))
            }
        }
    }

    fn fit_options(&self) -> FitOptions {
        FitOptions::for_kind(self.model.kind)
    }

    fn squared_error(&self, est: &DVector<f64>, truth: &DVector<f64>) -> f64 {
        let raw = (est - truth).norm_squared();
        if self.risk_alignment == RiskAlignment::SignAligned && self.model.kind == ModelKind::SingleIndexQuadratic {
            raw.min((est + truth).norm_squared())
        } else {
            raw
        }
    }
}

/// Parameters of every node after cycle `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    pub t: usize,
    pub beta: Vec<DVector<f64>>,
    pub beta_star: DVector<f64>,
}

/// Sufficient statistics of a least-squares fit: `X^T X` and `X^T eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearStats {
    pub gram: DMatrix<f64>,
    pub cross: DVector<f64>,
}

impl LinearStats {
    fn from_draw(data: &Dataset, noise: &DVector<f64>, sigma: f64) -> Self {
        LinearStats { gram: data.gram(), cross: data.x.tr_mul(noise) * sigma }
    }
}

/// Per-round design and noise statistics of one trial.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    /// Round-0 statistics per node (`None` for nature nodes).
    pub init: Vec<Option<LinearStats>>,
    /// `rounds[t - 1][e]` for edge index `e`.
    pub rounds: Vec<Vec<LinearStats>>,
}

fn fit_err(trial: u64, round: usize, node: NodeId) -> impl FnOnce(FitError) -> SimError {
    move |source| SimError::Fit { trial, round, node, source }
}

fn sample_err(trial: u64, round: usize) -> impl FnOnce(ModelError) -> SimError {
    move |source| SimError::Sampling { trial, round, source }
}

/// Round 0: nature nodes copy `beta*`, every other node fits its own natural sample.
pub fn init_round(config: &SimConfig, beta_star: &DVector<f64>, trial: u64) -> Result<EnsembleState, SimError> {
    init_round_traced(config, beta_star, trial, None)
}

fn init_round_traced(
    config: &SimConfig,
    beta_star: &DVector<f64>,
    trial: u64,
    mut trace: Option<&mut Trace>,
) -> Result<EnsembleState, SimError> {
    let model = &config.model;
    let opts = config.fit_options();
    let mut beta = Vec::with_capacity(config.graph.node_count());
    for v in config.graph.nodes() {
        if config.graph.is_nature(v) {
            beta.push(beta_star.clone());
            if let Some(tr) = trace.as_deref_mut() {
                tr.init.push(None);
            }
            continue;
        }
        let n = config.schedule.initial_count(v)?;
        let mut rng = stream(config.seed, trial, 0, Lane::Init(v.0));
        let (data, noise) = model.sample(beta_star, n, &mut rng).map_err(sample_err(trial, 0))?;
        let start = initial_guess(model, &data);
        let res = fit(model, &data, &opts, start.as_ref()).map_err(fit_err(trial, 0, v))?;
        if let Some(tr) = trace.as_deref_mut() {
            tr.init.push(Some(LinearStats::from_draw(&data, &noise, model.noise_sigma)));
        }
        beta.push(res.beta_hat);
    }
    Ok(EnsembleState { t: 0, beta, beta_star: beta_star.clone() })
}

fn initial_guess(model: &LossModel, data: &Dataset) -> Option<DVector<f64>> {
    (model.kind == ModelKind::SingleIndexQuadratic).then(|| spectral_start(data))
}

/// Draws the round-`t` dataset of every edge from the previous-round parameters.
fn draw_edges(
    config: &SimConfig,
    state: &EnsembleState,
    trial: u64,
    t: usize,
) -> Result<Vec<(Dataset, DVector<f64>)>, SimError> {
    let graph = &config.graph;
    let counts = config.schedule.edge_counts(graph, t)?;
    match config.schedule.sharing_mode {
        SharingMode::IndependentPerEdge => graph
            .edges()
            .iter()
            .enumerate()
            .map(|(e, &(src, _))| {
                let mut rng = stream(config.seed, trial, t as u64, Lane::Edge(e));
                config.model.sample(&state.beta[src.0], counts[e], &mut rng).map_err(sample_err(trial, t))
            })
            .collect(),
        SharingMode::BroadcastPerSource => {
            let mut shared: Vec<Option<(Dataset, DVector<f64>)>> = vec![None; graph.node_count()];
            for v in graph.nodes() {
                let total = config.schedule.source_total(graph, t, v)?;
                if total == 0 {
                    continue;
                }
                let mut rng = stream(config.seed, trial, t as u64, Lane::Source(v.0));
                shared[v.0] =
                    Some(config.model.sample(&state.beta[v.0], total, &mut rng).map_err(sample_err(trial, t))?);
            }
            Ok(graph
                .edges()
                .iter()
                .enumerate()
                .map(|(e, &(src, _))| {
                    let (data, noise) = shared[src.0].as_ref().expect("source with out-edges has data");
                    (data.head(counts[e]), noise.rows(0, counts[e]).into_owned())
                })
                .collect())
        }
    }
}

/// Sample-size weighted mean of the in-neighbors' previous parameters. For the
/// single-index kind each neighbor is first sign-aligned with the learner's
/// own previous estimate, since `b` and `-b` generate the same data.
fn warm_start(config: &SimConfig, state: &EnsembleState, node: NodeId, counts: &[usize]) -> DVector<f64> {
    let graph = &config.graph;
    let own = &state.beta[node.0];
    let mut acc = DVector::zeros(config.model.d);
    let mut total = 0.0;
    for &src in graph.in_neighbors(node) {
        let e = graph.edge_index(src, node).expect("edge exists");
        let w = counts[e] as f64;
        let b = &state.beta[src.0];
        let flip = config.model.kind == ModelKind::SingleIndexQuadratic && b.dot(own) < 0.0;
        if flip {
            acc -= b * w;
        } else {
            acc += b * w;
        }
        total += w;
    }
    acc / total
}

/// One interactive cycle: every learner refits on its pooled in-edge data,
/// frozen nodes keep their parameters.
pub fn step(config: &SimConfig, state: &EnsembleState, trial: u64) -> Result<EnsembleState, SimError> {
    step_traced(config, state, trial, None)
}

fn step_traced(
    config: &SimConfig,
    state: &EnsembleState,
    trial: u64,
    trace: Option<&mut Trace>,
) -> Result<EnsembleState, SimError> {
    let t = state.t + 1;
    let graph = &config.graph;
    let counts = config.schedule.edge_counts(graph, t)?;
    let draws = draw_edges(config, state, trial, t)?;
    if let Some(tr) = trace {
        tr.rounds.push(
            draws
                .iter()
                .map(|(data, noise)| LinearStats::from_draw(data, noise, config.model.noise_sigma))
                .collect(),
        );
    }
    let opts = config.fit_options();
    let mut beta = state.beta.clone();
    for v in graph.learners() {
        let parts: Vec<&Dataset> = graph
            .in_neighbors(v)
            .iter()
            .map(|&src| &draws[graph.edge_index(src, v).expect("edge exists")].0)
            .collect();
        let pooled = Dataset::concat(&parts);
        // convex risks have a unique minimizer; a cold start avoids saturated
        // starting points when a neighbor's parameters have grown large
        let start = (config.model.kind == ModelKind::SingleIndexQuadratic).then(|| warm_start(config, state, v, &counts));
        let res = fit(&config.model, &pooled, &opts, start.as_ref()).map_err(fit_err(trial, t, v))?;
        beta[v.0] = res.beta_hat;
    }
    Ok(EnsembleState { t, beta, beta_star: state.beta_star.clone() })
}

/// Pooled sample count of every node at round `t` (0 for frozen nodes when `t >= 1`).
pub fn oracle_counts(config: &SimConfig, t: usize) -> Result<Vec<usize>, SimError> {
    let graph = &config.graph;
    graph
        .nodes()
        .map(|v| {
            if t == 0 {
                if graph.is_nature(v) {
                    Ok(0)
                } else {
                    Ok(config.schedule.initial_count(v)?)
                }
            } else if graph.is_learner(v) {
                Ok(config.schedule.pooled_count(graph, t, v)?)
            } else {
                Ok(0)
            }
        })
        .collect()
}

/// Benchmark fits on fresh natural data with the given per-node counts;
/// nodes with count 0 get `None`.
pub fn oracle_fit(
    config: &SimConfig,
    counts: &[usize],
    beta_star: &DVector<f64>,
    trial: u64,
    t: usize,
) -> Result<Vec<Option<DVector<f64>>>, SimError> {
    let opts = config.fit_options();
    config
        .graph
        .nodes()
        .map(|v| {
            let n = counts[v.0];
            if n == 0 {
                return Ok(None);
            }
            let mut rng = stream(config.seed, trial, t as u64, Lane::Oracle(v.0));
            let (data, _) = config.model.sample(beta_star, n, &mut rng).map_err(sample_err(trial, t))?;
            let start = if config.model.kind == ModelKind::SingleIndexQuadratic {
                // aligned the same way as the interactive round-0 fits
                Some(spectral_start(&data))
            } else {
                None
            };
            let res = fit(&config.model, &data, &opts, start.as_ref()).map_err(fit_err(trial, t, v))?;
            Ok(Some(res.beta_hat))
        })
        .collect()
}

/// Per-trial squared errors for learners, `[t - 1][learner position]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialErrors {
    pub interactive: Vec<Vec<f64>>,
    pub oracle: Vec<Vec<f64>>,
}

pub fn run_trial(config: &SimConfig, beta_star: &DVector<f64>, trial: u64) -> Result<TrialErrors, SimError> {
    let learners = config.graph.learners();
    let mut state = init_round(config, beta_star, trial)?;
    let mut interactive = Vec::with_capacity(config.rounds);
    let mut oracle = Vec::with_capacity(config.rounds);
    for t in 1..=config.rounds {
        state = step(config, &state, trial)?;
        let counts = oracle_counts(config, t)?;
        let bench = oracle_fit(config, &counts, beta_star, trial, t)?;
        interactive.push(learners.iter().map(|v| config.squared_error(&state.beta[v.0], beta_star)).collect());
        oracle.push(
            learners
                .iter()
                .map(|v| config.squared_error(bench[v.0].as_ref().expect("learner has oracle fit"), beta_star))
                .collect(),
        );
    }
    Ok(TrialErrors { interactive, oracle })
}

/// All states `t = 0..=rounds` of one trial.
pub fn run_states(config: &SimConfig, beta_star: &DVector<f64>, trial: u64, rounds: usize) -> Result<Vec<EnsembleState>, SimError> {
    let mut states = vec![init_round(config, beta_star, trial)?];
    for _ in 0..rounds {
        let next = step(config, states.last().expect("nonempty"), trial)?;
        states.push(next);
    }
    Ok(states)
}

/// Runs one trial while recording design/noise statistics.
pub fn run_traced(
    config: &SimConfig,
    beta_star: &DVector<f64>,
    trial: u64,
) -> Result<(Vec<EnsembleState>, Trace), SimError> {
    let mut trace = Trace::default();
    let mut states = vec![init_round_traced(config, beta_star, trial, Some(&mut trace))?];
    for _ in 0..config.rounds {
        let next = step_traced(config, states.last().expect("nonempty"), trial, Some(&mut trace))?;
        states.push(next);
    }
    Ok((states, trace))
}

/// Max-norm residual of `b_t - (T_t b_{t-1} + v_t)` for `t = 0..=rounds`, with
/// `b_{-1} = (b*, ..., b*)`.
pub fn recursion_residuals(
    config: &SimConfig,
    states: &[EnsembleState],
    trace: &Trace,
) -> Result<Vec<f64>, SimError> {
    if config.model.kind != ModelKind::Linear {
        return Err(SimError::NotLinear);
    }
    let graph = &config.graph;
    let d = config.model.d;
    let k = graph.node_count();
    let stack = |betas: &[DVector<f64>]| {
        let mut v = DVector::zeros(d * k);
        for (i, b) in betas.iter().enumerate() {
            v.rows_mut(i * d, d).copy_from(b);
        }
        v
    };
    let mut out = Vec::with_capacity(states.len());

    let prev = stack(&vec![states[0].beta_star.clone(); k]);
    let mut noise = DVector::zeros(d * k);
    for (i, stats) in trace.init.iter().enumerate() {
        if let Some(s) = stats {
            let v0 = s.gram.clone().cholesky().ok_or(DynamicsError::SingularAggregateGram(NodeId(i)))?.solve(&s.cross);
            noise.rows_mut(i * d, d).copy_from(&v0);
        }
    }
    out.push((stack(&states[0].beta) - prev - noise).amax());

    for (t, stats) in trace.rounds.iter().enumerate() {
        let grams: Vec<DMatrix<f64>> = stats.iter().map(|s| s.gram.clone()).collect();
        let transfer = realized_transfer(graph, &grams, d)?;
        let mut noise = DVector::zeros(d * k);
        for v in graph.learners() {
            let in_edges: Vec<usize> =
                graph.in_neighbors(v).iter().map(|&s| graph.edge_index(s, v).expect("edge exists")).collect();
            let agg = in_edges.iter().fold(DMatrix::zeros(d, d), |a, &e| a + &stats[e].gram);
            let cross = in_edges.iter().fold(DVector::zeros(d), |a, &e| a + &stats[e].cross);
            let chol = agg.cholesky().ok_or(DynamicsError::SingularAggregateGram(v))?;
            noise.rows_mut(v.0 * d, d).copy_from(&chol.solve(&cross));
        }
        let predicted = transfer * stack(&states[t].beta) + noise;
        out.push((stack(&states[t + 1].beta) - predicted).amax());
    }
    Ok(out)
}

/// One `(t, node)` cell of a risk series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskRow {
    pub t: usize,
    pub node: NodeId,
    pub r: f64,
    pub r_star: f64,
    pub ratio: Option<f64>,
    pub r_se: f64,
    pub rstar_se: f64,
    pub n_ok_trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskSeries {
    pub learners: Vec<NodeId>,
    pub rounds: usize,
    /// Sorted by `(t, node)`.
    pub rows: Vec<RiskRow>,
    pub n_trials: usize,
    pub failed_trials: usize,
}

impl RiskSeries {
    pub fn ratio(&self, t: usize, node: NodeId) -> Option<f64> {
        self.row(t, node).and_then(|r| r.ratio)
    }

    pub fn row(&self, t: usize, node: NodeId) -> Option<&RiskRow> {
        let j = self.learners.iter().position(|&v| v == node)?;
        if t == 0 || t > self.rounds {
            return None;
        }
        self.rows.get((t - 1) * self.learners.len() + j)
    }

    /// `(t, ratio)` pairs for one node.
    pub fn ratio_curve(&self, node: NodeId) -> Vec<(usize, f64)> {
        (1..=self.rounds).filter_map(|t| self.ratio(t, node).map(|r| (t, r))).collect()
    }
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Maps `trial -> f(trial)` over `0..n`, in parallel when enabled, returning
/// results in trial order.
pub fn map_trials<T, F>(n: usize, threads: Option<usize>, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let run = || (0..n as u64).into_par_iter().map(&f).collect::<Vec<_>>();
        match threads {
            Some(1) => (0..n as u64).map(&f).collect(),
            Some(k) => match rayon::ThreadPoolBuilder::new().num_threads(k).build() {
                Ok(pool) => pool.install(run),
                Err(_) => run(),
            },
            None => run(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        (0..n as u64).map(f).collect()
    }
}

/// Errors when more than 1% of trials failed, reporting the first failure.
pub fn check_failures<T>(results: &[Result<T, SimError>], total: usize) -> Result<usize, SimError> {
    let failed = results.iter().filter(|r| r.is_err()).count();
    if failed * 100 > total || failed == results.len() {
        let first = results.iter().find_map(|r| r.as_ref().err()).map(ToString::to_string).unwrap_or_default();
        return Err(SimError::TooManyFailedTrials { failed, total, first });
    }
    Ok(failed)
}

pub fn run_monte_carlo(config: &SimConfig) -> Result<RiskSeries, SimError> {
    run_monte_carlo_with(config, None)
}

/// Monte Carlo risk series. Per-trial results are reduced in ascending trial
/// order whatever the thread count, so output is identical across schedules.
pub fn run_monte_carlo_with(config: &SimConfig, threads: Option<usize>) -> Result<RiskSeries, SimError> {
    config.validate()?;
    let beta_star = config.beta_star();
    let results = map_trials(config.n_trials, threads, |trial| run_trial(config, &beta_star, trial));
    let failed = check_failures(&results, config.n_trials)?;
    let ok: Vec<&TrialErrors> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
    let learners = config.graph.learners();
    let mut rows = Vec::with_capacity(config.rounds * learners.len());
    let mut buf_r = Vec::with_capacity(ok.len());
    let mut buf_s = Vec::with_capacity(ok.len());
    for t in 1..=config.rounds {
        for (j, &node) in learners.iter().enumerate() {
            buf_r.clear();
            buf_s.clear();
            buf_r.extend(ok.iter().map(|e| e.interactive[t - 1][j]));
            buf_s.extend(ok.iter().map(|e| e.oracle[t - 1][j]));
            let (r, r_se) = mean_and_se(&buf_r);
            let (r_star, rstar_se) = mean_and_se(&buf_s);
            rows.push(RiskRow {
                t,
                node,
                r,
                r_star,
                ratio: (r_star > 0.0).then(|| r / r_star),
                r_se,
                rstar_se,
                n_ok_trials: ok.len(),
            });
        }
    }
    Ok(RiskSeries { learners, rounds: config.rounds, rows, n_trials: config.n_trials, failed_trials: failed })
}

/// Least-squares slope of `ys` against `xs`.
pub fn ls_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}
