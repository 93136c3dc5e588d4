//! Command implementations behind the `netcollapse` binary. Every command
//! writes a deterministic file under the output directory and returns its path.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};
use thiserror::Error;

use netcollapse::asymptotics::{covariance_series, trace_bounds, trace_ratio_series, AsymptoticsError, LimitProportions};
use netcollapse::graph::{CollapseLabel, NodeId, NodeSet};
use netcollapse::models::ModelKind;
use netcollapse::sandwich::{sandwich, SandwichError};
use netcollapse::simulator::{check_failures, map_trials, recursion_residuals, run_monte_carlo_with, run_states, run_traced, RiskSeries, SimError};

pub use config::{from_value, parse_config, ConfigError, RunConfig};

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Asymptotics(#[from] AsymptoticsError),
    #[error(transparent)]
    Sandwich(#[from] SandwichError),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("verification failed: {0}")]
    VerificationFailed(String),
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CommandError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CommandError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(io(&path))?;
    Ok(path)
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json values serialize");
    s.push('\n');
    s
}

/// 17 significant digits.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn labels(set: &NodeSet) -> Vec<String> {
    set.iter().map(|v| v.label()).collect()
}

pub fn classification_report(cfg: &RunConfig) -> Value {
    let g = cfg.graph();
    let part = g.classify();
    let pred = g.predict_collapse();
    let with = |label: CollapseLabel| -> Vec<String> {
        pred.iter().filter(|(_, &l)| l == label).map(|(v, _)| v.label()).collect()
    };
    json!({
        "nodes": g.node_count(),
        "edges": g.edges().iter().map(|(a, b)| json!([a.label(), b.label()])).collect::<Vec<_>>(),
        "nature": labels(&g.nature_nodes()),
        "m_u": labels(&part.m_u),
        "m_l": labels(&part.m_l),
        "m_l_inf": labels(&part.m_l_inf),
        "m_l_c": labels(&part.m_l_c),
        "m_l_nc": labels(&part.m_l_nc),
        "collapses": with(CollapseLabel::Collapses),
        "bounded": with(CollapseLabel::Bounded),
        "frozen": with(CollapseLabel::Frozen),
    })
}

pub fn cmd_classify(cfg: &RunConfig, out: &Path) -> Result<PathBuf, CommandError> {
    write_file(out, "classify.json", &pretty(&classification_report(cfg)))
}

pub fn risk_csv(series: &RiskSeries) -> String {
    let mut s = String::from("t,node,r,r_star,ratio,r_se,rstar_se,n_ok_trials\n");
    for row in &series.rows {
        let ratio = row.ratio.map(num).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            row.t,
            row.node,
            num(row.r),
            num(row.r_star),
            ratio,
            num(row.r_se),
            num(row.rstar_se),
            row.n_ok_trials
        );
    }
    s
}

pub fn cmd_simulate(cfg: &RunConfig, out: &Path, threads: Option<usize>) -> Result<PathBuf, CommandError> {
    let series = run_monte_carlo_with(&cfg.sim_config(), threads)?;
    if cfg.output.formats.iter().any(|f| f == "json") {
        let summary = json!({
            "config": cfg.to_json(),
            "n_trials": series.n_trials,
            "failed_trials": series.failed_trials,
        });
        write_file(out, "simulate.json", &pretty(&summary))?;
    }
    write_file(out, "risk_series.csv", &risk_csv(&series))
}

fn v_star(cfg: &RunConfig) -> Result<DMatrix<f64>, CommandError> {
    let sim = cfg.sim_config();
    Ok(sandwich(&sim.model, &sim.beta_star(), cfg.experiment.sandwich_samples, cfg.experiment.seed)?.v)
}

/// `t,node,trace_ratio,lower_bound,upper_bound`, all in units of `Tr(V*)`.
pub fn asymptotics_csv(cfg: &RunConfig) -> Result<String, CommandError> {
    let g = cfg.graph();
    let rounds = cfg.experiment.rounds;
    let props = LimitProportions::from_schedule(&g, &cfg.schedule, rounds)?;
    let v = v_star(cfg)?;
    let tr = v.trace();
    let series = trace_ratio_series(&g, &props, &v, rounds)?;
    let mut s = String::from("t,node,trace_ratio,lower_bound,upper_bound\n");
    for t in 1..=rounds {
        for &node in &series.learners {
            let (lo, hi) = trace_bounds(&g, &props, &v, t, node)?;
            let ratio = series.get(t, node).expect("learner in series");
            let _ = writeln!(s, "{t},{node},{},{},{}", num(ratio), num(lo / tr), num(hi / tr));
        }
    }
    Ok(s)
}

pub fn cmd_asymptotics(cfg: &RunConfig, out: &Path) -> Result<PathBuf, CommandError> {
    write_file(out, "trace_ratio.csv", &asymptotics_csv(cfg)?)
}

/// Test hooks for the verification command.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    /// Multiplies the asymptotic covariance before comparison (negative control).
    pub sigma_scale: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { sigma_scale: 1.0 }
    }
}

/// `n * Cov(samples)` with the unbiased sample covariance.
pub fn scaled_covariance(samples: &[DVector<f64>], n: f64) -> DMatrix<f64> {
    let d = samples[0].len();
    let m = samples.len() as f64;
    let mean = samples.iter().fold(DVector::zeros(d), |a, b| a + b) / m;
    let mut c = DMatrix::zeros(d, d);
    for b in samples {
        let dev = b - &mean;
        c += &dev * dev.transpose();
    }
    c * (n / (m - 1.0))
}

fn covariance_check(cfg: &RunConfig, threads: Option<usize>, opts: VerifyOptions) -> Result<(bool, Value), CommandError> {
    let spec = &cfg.verify;
    let mut sim = cfg.sim_config();
    sim.rounds = spec.t;
    sim.n_trials = spec.n_trials;
    sim.validate()?;
    let g = &sim.graph;
    let beta_star = sim.beta_star();
    let learners = g.learners();
    let runs = map_trials(spec.n_trials, threads, |trial| {
        run_states(&sim, &beta_star, trial, spec.t).map(|s| s[spec.t].beta.clone())
    });
    let failed = check_failures(&runs, spec.n_trials)?;
    let ok: Vec<&Vec<DVector<f64>>> = runs.iter().filter_map(|r| r.as_ref().ok()).collect();
    let props = LimitProportions::from_schedule(g, &sim.schedule, spec.t)?;
    let v = v_star(cfg)?;
    let sigma = &covariance_series(g, &props, &v, spec.t)?[spec.t];
    let n_t = sim.schedule.round_total(g, spec.t).map_err(SimError::from)? as f64;
    let mut all = true;
    let nodes: Vec<Value> = learners
        .iter()
        .map(|&node| {
            let samples: Vec<DVector<f64>> = ok.iter().map(|b| b[node.0].clone()).collect();
            let empirical = scaled_covariance(&samples, n_t);
            let predicted = sigma.block(node, node) * opts.sigma_scale;
            let rel = (&empirical - &predicted).norm() / predicted.norm();
            let pass = rel <= spec.tolerance;
            all &= pass;
            json!({ "node": node.label(), "relative_frobenius_error": rel, "pass": pass })
        })
        .collect();
    Ok((
        all,
        json!({
            "t": spec.t,
            "n_trials": spec.n_trials,
            "failed_trials": failed,
            "tolerance": spec.tolerance,
            "nodes": nodes,
            "pass": all,
        }),
    ))
}

fn recursion_audit(cfg: &RunConfig) -> Result<(bool, Value), CommandError> {
    if cfg.model.kind != ModelKind::Linear {
        return Ok((true, json!({ "skipped": "the recursion identity applies to the linear kind only" })));
    }
    let sim = cfg.sim_config();
    sim.validate()?;
    let beta_star = sim.beta_star();
    let mut worst = 0.0f64;
    for trial in 0..cfg.verify.audit_trials as u64 {
        let (states, trace) = run_traced(&sim, &beta_star, trial)?;
        let res = recursion_residuals(&sim, &states, &trace)?;
        worst = res.into_iter().fold(worst, f64::max);
    }
    let pass = worst <= cfg.verify.residual_tolerance;
    Ok((
        pass,
        json!({
            "trials": cfg.verify.audit_trials,
            "rounds": sim.rounds,
            "max_residual": worst,
            "tolerance": cfg.verify.residual_tolerance,
            "pass": pass,
        }),
    ))
}

/// Runs both checks, writes the report, and fails if either check does.
pub fn cmd_verify(
    cfg: &RunConfig,
    out: &Path,
    threads: Option<usize>,
    opts: VerifyOptions,
) -> Result<PathBuf, CommandError> {
    let (cov_ok, cov) = covariance_check(cfg, threads, opts)?;
    let (rec_ok, rec) = recursion_audit(cfg)?;
    let report = json!({ "covariance": cov, "recursion_identity": rec, "pass": cov_ok && rec_ok });
    let path = write_file(out, "verify.json", &pretty(&report))?;
    if cov_ok && rec_ok {
        Ok(path)
    } else {
        let mut failed = Vec::new();
        if !cov_ok {
            failed.push(format!("covariance {}", cov["nodes"]));
        }
        if !rec_ok {
            failed.push(format!("recursion identity residual {}", rec["max_residual"]));
        }
        Err(CommandError::VerificationFailed(failed.join("; ")))
    }
}

/// Learner labels from a classification report field.
pub fn report_nodes(report: &Value, key: &str) -> Vec<NodeId> {
    report[key]
        .as_array()
        .map(|a| a.iter().filter_map(|v| v.as_str()?.parse().ok()).collect())
        .unwrap_or_default()
}
