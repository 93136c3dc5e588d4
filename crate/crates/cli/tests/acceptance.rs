//! One PASS/FAIL line per acceptance criterion; exits non-zero if any fails.
//! Scale, seeds and tolerances are fixed here and never tuned per run.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use anyhow::{anyhow, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde_json::{json, Value};

use netcollapse::asymptotics::{covariance_series, trace_bounds, trace_ratio_series, unrolled_sum, LimitProportions};
use netcollapse::dynamics::{EdgeOverride, SampleSchedule};
use netcollapse::graph::{Canonical, InteractionGraph, NodeId};
use netcollapse::make_model;
use netcollapse::models::ModelKind;
use netcollapse::rng::{stream, Lane};
use netcollapse::sandwich::{sandwich, sandwich_monte_carlo};
use netcollapse::simulator::{ls_slope, recursion_residuals, run_monte_carlo_with, run_traced, RiskSeries};
use netcollapse_cli::{classification_report, cmd_verify, from_value, report_nodes, RunConfig, VerifyOptions};

const SEED: u64 = 7;

type Check = fn() -> Result<Outcome>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn config(v: Value) -> Result<RunConfig> {
    Ok(from_value(&v)?)
}

fn desk(graph: &str, kind: &str, alignment: &str) -> Result<RunConfig> {
    config(json!({
        "graph": { "canonical": graph },
        "schedule": { "n_sample": 200 },
        "model": { "kind": kind, "d": 5 },
        "experiment": { "T": 50, "n_trials": 200, "seed": SEED, "risk_alignment": alignment },
    }))
}

fn nodes(labels: &[usize]) -> Vec<NodeId> {
    labels.iter().map(|&i| NodeId(i - 1)).collect()
}

fn fmt_nodes(v: &[NodeId]) -> String {
    v.iter().map(|n| n.label()).collect::<Vec<_>>().join(",")
}

fn criterion_1() -> Result<Outcome> {
    let start = Instant::now();
    let cases: [(&str, &str, &[usize]); 8] = [
        ("fig2", "m_l_inf", &[4]),
        ("fig2", "m_l_c", &[4, 5]),
        ("fig2", "m_l_nc", &[3, 6]),
        ("exm3", "m_l_inf", &[3, 4, 5]),
        ("exp5", "m_l_nc", &[2]),
        ("exp8", "m_l_c", &[5, 6, 7, 8]),
        ("exp8", "m_l_nc", &[3, 4]),
        ("onediff_left", "m_l_c", &[]),
    ];
    let mut bad = Vec::new();
    let mut check = |graph: &str, key: &str, got: Vec<NodeId>, want: Vec<NodeId>| {
        if got != want {
            bad.push(format!("{graph}.{key}=[{}]", fmt_nodes(&got)));
        }
    };
    for (graph, key, want) in cases {
        let report = classification_report(&config(json!({ "graph": { "canonical": graph }, "experiment": { "seed": SEED } }))?);
        check(graph, key, report_nodes(&report, key), nodes(want));
    }
    let right = classification_report(&config(json!({ "graph": { "canonical": "onediff_right" }, "experiment": { "seed": SEED } }))?);
    check("onediff_right", "m_l_c", report_nodes(&right, "m_l_c"), nodes(&[1, 2, 3, 4, 5]));
    let exm3 = classification_report(&config(json!({ "graph": { "canonical": "exm3" }, "experiment": { "seed": SEED } }))?);
    if !report_nodes(&exm3, "m_l_c").contains(&NodeId(1)) {
        bad.push("exm3: mu2 not in m_l_c".into());
    }
    let elapsed = start.elapsed();
    let fast = elapsed < Duration::from_secs(1);
    Ok(outcome(
        bad.is_empty() && fast,
        if bad.is_empty() { format!("all fixtures match in {elapsed:.2?}") } else { bad.join("; ") },
    ))
}

fn partition(cfg: &RunConfig, key: &str) -> Vec<NodeId> {
    report_nodes(&classification_report(cfg), key)
}

fn slope(series: &RiskSeries, node: NodeId, from: usize, to: usize) -> f64 {
    let pts: Vec<(f64, f64)> = series
        .ratio_curve(node)
        .into_iter()
        .filter(|&(t, _)| t >= from && t <= to)
        .map(|(t, r)| (t as f64, r))
        .collect();
    ls_slope(&pts)
}

fn max_ratio(series: &RiskSeries, node: NodeId) -> f64 {
    series.ratio_curve(node).into_iter().map(|(_, r)| r).fold(f64::NEG_INFINITY, f64::max)
}

/// Collapsing learners need slope > 0.05 on [10, 50] and ratio(50) > 10;
/// bounded learners need ratio < `cap` for every t.
fn dichotomy(cfg: &RunConfig, cap: f64) -> Result<(bool, String, RiskSeries)> {
    let series = run_monte_carlo_with(&cfg.sim_config(), None)?;
    let mut bad = Vec::new();
    let mut info = Vec::new();
    for mu in partition(cfg, "m_l_c") {
        let s = slope(&series, mu, 10, 50);
        let last = series.ratio(50, mu).unwrap_or(f64::NAN);
        info.push(format!("{mu} slope {s:.3} r50 {last:.3e}"));
        if !(s > 0.05 && last > 10.0) {
            bad.push(format!("{mu} (slope {s:.3}, ratio(50) {last:.2})"));
        }
    }
    for mu in partition(cfg, "m_l_nc") {
        let m = max_ratio(&series, mu);
        info.push(format!("{mu} max {m:.3}"));
        if !(m < cap) {
            bad.push(format!("{mu} bounded but max ratio {m:.2}"));
        }
    }
    let detail = if bad.is_empty() { info.join(", ") } else { format!("violations: {}", bad.join("; ")) };
    Ok((bad.is_empty(), detail, series))
}

fn criterion_2() -> Result<Outcome> {
    let mut pass = true;
    let mut parts = Vec::new();
    for graph in ["exp5", "exp8"] {
        for kind in ["linear", "logistic"] {
            let start = Instant::now();
            let (ok, detail, _) = dichotomy(&desk(graph, kind, "raw")?, 5.0)?;
            let elapsed = start.elapsed();
            let ok = ok && elapsed < Duration::from_secs(600);
            pass &= ok;
            parts.push(format!("[{graph}/{kind} {} {elapsed:.1?}: {detail}]", if ok { "ok" } else { "FAIL" }));
        }
    }
    Ok(outcome(pass, parts.join(" ")))
}

fn criterion_3() -> Result<Outcome> {
    let left = run_monte_carlo_with(&desk("onediff_left", "linear", "raw")?.sim_config(), None)?;
    let right = run_monte_carlo_with(&desk("onediff_right", "linear", "raw")?.sim_config(), None)?;
    let (arg, left_max) = left
        .rows
        .iter()
        .filter_map(|r| Some(((r.t, r.node), r.ratio?)))
        .fold(((0, NodeId(0)), f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    let right_max =
        right.learners.iter().filter_map(|&mu| right.ratio(50, mu)).fold(f64::NEG_INFINITY, f64::max);
    let pass = left_max < 5.0 && right_max > 20.0;
    Ok(outcome(
        pass,
        format!(
            "left max ratio {left_max:.3} at t={} {} (need < 5); right max ratio(50) {right_max:.2} (need > 20)",
            arg.0, arg.1
        ),
    ))
}

fn criterion_4() -> Result<Outcome> {
    let cfg = desk("exp5", "single_index_quadratic", "sign_aligned")?;
    let (ok, detail, series) = dichotomy(&cfg, 8.0)?;
    let rate = series.failed_trials as f64 / series.n_trials as f64;
    let pass = ok && rate < 0.01;
    Ok(outcome(pass, format!("{detail}; failed trials {}/{}", series.failed_trials, series.n_trials)))
}

/// Random graph with K <= 5 nodes, random per-round counts over T <= 30
/// rounds and a random SPD `V*` of dimension d <= 3.
fn random_case(i: u64) -> (InteractionGraph, LimitProportions, DMatrix<f64>, usize) {
    let mut rng = stream(SEED, i, 0, Lane::Init(0));
    loop {
        let k = rng.gen_range(1..=5);
        let nature: Vec<NodeId> = (0..k).filter(|_| rng.gen_bool(0.3)).map(NodeId).collect();
        let mut edges = Vec::new();
        for s in 0..k {
            for t in 0..k {
                if !nature.contains(&NodeId(t)) && rng.gen_bool(0.4) {
                    edges.push((NodeId(s), NodeId(t)));
                }
            }
        }
        let g = InteractionGraph::new(k, edges, nature).expect("valid construction");
        if g.learners().is_empty() {
            continue;
        }
        let rounds = rng.gen_range(1..=30);
        let mut sched = SampleSchedule::constant(rng.gen_range(5..50));
        for t in 1..=rounds {
            for &(src, dst) in g.edges() {
                sched.edge_overrides.push(EdgeOverride { src, dst, n: rng.gen_range(1..100), rounds: Some((t, t)) });
            }
        }
        let props = LimitProportions::from_schedule(&g, &sched, rounds).expect("positive counts");
        let d = rng.gen_range(1..=3);
        let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        let v = &a * a.transpose() + DMatrix::identity(d, d) * 0.1;
        return (g, props, v, rounds);
    }
}

fn criterion_5() -> Result<Outcome> {
    let start = Instant::now();
    let g = Canonical::SelfLoop.build();
    let props = LimitProportions::from_schedule(&g, &SampleSchedule::constant(100), 100)?;
    let series = trace_ratio_series(&g, &props, &DMatrix::identity(3, 3), 100)?;
    let self_loop_err = (1..=100)
        .map(|t| (series.get(t, NodeId(0)).unwrap() - (t as f64 + 1.0)).abs())
        .fold(0.0f64, f64::max);
    let mut worst_unrolled = 0.0f64;
    let mut sandwich_violations = 0;
    let mut tight = 0;
    for i in 0..50 {
        let (g, props, v, rounds) = random_case(i);
        let sigma = covariance_series(&g, &props, &v, rounds)?;
        let unrolled = unrolled_sum(&g, &props, &v, rounds)?;
        worst_unrolled = worst_unrolled.max((&sigma[rounds].sigma - &unrolled).norm() / unrolled.norm());
        for mu in g.learners() {
            let (lo, hi) = trace_bounds(&g, &props, &v, rounds, mu)?;
            let tr = sigma[rounds].block_trace(mu);
            let slack = 1e-12 * hi;
            if lo > tr + slack || tr > hi + slack {
                sandwich_violations += 1;
            }
            if (tr - lo).abs() <= slack || (hi - tr).abs() <= slack {
                tight += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = self_loop_err <= 1e-10 && worst_unrolled <= 1e-10 && sandwich_violations == 0 && elapsed < Duration::from_secs(30);
    Ok(outcome(
        pass,
        format!(
            "self_loop max |ratio-(t+1)| {self_loop_err:.1e}; unrolled rel diff {worst_unrolled:.1e}; \
             bound violations {sandwich_violations} ({tight} tight, non-strict sandwich); {elapsed:.2?}"
        ),
    ))
}

fn criterion_6() -> Result<Outcome> {
    let start = Instant::now();
    let cfg = config(json!({
        "graph": { "canonical": "two_node" },
        "schedule": { "n_sample": 5000 },
        "model": { "kind": "linear", "d": 5 },
        "experiment": { "T": 3, "n_trials": 2000, "seed": SEED },
        "verify": { "t": 3, "n_trials": 2000, "tolerance": 0.15, "audit_trials": 20 },
    }))?;
    let dir = tempfile::tempdir()?;
    let result = cmd_verify(&cfg, dir.path(), None, VerifyOptions::default());
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("verify.json"))?)?;
    let node = report["covariance"]["nodes"]
        .as_array()
        .and_then(|a| a.iter().find(|n| n["node"] == "mu2"))
        .ok_or_else(|| anyhow!("mu2 missing from verify report"))?;
    let rel = node["relative_frobenius_error"].as_f64().unwrap_or(f64::NAN);
    let elapsed = start.elapsed();
    let pass = result.is_ok() && rel <= 0.15 && elapsed < Duration::from_secs(300);
    Ok(outcome(pass, format!("mu2 relative Frobenius error {rel:.4} (need <= 0.15); {elapsed:.1?}")))
}

fn criterion_7() -> Result<Outcome> {
    let sim = config(json!({
        "graph": { "canonical": "exp5" },
        "schedule": { "n_sample": 200 },
        "model": { "kind": "linear", "d": 5 },
        "experiment": { "T": 50, "n_trials": 20, "seed": SEED },
    }))?
    .sim_config();
    let beta_star = sim.beta_star();
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let (states, trace) = run_traced(&sim, &beta_star, trial)?;
        worst = recursion_residuals(&sim, &states, &trace)?.into_iter().fold(worst, f64::max);
    }
    Ok(outcome(worst <= 1e-8, format!("max residual {worst:.2e} over 20 trials, t <= 50")))
}

fn criterion_8() -> Result<Outcome> {
    let mut issues = Vec::new();
    let h = 1e-5;
    let mut worst_fd = 0.0f64;
    for kind in ModelKind::ALL {
        let m = make_model(kind, 3, 1.0)?;
        let mut rng = stream(SEED, kind as u64, 1, Lane::Oracle(0));
        for _ in 0..50 {
            let beta = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let x = m.draw_covariate(&mut rng);
            let u = m.draw_noise(&mut rng);
            let y = m.respond(&DVector::from_fn(3, |_, _| rng.gen_range(-0.8..0.8)), &x, u)?;
            let g = m.grad(&beta, &x, y);
            let hm = m.hess(&beta, &x, y);
            for i in 0..3 {
                let mut e = DVector::zeros(3);
                e[i] = h;
                let fd = (m.loss(&(&beta + &e), &x, y) - m.loss(&(&beta - &e), &x, y)) / (2.0 * h);
                worst_fd = worst_fd.max((fd - g[i]).abs() / g[i].abs().max(1.0));
                let gd = (m.grad(&(&beta + &e), &x, y) - m.grad(&(&beta - &e), &x, y)) / (2.0 * h);
                for j in 0..3 {
                    worst_fd = worst_fd.max((gd[j] - hm[(j, i)]).abs() / hm[(j, i)].abs().max(1.0));
                }
            }
        }
    }
    if worst_fd >= 1e-5 {
        issues.push(format!("finite differences {worst_fd:.1e}"));
    }
    let mut worst_z = 0.0f64;
    for kind in ModelKind::ALL {
        let m = make_model(kind, 3, 1.0)?;
        let mut rng = stream(SEED, kind as u64, 2, Lane::Oracle(0));
        let beta = DVector::from_fn(3, |_, _| rng.gen_range(-0.7..0.7));
        let draws = 100_000;
        let (mut sum, mut sq) = (DVector::zeros(3), DVector::zeros(3));
        for _ in 0..draws {
            let x = m.draw_covariate(&mut rng);
            let u = m.draw_noise(&mut rng);
            let g = m.grad(&beta, &x, m.respond(&beta, &x, u)?);
            sum += &g;
            sq += g.component_mul(&g);
        }
        let n = draws as f64;
        for i in 0..3 {
            let mean = sum[i] / n;
            let se = ((sq[i] / n - mean * mean) / n).sqrt();
            worst_z = worst_z.max(mean.abs() / se);
        }
    }
    if worst_z > 4.0 {
        issues.push(format!("Fisher consistency {worst_z:.2} SE"));
    }
    let mut psd_fail = 0;
    for i in 0..50 {
        let (g, props, v, rounds) = random_case(i);
        psd_fail += covariance_series(&g, &props, &v, rounds)?.iter().filter(|s| !s.is_psd()).count();
    }
    for name in Canonical::NAMES {
        let g = netcollapse::graph::build_canonical(name, &[]).or_else(|_| netcollapse::graph::build_canonical(name, &[6]))?;
        let props = LimitProportions::from_schedule(&g, &SampleSchedule::constant(100), 50)?;
        psd_fail += covariance_series(&g, &props, &DMatrix::identity(2, 2), 50)?.iter().filter(|s| !s.is_psd()).count();
    }
    if psd_fail > 0 {
        issues.push(format!("{psd_fail} covariance states below the PSD floor"));
    }
    let lin = make_model(ModelKind::Linear, 5, 1.0)?;
    let b = DVector::from_fn(5, |i, _| i as f64 * 0.3 - 0.5);
    let eye = DMatrix::identity(5, 5);
    let exact = (sandwich(&lin, &b, 1, SEED)?.v - &eye).amax();
    let mc = (sandwich_monte_carlo(&lin, &b, 100_000, SEED)?.v - &eye).norm() / eye.norm();
    if exact > 1e-12 || mc > 0.02 {
        issues.push(format!("V* closed form {exact:.1e}, Monte Carlo {mc:.4}"));
    }
    let detail = format!(
        "fd {worst_fd:.1e}, Fisher max {worst_z:.2} SE, PSD failures {psd_fail}, V* exact {exact:.1e} / MC {mc:.4}"
    );
    Ok(outcome(issues.is_empty(), detail))
}

fn simulate(config: &Path, out: &Path, threads: Option<usize>) -> Result<Vec<u8>> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_netcollapse"));
    cmd.arg("simulate").arg("--config").arg(config).arg("--out").arg(out);
    if let Some(n) = threads {
        cmd.arg("--threads").arg(n.to_string());
    }
    let status = cmd.output()?;
    if !status.status.success() {
        return Err(anyhow!("simulate failed: {}", String::from_utf8_lossy(&status.stderr)));
    }
    Ok(std::fs::read(out.join("risk_series.csv"))?)
}

fn criterion_9() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let cfg = dir.path().join("exp5.json");
    std::fs::write(&cfg, desk("exp5", "linear", "raw")?.to_json().to_string())?;
    let a = simulate(&cfg, &dir.path().join("a"), None)?;
    let b = simulate(&cfg, &dir.path().join("b"), None)?;
    let serial = simulate(&cfg, &dir.path().join("serial"), Some(1))?;
    let parallel = simulate(&cfg, &dir.path().join("parallel"), Some(8))?;
    let pass = a == b && serial == parallel && a == serial;
    Ok(outcome(
        pass,
        format!(
            "reruns identical: {}, --threads 8 vs 1 identical: {} ({} bytes)",
            a == b,
            serial == parallel,
            a.len()
        ),
    ))
}

fn main() -> ExitCode {
    let criteria: [(usize, Check); 9] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
    ];
    let mut failed = Vec::new();
    for (n, run) in criteria {
        let o = run().unwrap_or_else(|e| outcome(false, format!("error: {e:#}")));
        println!("criterion {n}: {} — {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failing criteria {failed:?}");
        ExitCode::FAILURE
    }
}
