//! Empirical risk minimization: closed-form least squares, damped Newton for
//! the convex GLMs, BFGS for the non-convex single-index loss.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{Dataset, LossModel, ModelKind, Risk};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("design matrix is rank deficient")]
    SingularGram,
    #[error("solver stopped after {iterations} iterations with gradient norm {grad_norm:e}")]
    NoConvergence { best: FitResult, iterations: usize, grad_norm: f64 },
    #[error("a warm start is required for non-convex losses")]
    MissingWarmStart,
    #[error("empty dataset")]
    EmptyData,
    #[error("dataset has {got} columns, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Stop once the mean-risk gradient norm falls to this level.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Step halvings allowed per line search.
    pub max_halvings: usize,
}

impl FitOptions {
    pub fn for_kind(kind: ModelKind) -> Self {
        match kind {
            ModelKind::SingleIndexQuadratic => FitOptions { grad_tol: 1e-8, max_iter: 500, max_halvings: 40 },
            _ => FitOptions { grad_tol: 1e-10, max_iter: 100, max_halvings: 30 },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub beta_hat: DVector<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub fn fit(
    model: &LossModel,
    data: &Dataset,
    opts: &FitOptions,
    warm_start: Option<&DVector<f64>>,
) -> Result<FitResult, FitError> {
    if data.is_empty() {
        return Err(FitError::EmptyData);
    }
    if data.dim() != model.d {
        return Err(FitError::DimensionMismatch { expected: model.d, got: data.dim() });
    }
    match model.kind {
        ModelKind::Linear => ols(model, data),
        ModelKind::Logistic | ModelKind::Poisson => {
            let start = warm_start.cloned().unwrap_or_else(|| DVector::zeros(model.d));
            newton(model, data, opts, start)
        }
        ModelKind::SingleIndexQuadratic => {
            let start = warm_start.ok_or(FitError::MissingWarmStart)?.clone();
            bfgs(model, data, opts, start)
        }
    }
}

/// Solves `X^T X b = X^T y` by Cholesky.
pub fn ols_solve(data: &Dataset) -> Result<DVector<f64>, FitError> {
    let gram = data.gram();
    let scale = gram.diagonal().max().max(f64::MIN_POSITIVE);
    let chol = gram.cholesky().ok_or(FitError::SingularGram)?;
    // reject numerically rank-deficient designs that squeak past the factorization
    let l_min = chol.l_dirty().diagonal().min();
    if l_min * l_min < 1e-13 * scale {
        return Err(FitError::SingularGram);
    }
    Ok(chol.solve(&data.x.tr_mul(&data.y)))
}

fn ols(model: &LossModel, data: &Dataset) -> Result<FitResult, FitError> {
    let beta_hat = ols_solve(data)?;
    let (_, g) = Risk { model, data }.value_grad(&beta_hat);
    Ok(FitResult { grad_norm: g.norm(), beta_hat, iterations: 1, converged: true })
}

// A trial point is accepted if it lowers the objective, or, once the decrease
// is below rounding, if it does not raise it and shrinks the gradient.
fn acceptable(f_new: f64, f_old: f64, g_new: f64, g_old: f64, required_decrease: f64) -> bool {
    if !f_new.is_finite() {
        return false;
    }
    let slack = 16.0 * f64::EPSILON * f_old.abs().max(1.0);
    f_new < f_old - required_decrease || (f_new <= f_old + slack && g_new < g_old)
}

fn newton(model: &LossModel, data: &Dataset, opts: &FitOptions, start: DVector<f64>) -> Result<FitResult, FitError> {
    let risk = Risk { model, data };
    let mut beta = start;
    let (mut f, mut g) = risk.value_grad(&beta);
    for iter in 0..opts.max_iter {
        let gnorm = g.norm();
        if gnorm <= opts.grad_tol {
            return Ok(FitResult { beta_hat: beta, grad_norm: gnorm, iterations: iter, converged: true });
        }
        let h = risk.hessian(&beta);
        let step = solve_spd(h, &g).ok_or(FitError::SingularGram)?;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand = &beta - &step * t;
            let (fc, gc) = risk.value_grad(&cand);
            if acceptable(fc, f, gc.norm(), gnorm, 0.0) {
                accepted = Some((cand, fc, gc));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((b, fc, gc)) => {
                beta = b;
                f = fc;
                g = gc;
            }
            None => return Err(no_convergence(beta, g.norm(), iter)),
        }
    }
    let gnorm = g.norm();
    if gnorm <= opts.grad_tol {
        Ok(FitResult { beta_hat: beta, grad_norm: gnorm, iterations: opts.max_iter, converged: true })
    } else {
        Err(no_convergence(beta, gnorm, opts.max_iter))
    }
}

fn bfgs(model: &LossModel, data: &Dataset, opts: &FitOptions, start: DVector<f64>) -> Result<FitResult, FitError> {
    const ARMIJO: f64 = 1e-4;
    let d = start.len();
    let risk = Risk { model, data };
    let mut beta = start;
    let (mut f, mut g) = risk.value_grad(&beta);
    // initial inverse-Hessian guess from the exact Hessian when it is definite
    let mut inv_h = risk
        .hessian(&beta)
        .try_inverse()
        .filter(|m| m.symmetric_eigenvalues().min() > 0.0)
        .unwrap_or_else(|| DMatrix::identity(d, d));
    for iter in 0..opts.max_iter {
        let gnorm = g.norm();
        if gnorm <= opts.grad_tol {
            return Ok(FitResult { beta_hat: beta, grad_norm: gnorm, iterations: iter, converged: true });
        }
        let mut dir = -(&inv_h * &g);
        let mut slope = g.dot(&dir);
        if slope >= 0.0 {
            inv_h = DMatrix::identity(d, d);
            dir = -g.clone();
            slope = -gnorm * gnorm;
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand = &beta + &dir * t;
            let (fc, gc) = risk.value_grad(&cand);
            if acceptable(fc, f, gc.norm(), gnorm, -ARMIJO * t * slope) {
                accepted = Some((cand, fc, gc));
                break;
            }
            t *= 0.5;
        }
        let Some((next, fc, gc)) = accepted else {
            return Err(no_convergence(beta, gnorm, iter));
        };
        let s = &next - &beta;
        let yv = &gc - &g;
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(d, d);
            let left = &eye - (&s * yv.transpose()) * rho;
            let right = &eye - (&yv * s.transpose()) * rho;
            inv_h = &left * &inv_h * &right + (&s * s.transpose()) * rho;
        }
        beta = next;
        f = fc;
        g = gc;
    }
    let gnorm = g.norm();
    if gnorm <= opts.grad_tol {
        Ok(FitResult { beta_hat: beta, grad_norm: gnorm, iterations: opts.max_iter, converged: true })
    } else {
        Err(no_convergence(beta, gnorm, opts.max_iter))
    }
}

fn no_convergence(beta: DVector<f64>, grad_norm: f64, iterations: usize) -> FitError {
    FitError::NoConvergence {
        best: FitResult { beta_hat: beta, grad_norm, iterations, converged: false },
        iterations,
        grad_norm,
    }
}

fn solve_spd(m: DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    match m.clone().cholesky() {
        Some(c) => Some(c.solve(rhs)),
        None => m.lu().solve(rhs),
    }
}

/// Initial point for the single-index fit: leading eigenvector of
/// `n^{-1} sum y_i x_i x_i^T`, scaled to match `E[y x x^T] = |b|^2 I + 2 b b^T`
/// under standard normal covariates.
pub fn spectral_start(data: &Dataset) -> DVector<f64> {
    let mut weighted = data.x.clone();
    for (i, &y) in data.y.iter().enumerate() {
        weighted.row_mut(i).scale_mut(y);
    }
    let m = data.x.tr_mul(&weighted) / data.len() as f64;
    let eig = m.clone().symmetric_eigen();
    let (imax, &lmax) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("nonempty spectrum");
    let mut v = eig.eigenvectors.column(imax).into_owned();
    // fix the arbitrary eigenvector sign: largest-magnitude coordinate positive
    let (jmax, _) = v.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap();
    if v[jmax] < 0.0 {
        v.neg_mut();
    }
    // trace of E[y x x^T] is (d + 2)|b|^2
    let d = data.dim() as f64;
    let norm_sq = (m.trace() / (d + 2.0)).max(lmax / 3.0).max(0.0);
    v * norm_sq.sqrt()
}
