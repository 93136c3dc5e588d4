//! Sandwich covariance `V* = H*^{-1} G* H*^{-1}` of an M-estimator fitted on
//! data from `P_{beta*}`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::models::{CovariateLaw, LossModel, ModelError, ModelKind};
use crate::rng::{stream, Lane};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SandwichError {
    #[error("population Hessian is singular")]
    SingularHessian,
    #[error("at least one Monte Carlo sample is required")]
    NoSamples,
    #[error("beta* has length {got}, model dimension is {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sandwich {
    pub h: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

impl Sandwich {
    fn assemble(h: DMatrix<f64>, g: DMatrix<f64>) -> Result<Self, SandwichError> {
        let h_inv = h.clone().cholesky().ok_or(SandwichError::SingularHessian)?.inverse();
        let v = &h_inv * &g * &h_inv;
        let v = (&v + v.transpose()) * 0.5;
        Ok(Sandwich { h, g, v })
    }
}

/// Closed form for the linear kind under standard normal covariates, Monte
/// Carlo otherwise.
pub fn sandwich(
    model: &LossModel,
    beta_star: &DVector<f64>,
    mc_samples: usize,
    seed: u64,
) -> Result<Sandwich, SandwichError> {
    if model.kind == ModelKind::Linear && model.covariates == CovariateLaw::StandardNormal {
        if beta_star.len() != model.d {
            return Err(SandwichError::DimensionMismatch { expected: model.d, got: beta_star.len() });
        }
        let eye = DMatrix::<f64>::identity(model.d, model.d);
        let s2 = model.noise_sigma * model.noise_sigma;
        return Sandwich::assemble(eye.clone(), eye * s2);
    }
    sandwich_monte_carlo(model, beta_star, mc_samples, seed)
}

/// Monte Carlo estimate for any kind, averaging `l''(eta) x x^T` and
/// `l'(eta)^2 x x^T` over draws at `beta*`.
pub fn sandwich_monte_carlo(
    model: &LossModel,
    beta_star: &DVector<f64>,
    mc_samples: usize,
    seed: u64,
) -> Result<Sandwich, SandwichError> {
    if mc_samples == 0 {
        return Err(SandwichError::NoSamples);
    }
    if beta_star.len() != model.d {
        return Err(SandwichError::DimensionMismatch { expected: model.d, got: beta_star.len() });
    }
    let d = model.d;
    let mut rng = stream(seed, 0, 0, Lane::Sandwich);
    let mut h = DMatrix::zeros(d, d);
    let mut g = DMatrix::zeros(d, d);
    for _ in 0..mc_samples {
        let x = model.draw_covariate(&mut rng);
        let u = model.draw_noise(&mut rng);
        let y = model.respond(beta_star, &x, u)?;
        let eta = beta_star.dot(&x);
        let outer = &x * x.transpose();
        h += &outer * model.link_hess(eta, y);
        let gr = model.link_grad(eta, y);
        g += outer * (gr * gr);
    }
    let n = mc_samples as f64;
    h /= n;
    g /= n;
    Sandwich::assemble((&h + h.transpose()) * 0.5, (&g + g.transpose()) * 0.5)
}
