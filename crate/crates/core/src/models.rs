//! Loss/sampler pairs. Every model here is a single-index model: the loss
//! depends on `beta` only through `eta = beta^T x`, so
//! `grad = l'(eta, y) x` and `hess = l''(eta, y) x x^T`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Poisson rates above this are rejected rather than sampled.
pub const POISSON_RATE_CAP: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("unknown model kind `{0}`")]
    UnknownKind(String),
    #[error("dimension must be at least 1")]
    ZeroDimension,
    #[error("noise sigma must be positive, got {0}")]
    BadSigma(f64),
    #[error("Poisson rate {0:e} exceeds the sampling cap")]
    RateOverflow(f64),
    #[error("fixed covariate has length {got}, expected {expected}")]
    CovariateLength { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Logistic,
    Poisson,
    SingleIndexQuadratic,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] =
        [ModelKind::Linear, ModelKind::Logistic, ModelKind::Poisson, ModelKind::SingleIndexQuadratic];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Linear => "linear",
            ModelKind::Logistic => "logistic",
            ModelKind::Poisson => "poisson",
            ModelKind::SingleIndexQuadratic => "single_index_quadratic",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ModelError::UnknownKind(s.to_string()))
    }
}

/// Law of the covariate vector `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateLaw {
    /// `x ~ N(0, I_d)`.
    StandardNormal,
    /// `x` equal to a fixed vector on every draw.
    Fixed(Vec<f64>),
}

/// One estimation problem: loss, its derivatives, and the generative map
/// `z = phi(beta, eps)` realized as `(x, respond(beta, x, u))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossModel {
    pub kind: ModelKind,
    pub d: usize,
    pub noise_sigma: f64,
    pub covariates: CovariateLaw,
}

pub fn make_model(kind: ModelKind, d: usize, noise_sigma: f64) -> Result<LossModel, ModelError> {
    LossModel::new(kind, d, noise_sigma)
}

impl LossModel {
    pub fn new(kind: ModelKind, d: usize, noise_sigma: f64) -> Result<Self, ModelError> {
        if d == 0 {
            return Err(ModelError::ZeroDimension);
        }
        if !(noise_sigma > 0.0 && noise_sigma.is_finite()) {
            return Err(ModelError::BadSigma(noise_sigma));
        }
        Ok(LossModel { kind, d, noise_sigma, covariates: CovariateLaw::StandardNormal })
    }

    pub fn with_covariates(mut self, law: CovariateLaw) -> Result<Self, ModelError> {
        if let CovariateLaw::Fixed(x) = &law {
            if x.len() != self.d {
                return Err(ModelError::CovariateLength { expected: self.d, got: x.len() });
            }
        }
        self.covariates = law;
        Ok(self)
    }

    pub fn is_convex(&self) -> bool {
        self.kind != ModelKind::SingleIndexQuadratic
    }

    /// `l(eta, y)`.
    pub fn link_loss(&self, eta: f64, y: f64) -> f64 {
        match self.kind {
            ModelKind::Linear => -y * eta + 0.5 * eta * eta,
            ModelKind::Logistic => -y * eta + softplus(eta),
            ModelKind::Poisson => -y * eta + eta.exp(),
            ModelKind::SingleIndexQuadratic => {
                let r = y - eta * eta;
                0.5 * r * r
            }
        }
    }

    /// `dl/deta`.
    pub fn link_grad(&self, eta: f64, y: f64) -> f64 {
        match self.kind {
            ModelKind::Linear => eta - y,
            ModelKind::Logistic => sigmoid(eta) - y,
            ModelKind::Poisson => eta.exp() - y,
            ModelKind::SingleIndexQuadratic => -2.0 * eta * (y - eta * eta),
        }
    }

    /// `d^2 l / deta^2`.
    pub fn link_hess(&self, eta: f64, y: f64) -> f64 {
        match self.kind {
            ModelKind::Linear => 1.0,
            ModelKind::Logistic => {
                let s = sigmoid(eta);
                s * (1.0 - s)
            }
            ModelKind::Poisson => eta.exp(),
            ModelKind::SingleIndexQuadratic => 6.0 * eta * eta - 2.0 * y,
        }
    }

    pub fn loss(&self, beta: &DVector<f64>, x: &DVector<f64>, y: f64) -> f64 {
        self.link_loss(beta.dot(x), y)
    }

    pub fn grad(&self, beta: &DVector<f64>, x: &DVector<f64>, y: f64) -> DVector<f64> {
        x * self.link_grad(beta.dot(x), y)
    }

    pub fn hess(&self, beta: &DVector<f64>, x: &DVector<f64>, y: f64) -> DMatrix<f64> {
        (x * x.transpose()) * self.link_hess(beta.dot(x), y)
    }

    pub fn draw_covariate<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match &self.covariates {
            CovariateLaw::StandardNormal => DVector::from_fn(self.d, |_, _| StandardNormal.sample(rng)),
            CovariateLaw::Fixed(x) => DVector::from_column_slice(x),
        }
    }

    /// The noise primitive `u`: standard normal for additive-noise kinds,
    /// uniform on `[0, 1)` for the count/binary kinds.
    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.kind {
            ModelKind::Linear | ModelKind::SingleIndexQuadratic => StandardNormal.sample(rng),
            ModelKind::Logistic | ModelKind::Poisson => rng.gen::<f64>(),
        }
    }

    /// Response `y` as a deterministic function of `(beta, x, u)`.
    pub fn respond(&self, beta: &DVector<f64>, x: &DVector<f64>, u: f64) -> Result<f64, ModelError> {
        let eta = beta.dot(x);
        Ok(match self.kind {
            ModelKind::Linear => eta + self.noise_sigma * u,
            ModelKind::Logistic => {
                if u <= sigmoid(eta) {
                    1.0
                } else {
                    0.0
                }
            }
            ModelKind::Poisson => poisson_inverse_cdf(eta.exp(), u)? as f64,
            ModelKind::SingleIndexQuadratic => eta * eta + self.noise_sigma * u,
        })
    }

    /// Draws `n` observations from `P_beta`, returning the dataset and the raw
    /// noise primitives.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        beta: &DVector<f64>,
        n: usize,
        rng: &mut R,
    ) -> Result<(Dataset, DVector<f64>), ModelError> {
        let mut x = DMatrix::zeros(n, self.d);
        let mut y = DVector::zeros(n);
        let mut u = DVector::zeros(n);
        for i in 0..n {
            let xi = self.draw_covariate(rng);
            let ui = self.draw_noise(rng);
            y[i] = self.respond(beta, &xi, ui)?;
            u[i] = ui;
            x.row_mut(i).copy_from(&xi.transpose());
        }
        Ok((Dataset { x, y }, u))
    }
}

/// Design matrix (one row per observation) and responses.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Self {
        assert_eq!(x.nrows(), y.len(), "one response per row");
        Dataset { x, y }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Stacks datasets row-wise.
    pub fn concat(parts: &[&Dataset]) -> Dataset {
        let d = parts.first().map_or(0, |p| p.dim());
        let n: usize = parts.iter().map(|p| p.len()).sum();
        let mut x = DMatrix::zeros(n, d);
        let mut y = DVector::zeros(n);
        let mut row = 0;
        for p in parts {
            x.view_mut((row, 0), (p.len(), d)).copy_from(&p.x);
            y.rows_mut(row, p.len()).copy_from(&p.y);
            row += p.len();
        }
        Dataset { x, y }
    }

    /// First `n` rows.
    pub fn head(&self, n: usize) -> Dataset {
        Dataset { x: self.x.rows(0, n).into_owned(), y: self.y.rows(0, n).into_owned() }
    }

    pub fn gram(&self) -> DMatrix<f64> {
        self.x.tr_mul(&self.x)
    }
}

/// Mean loss, gradient and Hessian of the empirical risk.
pub struct Risk<'a> {
    pub model: &'a LossModel,
    pub data: &'a Dataset,
}

impl Risk<'_> {
    fn etas(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.data.x * beta
    }

    pub fn value(&self, beta: &DVector<f64>) -> f64 {
        let eta = self.etas(beta);
        let n = self.data.len() as f64;
        eta.iter().zip(self.data.y.iter()).map(|(&e, &y)| self.model.link_loss(e, y)).sum::<f64>() / n
    }

    pub fn value_grad(&self, beta: &DVector<f64>) -> (f64, DVector<f64>) {
        let eta = self.etas(beta);
        let n = self.data.len() as f64;
        let mut total = 0.0;
        let mut w = DVector::zeros(eta.len());
        for (i, (&e, &y)) in eta.iter().zip(self.data.y.iter()).enumerate() {
            total += self.model.link_loss(e, y);
            w[i] = self.model.link_grad(e, y) / n;
        }
        (total / n, self.data.x.tr_mul(&w))
    }

    pub fn hessian(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        let eta = self.etas(beta);
        let n = self.data.len() as f64;
        let mut weighted = self.data.x.clone();
        for (i, (&e, &y)) in eta.iter().zip(self.data.y.iter()).enumerate() {
            let h = self.model.link_hess(e, y) / n;
            weighted.row_mut(i).scale_mut(h);
        }
        self.data.x.tr_mul(&weighted)
    }
}

pub(crate) fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

/// Smallest `k` with `P(Poisson(rate) <= k) >= u`, by sequential search.
fn poisson_inverse_cdf(rate: f64, u: f64) -> Result<u64, ModelError> {
    if !(rate <= POISSON_RATE_CAP) {
        return Err(ModelError::RateOverflow(rate));
    }
    // Work in log space so large rates do not underflow exp(-rate).
    let log_rate = rate.ln();
    let mut k: u64 = 0;
    let mut log_pmf = -rate;
    let mut cdf = log_pmf.exp();
    while cdf < u {
        k += 1;
        log_pmf += log_rate - (k as f64).ln();
        cdf += log_pmf.exp();
        if log_pmf < -745.0 && k as f64 > rate {
            // remaining tail mass is below f64 resolution
            break;
        }
    }
    Ok(k)
}
