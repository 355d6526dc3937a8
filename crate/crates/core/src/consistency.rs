//! Object-consistency latent model.
//!
//! Each mapped object carries a `Beta(α, β)` belief over its consistency `v`,
//! the probability that it is unchanged. A landmark residual `e` is explained
//! either by a zero-mean isotropic Gaussian (unchanged) or by a uniform density
//! on `‖e‖` over `[0, e_max]` (changed). Under the mean-field factorization
//! `q(π) q(v)` the optimal Bernoulli responsibilities are a softmax of
//! `E[log v] + log N(e)` against `E[log(1-v)] + log U`, with the expectations
//! given in closed form by the digamma function.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::geom::Point2;

/// Default cap on `α + β`; older evidence is rescaled away beyond it.
pub const DEFAULT_COUNT_CAP: f64 = 50.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConsistencyError {
    #[error("digamma is undefined for x = {0}; x must be positive and finite")]
    DigammaDomain(f64),
    #[error("Beta pseudo-counts must be positive and finite, got alpha = {alpha}, beta = {beta}")]
    InvalidBeta { alpha: f64, beta: f64 },
    #[error("invalid mixture parameters: {0}")]
    InvalidMixture(String),
}

/// Digamma function `ψ(x)` for `x > 0`.
///
/// Shifts the argument above 6 with `ψ(x) = ψ(x + 1) - 1/x`, then sums the
/// asymptotic expansion through the `x^-14` term.
pub fn digamma(x: f64) -> Result<f64, ConsistencyError> {
    if !(x > 0.0 && x.is_finite()) {
        return Err(ConsistencyError::DigammaDomain(x));
    }
    Ok(digamma_positive(x))
}

pub(crate) fn digamma_positive(mut x: f64) -> f64 {
    let mut shift = 0.0;
    while x < 10.0 {
        shift -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Bernoulli-number coefficients B_2k / 2k, evaluated by Horner in 1/x^2.
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    shift + x.ln() - 0.5 * inv - series
}

/// Beta-distributed belief over an object's consistency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBeta")]
pub struct BetaState {
    alpha: f64,
    beta: f64,
}

#[derive(Deserialize)]
struct RawBeta {
    alpha: f64,
    beta: f64,
}

impl TryFrom<RawBeta> for BetaState {
    type Error = ConsistencyError;
    fn try_from(raw: RawBeta) -> Result<Self, Self::Error> {
        BetaState::new(raw.alpha, raw.beta)
    }
}

impl Default for BetaState {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

impl BetaState {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, ConsistencyError> {
        if alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite() {
            Ok(Self { alpha, beta })
        } else {
            Err(ConsistencyError::InvalidBeta { alpha, beta })
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// `E[v] = α / (α + β)`.
    pub fn expectation(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn expected_log_v(&self) -> f64 {
        digamma_positive(self.alpha) - digamma_positive(self.alpha + self.beta)
    }

    pub fn expected_log_1mv(&self) -> f64 {
        digamma_positive(self.beta) - digamma_positive(self.alpha + self.beta)
    }

    /// Adds fractional evidence and rescales both counts when their sum
    /// exceeds `cap`.
    pub fn with_counts_added(&self, d_alpha: f64, d_beta: f64, cap: f64) -> BetaState {
        let mut alpha = self.alpha + d_alpha;
        let mut beta = self.beta + d_beta;
        let total = alpha + beta;
        if total > cap {
            let scale = cap / total;
            alpha *= scale;
            beta *= scale;
        }
        BetaState { alpha, beta }
    }
}

pub fn expected_log_v(s: &BetaState) -> f64 {
    s.expected_log_v()
}

pub fn expected_log_1mv(s: &BetaState) -> f64 {
    s.expected_log_1mv()
}

/// `KL(q ‖ p)` between two Beta distributions.
pub fn beta_kl(q: &BetaState, p: &BetaState) -> f64 {
    let ln_beta = |a: f64, b: f64| ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
    let (a, b) = (q.alpha, q.beta);
    let (a0, b0) = (p.alpha, p.beta);
    ln_beta(a0, b0) - ln_beta(a, b)
        + (a - a0) * digamma_positive(a)
        + (b - b0) * digamma_positive(b)
        + (a0 - a + b0 - b) * digamma_positive(a + b)
}

/// Parameters of the Gaussian-Uniform landmark likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    /// Isotropic keypoint noise standard deviation (m).
    pub sigma: f64,
    /// Support bound of the uniform "changed" density (m).
    pub e_max: f64,
    /// Residual dimension.
    pub dim: usize,
}

impl Default for MixtureParams {
    fn default() -> Self {
        Self {
            sigma: 0.05,
            e_max: 5.0,
            dim: 2,
        }
    }
}

impl MixtureParams {
    pub fn new(sigma: f64, e_max: f64, dim: usize) -> Result<Self, ConsistencyError> {
        let p = Self { sigma, e_max, dim };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ConsistencyError> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(ConsistencyError::InvalidMixture(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !(self.e_max > 0.0 && self.e_max.is_finite()) {
            return Err(ConsistencyError::InvalidMixture(format!(
                "e_max must be positive, got {}",
                self.e_max
            )));
        }
        if self.dim == 0 {
            return Err(ConsistencyError::InvalidMixture(
                "dim must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// `(dim / 2) log(2πσ²)`, the Gaussian normalizer.
    pub fn gaussian_log_normalizer(&self) -> f64 {
        0.5 * self.dim as f64 * (2.0 * PI * self.sigma * self.sigma).ln()
    }
}

pub fn gaussian_log_density(residual: Point2, p: &MixtureParams) -> f64 {
    -residual.norm_squared() / (2.0 * p.sigma * p.sigma) - p.gaussian_log_normalizer()
}

/// Log of `U(‖e‖ | 0, e_max)`; constant in the residual.
pub fn uniform_log_density(p: &MixtureParams) -> f64 {
    -p.e_max.ln()
}

/// Mean-field responsibilities `(E[π], E[1-π])` of one landmark residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EStepWeights {
    pub w_static: f64,
    pub w_changed: f64,
}

impl EStepWeights {
    pub const STATIC: EStepWeights = EStepWeights {
        w_static: 1.0,
        w_changed: 0.0,
    };
    pub const CHANGED: EStepWeights = EStepWeights {
        w_static: 0.0,
        w_changed: 1.0,
    };

    /// Normalizes two unnormalized log-weights without underflow.
    pub fn from_log_weights(log_static: f64, log_changed: f64) -> Self {
        let d = log_changed - log_static;
        if d > 0.0 {
            let e = (-d).exp();
            let w_static = e / (1.0 + e);
            EStepWeights {
                w_static,
                w_changed: 1.0 / (1.0 + e),
            }
        } else {
            let e = d.exp();
            EStepWeights {
                w_static: 1.0 / (1.0 + e),
                w_changed: e / (1.0 + e),
            }
        }
    }

    /// Entropy of the Bernoulli `q(π)`.
    pub fn entropy(&self) -> f64 {
        -(xlogx(self.w_static) + xlogx(self.w_changed))
    }
}

pub(crate) fn xlogx(w: f64) -> f64 {
    if w > 0.0 {
        w * w.ln()
    } else {
        0.0
    }
}

pub fn e_step_weights(residual: Point2, p: &MixtureParams, s: &BetaState) -> EStepWeights {
    EStepWeights::from_log_weights(
        s.expected_log_v() + gaussian_log_density(residual, p),
        s.expected_log_1mv() + uniform_log_density(p),
    )
}

/// Residual-dependent part of the landmark lower bound:
/// `E[π] log N(e) + E[1-π] log U`.
pub fn elbo_landmark(residual: Point2, p: &MixtureParams, w: &EStepWeights) -> f64 {
    w.w_static * gaussian_log_density(residual, p) + w.w_changed * uniform_log_density(p)
}

/// Conjugate update with one Bernoulli observation of soft weight `responsibility`.
pub fn beta_update(s: &BetaState, responsibility: f64, cap: f64) -> BetaState {
    let r = responsibility.clamp(0.0, 1.0);
    s.with_counts_added(r, 1.0 - r, cap)
}

/// Penalizes an object that should have been seen but was not.
pub fn apply_pseudo_change(s: &BetaState, delta: f64, cap: f64) -> BetaState {
    s.with_counts_added(0.0, delta.max(0.0), cap)
}

/// Exponentially weighted running estimate of an object's change magnitude.
pub fn update_change_magnitude(l_est: f64, residual_norm: f64, rate: f64) -> f64 {
    (1.0 - rate) * l_est + rate * residual_norm
}
