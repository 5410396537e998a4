//! Prior score models `s(x, beta) ~ grad_x log p_beta(x)`, where `p_beta` is
//! the prior convolved with `N(0, beta^2 I)`.

pub mod bridge;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, QcsError, Result};
use crate::sensing::toeplitz_correlation;

pub use bridge::{BridgeClient, BridgeError, BridgePrior, Endpoint};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A (possibly learned) score of the noise-perturbed prior.
pub trait PriorScore: Send + Sync {
    fn dim(&self) -> usize;

    fn score(&self, x: &DVector<f64>, beta: f64) -> Result<DVector<f64>>;

    /// Noise levels the model was built for.
    fn beta_range(&self) -> (f64, f64) {
        (0.0, f64::INFINITY)
    }
}

/// Priors with a closed-form density, usable as ground truth.
pub trait AnalyticPrior: PriorScore {
    fn log_density(&self, x: &DVector<f64>, beta: f64) -> Result<f64>;

    fn sample(&self, rng: &mut dyn rand::RngCore) -> DVector<f64>;
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(QcsError::invalid(format!("beta must be finite and >= 0, got {beta}")));
    }
    Ok(())
}

/// `N(mean, cov)`, stored in the eigenbasis of `cov`.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    mean: DVector<f64>,
    basis: DMatrix<f64>,
    eigenvalues: DVector<f64>,
}

impl GaussianPrior {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if n == 0 {
            return Err(QcsError::invalid("prior dimension must be positive"));
        }
        ensure_len("prior covariance rows", n, cov.nrows())?;
        ensure_len("prior covariance cols", n, cov.ncols())?;
        if (&cov - cov.transpose()).amax() > 1e-10 * cov.amax().max(1.0) {
            return Err(QcsError::invalid("prior covariance is not symmetric"));
        }
        let eig = SymmetricEigen::new(cov);
        if let Some(l) = eig.eigenvalues.iter().find(|l| !(**l > 0.0)) {
            return Err(QcsError::invalid(format!(
                "prior covariance is not positive definite (eigenvalue {l})"
            )));
        }
        Ok(GaussianPrior {
            mean,
            basis: eig.eigenvectors,
            eigenvalues: eig.eigenvalues,
        })
    }

    pub fn isotropic(mean: DVector<f64>, variance: f64) -> Result<Self> {
        let n = mean.len();
        if !(variance > 0.0) {
            return Err(QcsError::invalid(format!("variance must be positive, got {variance}")));
        }
        Ok(GaussianPrior {
            mean,
            basis: DMatrix::identity(n, n),
            eigenvalues: DVector::from_element(n, variance),
        })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.basis * DMatrix::from_diagonal(&self.eigenvalues) * self.basis.transpose()
    }

    /// `(cov + beta^2 I)^{-1} v`.
    fn apply_inverse(&self, v: &DVector<f64>, beta: f64) -> DVector<f64> {
        let b2 = beta * beta;
        let mut coef = self.basis.tr_mul(v);
        coef.iter_mut()
            .zip(self.eigenvalues.iter())
            .for_each(|(c, l)| *c /= l + b2);
        &self.basis * coef
    }
}

impl PriorScore for GaussianPrior {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn score(&self, x: &DVector<f64>, beta: f64) -> Result<DVector<f64>> {
        ensure_len("prior score input", self.dim(), x.len())?;
        check_beta(beta)?;
        Ok(-self.apply_inverse(&(x - &self.mean), beta))
    }
}

impl AnalyticPrior for GaussianPrior {
    fn log_density(&self, x: &DVector<f64>, beta: f64) -> Result<f64> {
        ensure_len("prior density input", self.dim(), x.len())?;
        check_beta(beta)?;
        let diff = x - &self.mean;
        let b2 = beta * beta;
        let quad = diff.dot(&self.apply_inverse(&diff, beta));
        let logdet: f64 = self.eigenvalues.iter().map(|l| (l + b2).ln()).sum();
        Ok(-0.5 * (quad + logdet + self.dim() as f64 * LN_2PI))
    }

    fn sample(&self, rng: &mut dyn rand::RngCore) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |i, _| rng.sample::<f64, _>(StandardNormal) * self.eigenvalues[i].sqrt());
        &self.mean + &self.basis * z
    }
}

/// Mixture of isotropic Gaussians `sum_k w_k N(mu_k, v_k I)`.
#[derive(Debug, Clone)]
pub struct GmmPrior {
    log_weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    variances: Vec<f64>,
}

impl GmmPrior {
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, variances: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(QcsError::invalid("mixture needs at least one component"));
        }
        ensure_len("mixture means", k, means.len())?;
        ensure_len("mixture variances", k, variances.len())?;
        let n = means[0].len();
        if n == 0 {
            return Err(QcsError::invalid("prior dimension must be positive"));
        }
        for mu in &means {
            ensure_len("mixture mean", n, mu.len())?;
        }
        if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(QcsError::invalid("mixture weights must be positive"));
        }
        if variances.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(QcsError::invalid("mixture variances must be positive"));
        }
        let total: f64 = weights.iter().sum();
        Ok(GmmPrior {
            log_weights: weights.iter().map(|w| (w / total).ln()).collect(),
            means,
            variances,
        })
    }

    /// Equal-weight mixture with means drawn from `N(0, spread^2 I)`.
    pub fn random(dim: usize, components: usize, spread: f64, variance: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let means = (0..components)
            .map(|_| DVector::from_fn(dim, |_, _| spread * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Self::new(vec![1.0; components], means, vec![variance; components])
    }

    pub fn components(&self) -> usize {
        self.means.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|l| l.exp()).collect()
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn mean(&self) -> DVector<f64> {
        self.weights()
            .iter()
            .zip(&self.means)
            .fold(DVector::zeros(self.dim()), |acc, (w, mu)| acc + mu * *w)
    }

    /// Per-component log joint `log w_k + log N(x; mu_k, (v_k + beta^2) I)`.
    fn component_logs(&self, x: &DVector<f64>, beta: f64) -> Vec<f64> {
        let n = self.dim() as f64;
        let b2 = beta * beta;
        self.means
            .iter()
            .zip(&self.variances)
            .zip(&self.log_weights)
            .map(|((mu, v), lw)| {
                let s = v + b2;
                lw - 0.5 * ((x - mu).norm_squared() / s + n * (s.ln() + LN_2PI))
            })
            .collect()
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let top = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return top;
    }
    top + v.iter().map(|l| (l - top).exp()).sum::<f64>().ln()
}

impl PriorScore for GmmPrior {
    fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn score(&self, x: &DVector<f64>, beta: f64) -> Result<DVector<f64>> {
        ensure_len("prior score input", self.dim(), x.len())?;
        check_beta(beta)?;
        let logs = self.component_logs(x, beta);
        let norm = log_sum_exp(&logs);
        let b2 = beta * beta;
        let mut out = DVector::zeros(self.dim());
        for ((mu, v), l) in self.means.iter().zip(&self.variances).zip(&logs) {
            let r = (l - norm).exp();
            out.axpy(-r, &((x - mu) / (v + b2)), 1.0);
        }
        Ok(out)
    }
}

impl AnalyticPrior for GmmPrior {
    fn log_density(&self, x: &DVector<f64>, beta: f64) -> Result<f64> {
        ensure_len("prior density input", self.dim(), x.len())?;
        check_beta(beta)?;
        Ok(log_sum_exp(&self.component_logs(x, beta)))
    }

    fn sample(&self, rng: &mut dyn rand::RngCore) -> DVector<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.components() - 1;
        for (i, lw) in self.log_weights.iter().enumerate() {
            acc += lw.exp();
            if u < acc {
                k = i;
                break;
            }
        }
        let sd = self.variances[k].sqrt();
        DVector::from_fn(self.dim(), |i, _| self.means[k][i] + sd * rng.sample::<f64, _>(StandardNormal))
    }
}

/// Prior section of an experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorConfig {
    /// Constant mean, covariance `variance * rho^|i-j|`.
    Gaussian {
        dim: usize,
        #[serde(default)]
        mean: f64,
        #[serde(default = "unit")]
        variance: f64,
        #[serde(default)]
        correlation: f64,
    },
    Gmm {
        dim: usize,
        components: usize,
        #[serde(default = "unit")]
        spread: f64,
        #[serde(default = "default_gmm_variance")]
        variance: f64,
        #[serde(default)]
        seed: u64,
    },
    Bridge {
        dim: usize,
        endpoint: String,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
        /// Independent connections; chains share them through a queue.
        #[serde(default = "default_connections")]
        connections: usize,
    },
}

fn unit() -> f64 {
    1.0
}

fn default_gmm_variance() -> f64 {
    0.05
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_connections() -> usize {
    1
}

/// A built prior: analytic ones also expose density and sampling.
pub enum Prior {
    Gaussian(GaussianPrior),
    Gmm(GmmPrior),
    Bridge(BridgePrior),
}

impl Prior {
    pub fn build(config: &PriorConfig) -> Result<Self> {
        match config {
            PriorConfig::Gaussian {
                dim,
                mean,
                variance,
                correlation,
            } => {
                if !(0.0..1.0).contains(correlation) {
                    return Err(QcsError::Config(format!(
                        "prior correlation must lie in [0, 1), got {correlation}"
                    )));
                }
                let cov = toeplitz_correlation(*dim, *correlation) * *variance;
                Ok(Prior::Gaussian(GaussianPrior::new(DVector::from_element(*dim, *mean), cov)?))
            }
            PriorConfig::Gmm {
                dim,
                components,
                spread,
                variance,
                seed,
            } => Ok(Prior::Gmm(GmmPrior::random(*dim, *components, *spread, *variance, *seed)?)),
            PriorConfig::Bridge {
                dim,
                endpoint,
                timeout_ms,
                connections,
            } => {
                let endpoint: Endpoint = endpoint.parse()?;
                let timeout = std::time::Duration::from_millis(*timeout_ms);
                Ok(Prior::Bridge(BridgePrior::connect(&endpoint, *dim, timeout, *connections)?))
            }
        }
    }

    pub fn as_score(&self) -> &dyn PriorScore {
        match self {
            Prior::Gaussian(p) => p,
            Prior::Gmm(p) => p,
            Prior::Bridge(p) => p,
        }
    }

    pub fn as_analytic(&self) -> Option<&dyn AnalyticPrior> {
        match self {
            Prior::Gaussian(p) => Some(p),
            Prior::Gmm(p) => Some(p),
            Prior::Bridge(_) => None,
        }
    }
}
