//! Annealed Langevin posterior sampler.
//!
//! For each noise level `beta_t` (largest first) the chain takes `K` steps
//!
//! ```text
//! x <- x + alpha_t (s(x, beta_t) + gamma grad log p(y | x)) + sqrt(2 alpha_t) w
//! ```
//!
//! with `alpha_t = epsilon (beta_t / beta_T)^2` and `w ~ N(0, I)`.

use std::time::Instant;

use log::{debug, warn};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ep::{self, EpConfig, EpState, Observations};
use crate::error::{ensure_len, QcsError, Result};
use crate::prior::PriorScore;
use crate::sensing::MeasurementModel;

/// Step-size scale for the likelihood term used for digit and small colour
/// images.
pub const XI_DEFAULT: f64 = 0.5;
/// Step-size scale used for larger face images.
pub const XI_FACES: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
}

impl NoiseSchedule {
    /// `beta_t = beta_max (beta_min / beta_max)^((t - 1) / (T - 1))`.
    pub fn geometric(beta_max: f64, beta_min: f64, levels: usize) -> Result<Self> {
        if !(beta_max > beta_min && beta_min > 0.0) || !beta_max.is_finite() {
            return Err(QcsError::invalid(format!(
                "schedule needs beta_max > beta_min > 0, got {beta_max} and {beta_min}"
            )));
        }
        if levels < 2 {
            return Err(QcsError::invalid("schedule needs at least two levels"));
        }
        let ratio = beta_min / beta_max;
        let last = (levels - 1) as f64;
        let mut betas: Vec<f64> = (0..levels).map(|t| beta_max * ratio.powf(t as f64 / last)).collect();
        betas[0] = beta_max;
        betas[levels - 1] = beta_min;
        Ok(NoiseSchedule { betas })
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0) || !b.is_finite()) {
            return Err(QcsError::invalid("schedule levels must be positive and finite"));
        }
        if betas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(QcsError::invalid("schedule levels must be strictly decreasing"));
        }
        Ok(NoiseSchedule { betas })
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta_min(&self) -> f64 {
        *self.betas.last().expect("non-empty schedule")
    }

    /// `epsilon (beta_t / beta_T)^2`; exactly `epsilon` at the last level.
    pub fn step_size(&self, epsilon: f64, level: usize) -> f64 {
        let r = self.betas[level] / self.beta_min();
        epsilon * (r * r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub beta_max: f64,
    pub beta_min: f64,
    pub levels: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            beta_max: 1.0,
            beta_min: 0.05,
            levels: 20,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::geometric(self.beta_max, self.beta_min, self.levels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// EP likelihood score.
    #[default]
    Plus,
    /// Diagonal-covariance likelihood score.
    Baseline,
}

impl std::str::FromStr for Algorithm {
    type Err = QcsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plus" => Ok(Algorithm::Plus),
            "baseline" => Ok(Algorithm::Baseline),
            other => Err(QcsError::invalid(format!("unknown algorithm '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    FixedOne,
    /// `gamma = xi |s| / |grad log p(y | x)|`, recomputed every step.
    #[default]
    Scaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Independent `U(0, 1)` entries.
    #[default]
    Uniform,
    Zeros,
    StandardNormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub algo: Algorithm,
    pub epsilon: f64,
    pub k_inner: usize,
    pub gamma_mode: GammaMode,
    pub xi: f64,
    pub init: InitMode,
    pub schedule: ScheduleConfig,
    pub ep: EpConfig,
    pub seed: u64,
    /// Keep a per-step record in the chain result.
    pub trace: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            algo: Algorithm::Plus,
            epsilon: 0.002,
            k_inner: 5,
            gamma_mode: GammaMode::Scaled,
            xi: XI_DEFAULT,
            init: InitMode::Uniform,
            schedule: ScheduleConfig::default(),
            ep: EpConfig::default(),
            seed: 0,
            trace: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(QcsError::Config("sampler.epsilon must be positive".into()));
        }
        if self.k_inner == 0 {
            return Err(QcsError::Config("sampler.k_inner must be at least 1".into()));
        }
        if !(self.xi > 0.0) || !self.xi.is_finite() {
            return Err(QcsError::Config("sampler.xi must be positive".into()));
        }
        self.ep.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub level: usize,
    pub step: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub prior_norm: f64,
    pub likelihood_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelDiagnostics {
    pub beta: f64,
    pub alpha: f64,
    pub mean_prior_norm: f64,
    pub mean_likelihood_norm: f64,
    pub mean_gamma: f64,
    /// Steps where the likelihood score vanished and `gamma` fell back to 1.
    pub gamma_fallbacks: usize,
    pub ep_clamps: usize,
    pub max_var_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainResult {
    pub chain_index: usize,
    pub seed: u64,
    pub x_hat: DVector<f64>,
    pub levels: Vec<LevelDiagnostics>,
    pub trace: Option<Vec<StepTrace>>,
    pub seconds: f64,
}

impl ChainResult {
    pub fn ep_clamps(&self) -> usize {
        self.levels.iter().map(|l| l.ep_clamps).sum()
    }
}

/// Read-only inputs shared by every chain.
#[derive(Clone, Copy)]
pub struct Problem<'a> {
    pub model: &'a MeasurementModel,
    pub obs: &'a Observations,
    pub prior: &'a dyn PriorScore,
}

impl Problem<'_> {
    fn validate(&self) -> Result<()> {
        ensure_len("observations", self.model.m(), self.obs.len())?;
        ensure_len("prior dimension", self.model.n(), self.prior.dim())
    }
}

fn check_finite(v: &DVector<f64>, what: &str, level: usize, step: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(QcsError::NonFinite(format!("{what} at level {level}, step {step}")))
    }
}

/// Chain 0 of [`run_batch`].
pub fn run_chain(problem: Problem<'_>, schedule: &NoiseSchedule, config: &SamplerConfig) -> Result<ChainResult> {
    run_chain_indexed(problem, schedule, config, 0)
}

/// One chain on its own RNG stream `(config.seed, chain_index)`.
pub fn run_chain_indexed(
    problem: Problem<'_>,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    chain_index: usize,
) -> Result<ChainResult> {
    config.validate()?;
    problem.validate()?;
    let start = Instant::now();
    let n = problem.model.n();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(chain_index as u64);

    let mut x = match config.init {
        InitMode::Uniform => DVector::from_fn(n, |_, _| rng.random::<f64>()),
        InitMode::Zeros => DVector::zeros(n),
        InitMode::StandardNormal => DVector::from_fn(n, |_, _| rng.sample(StandardNormal)),
    };
    let mut trace = config.trace.then(Vec::new);
    let mut levels = Vec::with_capacity(schedule.len());
    let mut warm: Option<EpState> = None;

    for (level, &beta) in schedule.betas().iter().enumerate() {
        let alpha = schedule.step_size(config.epsilon, level);
        let noise_scale = (2.0 * alpha).sqrt();
        let mut diag = LevelDiagnostics {
            beta,
            alpha,
            mean_prior_norm: 0.0,
            mean_likelihood_norm: 0.0,
            mean_gamma: 0.0,
            gamma_fallbacks: 0,
            ep_clamps: 0,
            max_var_residual: 0.0,
        };
        for step in 0..config.k_inner {
            let s = problem.prior.score(&x, beta)?;
            ensure_len("prior score output", n, s.len())?;
            check_finite(&s, "prior score", level, step)?;

            let g = match config.algo {
                Algorithm::Plus => {
                    let start = if config.ep.warm_start { warm.as_ref() } else { None };
                    let (g, state) =
                        ep::likelihood_score_from(problem.model, beta, &x, problem.obs, &config.ep, start)?;
                    diag.ep_clamps += state.clamp_count;
                    diag.max_var_residual = diag.max_var_residual.max(state.var_residual());
                    if config.ep.warm_start {
                        warm = Some(state);
                    }
                    g
                }
                Algorithm::Baseline => ep::diagonal_baseline_score(problem.model, beta, &x, problem.obs)?,
            };
            check_finite(&g, "likelihood score", level, step)?;

            let s_norm = s.norm();
            let g_norm = g.norm();
            let gamma = match config.gamma_mode {
                GammaMode::FixedOne => 1.0,
                GammaMode::Scaled if g_norm > 0.0 => config.xi * s_norm / g_norm,
                GammaMode::Scaled => {
                    debug!("likelihood score vanished at level {level}, step {step}; gamma = 1");
                    diag.gamma_fallbacks += 1;
                    1.0
                }
            };

            let mut drift = s;
            drift.axpy(gamma, &g, 1.0);
            x.axpy(alpha, &drift, 1.0);
            for xi in x.iter_mut() {
                *xi += noise_scale * rng.sample::<f64, _>(StandardNormal);
            }
            check_finite(&x, "iterate", level, step)?;

            diag.mean_prior_norm += s_norm;
            diag.mean_likelihood_norm += g_norm;
            diag.mean_gamma += gamma;
            if let Some(t) = trace.as_mut() {
                t.push(StepTrace {
                    level,
                    step,
                    alpha,
                    gamma,
                    prior_norm: s_norm,
                    likelihood_norm: g_norm,
                });
            }
        }
        let k = config.k_inner as f64;
        diag.mean_prior_norm /= k;
        diag.mean_likelihood_norm /= k;
        diag.mean_gamma /= k;
        if diag.ep_clamps > 0 {
            debug!("level {level}: {} ep precision clamps", diag.ep_clamps);
        }
        levels.push(diag);
    }

    Ok(ChainResult {
        chain_index,
        seed: config.seed,
        x_hat: x,
        levels,
        trace,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Independent chains `0..n_chains`, run in parallel. Results are ordered by
/// chain index and one failing chain does not stop the others.
pub fn run_batch(
    problem: Problem<'_>,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    n_chains: usize,
) -> Vec<Result<ChainResult>> {
    (0..n_chains)
        .into_par_iter()
        .map(|i| {
            let out = run_chain_indexed(problem, schedule, config, i);
            if let Err(e) = &out {
                warn!("chain {i} failed: {e}");
            }
            out
        })
        .collect()
}

/// Same as [`run_batch`] on the calling thread.
pub fn run_batch_serial(
    problem: Problem<'_>,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    n_chains: usize,
) -> Vec<Result<ChainResult>> {
    (0..n_chains)
        .map(|i| run_chain_indexed(problem, schedule, config, i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::GaussianPrior;
    use crate::quantizer::QuantizerSpec;
    use crate::sensing::EnsembleSpec;

    #[test]
    fn geometric_schedule_examples() {
        let s = NoiseSchedule::geometric(1.0, 0.01, 3).unwrap();
        assert_eq!(s.betas()[0], 1.0);
        assert!((s.betas()[1] - 0.1).abs() < 1e-15);
        assert_eq!(s.betas()[2], 0.01);
        assert_eq!(NoiseSchedule::geometric(2.0, 0.5, 2).unwrap().betas(), &[2.0, 0.5]);
        let s = NoiseSchedule::geometric(3.0, 0.02, 10).unwrap();
        let r0 = s.betas()[0] / s.betas()[1];
        for w in s.betas().windows(2) {
            assert!((w[0] / w[1] - r0).abs() < 1e-12);
        }
        assert!(NoiseSchedule::geometric(0.1, 1.0, 5).is_err());
        assert!(NoiseSchedule::geometric(1.0, 0.1, 1).is_err());
        assert!(NoiseSchedule::from_betas(vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn step_size_law() {
        let s = NoiseSchedule::geometric(1.0, 0.03, 7).unwrap();
        assert_eq!(s.step_size(0.002, 6), 0.002);
        for t in 0..7 {
            for u in 0..7 {
                let lhs = s.step_size(0.002, t) / s.step_size(0.002, u);
                let rhs = (s.betas()[t] / s.betas()[u]).powi(2);
                assert!((lhs - rhs).abs() <= 1e-12 * rhs);
            }
        }
    }

    fn small_problem() -> (MeasurementModel, Observations, GaussianPrior) {
        let model = MeasurementModel::generate(&EnsembleSpec::ill_conditioned(6, 8, 20.0, 1), 0.1).unwrap();
        let q = QuantizerSpec::sign();
        let x = DVector::from_fn(8, |i, _| (i as f64 * 0.7).sin());
        let (y, _) = model.simulate(&q, &x, 2).unwrap();
        let obs = Observations::new(&q, y.as_slice()).unwrap();
        (model, obs, GaussianPrior::isotropic(DVector::zeros(8), 1.0).unwrap())
    }

    #[test]
    fn chains_are_deterministic_and_batch_matches_serial() {
        let (model, obs, prior) = small_problem();
        let problem = Problem { model: &model, obs: &obs, prior: &prior };
        let schedule = NoiseSchedule::geometric(1.0, 0.1, 4).unwrap();
        let cfg = SamplerConfig { seed: 17, ..SamplerConfig::default() };
        let a = run_chain(problem, &schedule, &cfg).unwrap();
        let b = run_chain(problem, &schedule, &cfg).unwrap();
        assert_eq!(a.x_hat, b.x_hat);
        let par = run_batch(problem, &schedule, &cfg, 4);
        let ser = run_batch_serial(problem, &schedule, &cfg, 4);
        assert_eq!(par[0].as_ref().unwrap().x_hat, a.x_hat);
        for (p, s) in par.iter().zip(&ser) {
            assert_eq!(p.as_ref().unwrap().x_hat, s.as_ref().unwrap().x_hat);
        }
        assert_ne!(par[0].as_ref().unwrap().x_hat, par[1].as_ref().unwrap().x_hat);
    }

    #[test]
    fn scaled_gamma_contract_holds_each_step() {
        let (model, obs, prior) = small_problem();
        let problem = Problem { model: &model, obs: &obs, prior: &prior };
        let schedule = NoiseSchedule::geometric(1.0, 0.1, 3).unwrap();
        for xi in [XI_DEFAULT, XI_FACES] {
            let cfg = SamplerConfig { xi, trace: true, ..SamplerConfig::default() };
            let r = run_chain(problem, &schedule, &cfg).unwrap();
            for t in r.trace.unwrap() {
                let lhs = t.gamma * t.likelihood_norm;
                let rhs = xi * t.prior_norm;
                assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1e-300));
            }
        }
    }

    #[test]
    fn mismatched_prior_dimension_is_an_error() {
        let (model, obs, _) = small_problem();
        let prior = GaussianPrior::isotropic(DVector::zeros(5), 1.0).unwrap();
        let problem = Problem { model: &model, obs: &obs, prior: &prior };
        let schedule = NoiseSchedule::geometric(1.0, 0.1, 3).unwrap();
        assert!(run_chain(problem, &schedule, &SamplerConfig::default()).is_err());
    }

    #[test]
    fn config_rejects_bad_values() {
        let bad = SamplerConfig { epsilon: 0.0, ..SamplerConfig::default() };
        assert!(bad.validate().is_err());
        let bad = SamplerConfig { k_inner: 0, ..SamplerConfig::default() };
        assert!(bad.validate().is_err());
        let parsed: SamplerConfig = serde_json::from_str(r#"{"algo": "baseline", "gamma_mode": "fixed_one"}"#).unwrap();
        assert_eq!(parsed.algo, Algorithm::Baseline);
        assert_eq!(parsed.epsilon, 0.002);
        assert!(serde_json::from_str::<SamplerConfig>(r#"{"epsilom": 1}"#).is_err());
        let partial: SamplerConfig = serde_json::from_str(r#"{"schedule": {"levels": 3}}"#).unwrap();
        assert_eq!(partial.schedule, ScheduleConfig { levels: 3, ..ScheduleConfig::default() });
    }
}
