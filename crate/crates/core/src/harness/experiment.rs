//! Experiment configuration, trial loop and report emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{self, ImageDims};
use super::oracle;
use crate::ep::Observations;
use crate::error::{QcsError, Result};
use crate::prior::{Prior, PriorConfig};
use crate::qmx;
use crate::quantizer::{QuantizerConfig, QuantizerSpec};
use crate::sampler::{self, Algorithm, Problem, SamplerConfig};
use crate::sensing::{EnsembleSpec, MeasurementModel};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mse,
    Psnr,
    Ssim,
}

fn default_metrics() -> Vec<Metric> {
    vec![Metric::Mse, Metric::Psnr]
}

fn default_algorithms() -> Vec<Algorithm> {
    vec![Algorithm::Plus, Algorithm::Baseline]
}

fn default_trials() -> usize {
    1
}

fn default_range() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub ensemble: EnsembleSpec,
    pub noise_std: f64,
    pub quantizer: QuantizerConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    pub prior: PriorConfig,
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Chains per trial; their average is the trial's estimate.
    #[serde(default = "default_trials")]
    pub chains: usize,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
    #[serde(default = "default_algorithms")]
    pub algorithms: Vec<Algorithm>,
    /// `[channels, height, width]`; required for SSIM.
    #[serde(default)]
    pub image_dims: Option<[usize; 3]>,
    #[serde(default = "default_range")]
    pub data_range: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| QcsError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| QcsError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.ensemble.validate().map_err(|e| QcsError::Config(e.to_string()))?;
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(QcsError::Config("noise_std must be finite and >= 0".into()));
        }
        self.sampler.validate()?;
        self.sampler.schedule.build().map_err(|e| QcsError::Config(e.to_string()))?;
        if self.trials == 0 || self.chains == 0 {
            return Err(QcsError::Config("trials and chains must be at least 1".into()));
        }
        let prior_dim = match &self.prior {
            PriorConfig::Gaussian { dim, .. } | PriorConfig::Gmm { dim, .. } | PriorConfig::Bridge { dim, .. } => *dim,
        };
        if prior_dim != self.ensemble.n {
            return Err(QcsError::Config(format!(
                "prior dimension {prior_dim} does not match ensemble n = {}",
                self.ensemble.n
            )));
        }
        if matches!(self.prior, PriorConfig::Bridge { .. }) {
            return Err(QcsError::Config(
                "experiments draw ground truth from the prior; use an analytic prior".into(),
            ));
        }
        if self.metrics.contains(&Metric::Ssim) {
            match self.image_dims {
                Some([c, h, w]) if c * h * w == self.ensemble.n => {}
                _ => return Err(QcsError::Config("ssim needs image_dims matching ensemble n".into())),
            }
        }
        if !(self.data_range > 0.0) {
            return Err(QcsError::Config("data_range must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgoOutcome {
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<Metric, f64>,
    pub ep_clamps: usize,
    /// RMS distance to the exact Gaussian posterior mean (Gaussian priors only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub posterior_gap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub saturation: f64,
    pub results: BTreeMap<Algorithm, AlgoOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std_error: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        let n = finite.len();
        if n == 0 {
            return None;
        }
        let mean = finite.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Summary {
            mean,
            std_error: sd / (n as f64).sqrt(),
            count: n,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_seconds: f64,
    pub trial_seconds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub name: String,
    pub config: ExperimentConfig,
    pub trials: Vec<TrialRecord>,
    pub summary: BTreeMap<Algorithm, BTreeMap<Metric, Summary>>,
    pub failed_trials: usize,
    pub timing: Timing,
}

impl MetricReport {
    pub fn summary_of(&self, algo: Algorithm, metric: Metric) -> Option<Summary> {
        self.summary.get(&algo).and_then(|m| m.get(&metric)).copied()
    }

    /// Per-trial values of one metric for one algorithm, skipping failures.
    pub fn values(&self, algo: Algorithm, metric: Metric) -> Vec<f64> {
        self.trials
            .iter()
            .filter_map(|t| t.results.get(&algo).and_then(|r| r.metrics.get(&metric)).copied())
            .collect()
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "experiment: {}  trials: {}", self.name, self.trials.len());
        let _ = writeln!(out, "{:<10} {:<6} {:>14} {:>12} {:>6}", "algo", "metric", "mean", "std_err", "n");
        for (algo, metrics) in &self.summary {
            for (metric, s) in metrics {
                let _ = writeln!(
                    out,
                    "{:<10} {:<6} {:>14.6} {:>12.6} {:>6}",
                    format!("{algo:?}").to_lowercase(),
                    format!("{metric:?}").to_lowercase(),
                    s.mean,
                    s.std_error,
                    s.count
                );
            }
        }
        let _ = writeln!(out, "failed trials: {}", self.failed_trials);
        let _ = writeln!(out, "runtime: {:.2} s", self.timing.total_seconds);
        out
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        fs::write(dir.join("report.txt"), self.table())?;
        Ok(())
    }
}

fn trial_seed(base: u64, trial: usize, salt: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((trial as u64) << 8)
        .wrapping_add(salt)
}

struct TrialOutput {
    record: TrialRecord,
    seconds: f64,
}

fn run_trial(
    cfg: &ExperimentConfig,
    model: &MeasurementModel,
    prior: &Prior,
    trial: usize,
    artifacts: Option<&Path>,
) -> TrialOutput {
    let start = Instant::now();
    let mut record = TrialRecord {
        trial,
        saturation: f64::NAN,
        results: BTreeMap::new(),
        error: None,
    };
    if let Err(e) = trial_body(cfg, model, prior, trial, artifacts, &mut record) {
        warn!("trial {trial} failed: {e}");
        record.error = Some(e.to_string());
    }
    TrialOutput {
        record,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn trial_body(
    cfg: &ExperimentConfig,
    model: &MeasurementModel,
    prior: &Prior,
    trial: usize,
    artifacts: Option<&Path>,
    record: &mut TrialRecord,
) -> Result<()> {
    let analytic = prior
        .as_analytic()
        .ok_or_else(|| QcsError::Config("ground truth needs an analytic prior".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(cfg.seed, trial, 1));
    let x_true = analytic.sample(&mut rng);
    let (quantizer, y, _) = model.simulate_with_config(&cfg.quantizer, &x_true, trial_seed(cfg.seed, trial, 2))?;
    record.saturation = quantizer.saturation();
    let obs = Observations::new(&quantizer, y.as_slice())?;
    let schedule = cfg.sampler.schedule.build()?;
    let exact_mean = match prior {
        Prior::Gaussian(g) => Some(linearized_posterior_mean(g, model, &quantizer, &y)?),
        _ => None,
    };
    if let Some(dir) = artifacts {
        qmx::save_vector(dir.join(format!("trial{trial:03}_x.qmx")), &x_true)?;
        qmx::save_vector(dir.join(format!("trial{trial:03}_y.qmx")), &y)?;
    }

    for &algo in &cfg.algorithms {
        let sampler_cfg = SamplerConfig {
            algo,
            seed: trial_seed(cfg.sampler.seed, trial, 3),
            ..cfg.sampler.clone()
        };
        let problem = Problem {
            model,
            obs: &obs,
            prior: prior.as_score(),
        };
        let chains = sampler::run_batch(problem, &schedule, &sampler_cfg, cfg.chains);
        let mut outcome = AlgoOutcome {
            metrics: BTreeMap::new(),
            ep_clamps: 0,
            posterior_gap: None,
            error: None,
        };
        let ok: Vec<_> = chains.iter().filter_map(|c| c.as_ref().ok()).collect();
        if let Some(Err(e)) = chains.iter().find(|c| c.is_err()) {
            outcome.error = Some(format!("{} of {} chains failed; first: {e}", chains.len() - ok.len(), chains.len()));
        }
        if ok.is_empty() {
            record.results.insert(algo, outcome);
            continue;
        }
        let x_hat = ok.iter().fold(DVector::zeros(model.n()), |acc, c| acc + &c.x_hat) / ok.len() as f64;
        outcome.ep_clamps = ok.iter().map(|c| c.ep_clamps()).sum();
        for &metric in &cfg.metrics {
            let value = match metric {
                Metric::Mse => metrics::mse(x_hat.as_slice(), x_true.as_slice())?,
                Metric::Psnr => metrics::psnr(x_hat.as_slice(), x_true.as_slice(), cfg.data_range)?,
                Metric::Ssim => {
                    let [channels, height, width] = cfg.image_dims.expect("validated");
                    let dims = ImageDims { channels, height, width };
                    metrics::ssim(x_hat.as_slice(), x_true.as_slice(), dims, cfg.data_range)?
                }
            };
            outcome.metrics.insert(metric, value);
        }
        if let Some(mean) = &exact_mean {
            outcome.posterior_gap = Some((&x_hat - mean).norm() / (model.n() as f64).sqrt());
        }
        if let Some(dir) = artifacts {
            let tag = format!("{algo:?}").to_lowercase();
            qmx::save_vector(dir.join(format!("trial{trial:03}_xhat_{tag}.qmx")), &x_hat)?;
        }
        record.results.insert(algo, outcome);
    }
    Ok(())
}

/// Gaussian posterior mean treating the codewords as linear measurements with
/// extra uniform quantization noise of variance `width^2 / 12`.
pub fn linearized_posterior_mean(
    prior: &crate::prior::GaussianPrior,
    model: &MeasurementModel,
    quantizer: &QuantizerSpec,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    let width = quantizer.bin_width();
    let noise_var = model.noise_std().powi(2) + width * width / 12.0;
    oracle::gaussian_linear_posterior(prior, model.matrix(), y, noise_var).map(|(m, _)| m)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricReport> {
    cfg.validate()?;
    let start = Instant::now();
    let model = MeasurementModel::generate(&cfg.ensemble, cfg.noise_std)?;
    let prior = Prior::build(&cfg.prior)?;
    let artifacts = cfg.output_dir.as_ref().map(|d| d.join("trials"));
    if let Some(dir) = &artifacts {
        fs::create_dir_all(dir)?;
    }
    info!("running {} trials of '{}'", cfg.trials, cfg.name);
    let outputs: Vec<TrialOutput> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| run_trial(cfg, &model, &prior, t, artifacts.as_deref()))
        .collect();

    let trials: Vec<TrialRecord> = outputs.iter().map(|o| o.record.clone()).collect();
    let failed_trials = trials
        .iter()
        .filter(|t| t.error.is_some() || t.results.values().any(|r| r.error.is_some()))
        .count();
    let mut report = MetricReport {
        schema_version: REPORT_SCHEMA_VERSION,
        name: cfg.name.clone(),
        config: cfg.clone(),
        trials,
        summary: BTreeMap::new(),
        failed_trials,
        timing: Timing {
            total_seconds: 0.0,
            trial_seconds: outputs.iter().map(|o| o.seconds).collect(),
        },
    };
    for &algo in &cfg.algorithms {
        let mut per_metric = BTreeMap::new();
        for &metric in &cfg.metrics {
            if let Some(s) = Summary::of(&report.values(algo, metric)) {
                per_metric.insert(metric, s);
            }
        }
        report.summary.insert(algo, per_metric);
    }
    report.timing.total_seconds = start.elapsed().as_secs_f64();
    if let Some(dir) = &cfg.output_dir {
        report.write(dir)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_config() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{
                "name": "smoke",
                "ensemble": {"kind": "ill_conditioned", "m": 8, "n": 8, "condition_number": 5.0, "seed": 3},
                "noise_std": 0.1,
                "quantizer": {"bits": 8, "auto_saturation_sigma_mult": 4.0},
                "sampler": {"gamma_mode": "fixed_one", "schedule": {"beta_max": 0.5, "beta_min": 0.05, "levels": 5}},
                "prior": {"kind": "gaussian", "dim": 8, "mean": 0.5, "variance": 0.2},
                "trials": 1
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn single_gaussian_trial_reports_finite_psnr_and_gap() {
        let report = run_experiment(&gaussian_config()).unwrap();
        assert_eq!(report.failed_trials, 0);
        for algo in [Algorithm::Plus, Algorithm::Baseline] {
            let r = &report.trials[0].results[&algo];
            assert!(r.metrics[&Metric::Psnr].is_finite());
            assert!(r.posterior_gap.unwrap().is_finite());
        }
    }

    #[test]
    fn reports_are_reproducible_apart_from_timing() {
        let cfg = gaussian_config();
        let mut a = run_experiment(&cfg).unwrap();
        let mut b = run_experiment(&cfg).unwrap();
        a.timing = b.timing.clone();
        b.timing = a.timing.clone();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn empty_metric_list_reports_runtime_only() {
        let mut cfg = gaussian_config();
        cfg.metrics.clear();
        let report = run_experiment(&cfg).unwrap();
        assert!(report.summary.values().all(|m| m.is_empty()));
        assert!(report.trials[0].results.values().all(|r| r.metrics.is_empty()));
        assert_eq!(report.timing.trial_seconds.len(), 1);
    }

    #[test]
    fn writes_json_and_table() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = gaussian_config();
        cfg.output_dir = Some(dir.path().to_path_buf());
        run_experiment(&cfg).unwrap();
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(json["schema_version"], 1);
        assert!(fs::read_to_string(dir.path().join("report.txt")).unwrap().contains("psnr"));
        assert!(dir.path().join("trials/trial000_xhat_plus.qmx").exists());
    }

    #[test]
    fn config_errors_are_reported() {
        let mut cfg = gaussian_config();
        cfg.metrics.push(Metric::Ssim);
        assert!(matches!(cfg.validate(), Err(QcsError::Config(_))));
        assert!(ExperimentConfig::from_json(r#"{"name": 1}"#).is_err());
    }

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[1.0, 2.0, 3.0, f64::INFINITY]).unwrap();
        assert_eq!(s.count, 3);
        assert!((s.mean - 2.0).abs() < 1e-15);
        assert!((s.std_error - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        assert!(Summary::of(&[]).is_none());
    }
}
