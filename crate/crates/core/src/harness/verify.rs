//! Seeded self-checks of the numerical kernels against the oracles.
//!
//! Each check returns a [`VerifyReport`]; the CLI maps a failed report to a
//! non-zero exit status.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::oracle;
use crate::ep::{self, EpConfig, Observations};
use crate::error::Result;
use crate::quantizer::{Interval, QuantizerSpec};
use crate::sensing::{EnsembleSpec, MeasurementModel};
use crate::trunc_gauss::{self, Precision, TiltedInputs};

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub check: String,
    pub passed: bool,
    pub max_error: f64,
    pub tolerance: f64,
    pub cases: usize,
    pub notes: Vec<String>,
}

impl VerifyReport {
    fn new(check: &str, tolerance: f64) -> Self {
        VerifyReport {
            check: check.to_string(),
            passed: true,
            max_error: 0.0,
            tolerance,
            cases: 0,
            notes: Vec::new(),
        }
    }

    /// Records one case whose error is measured in units where `tolerance`
    /// applies.
    fn record(&mut self, err: f64) {
        self.cases += 1;
        if err.is_nan() || err > self.max_error {
            self.max_error = err;
        }
        if !(err <= self.tolerance) {
            self.passed = false;
        }
    }

    fn note(&mut self, s: impl Into<String>) {
        self.notes.push(s.into());
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{}: {} (max error {:.3e}, tolerance {:.1e}, {} cases)",
            self.check,
            if self.passed { "PASS" } else { "FAIL" },
            self.max_error,
            self.tolerance,
            self.cases
        )?;
        for n in &self.notes {
            writeln!(f, "  {n}")?;
        }
        Ok(())
    }
}

fn normal_vec(n: usize, rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

fn random_interval(rng: &mut impl Rng) -> Interval {
    let lo: f64 = rng.random_range(-2.5..2.5);
    match rng.random_range(0..4) {
        0 => Interval::new(f64::NEG_INFINITY, lo),
        1 => Interval::new(lo, f64::INFINITY),
        _ => Interval::new(lo, lo + rng.random_range(0.1..2.0)),
    }
}

fn rel_diff(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs())
}

/// Tilted moments against quadrature and the score against finite
/// differences of the log-partition.
pub fn tilted_moments(cases: usize, m: usize, seed: u64) -> Result<VerifyReport> {
    let mut rep = VerifyReport::new("tilted-moments", 1e-8);
    let mut grad = VerifyReport::new("tilted-score", 1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cases {
        let z: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let h: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let tau: f64 = rng.random_range(0.2..10.0);
        let ivs: Vec<Interval> = (0..m).map(|_| random_interval(&mut rng)).collect();
        let inputs = TiltedInputs::new(&z, &h, Precision::Scalar(tau), &ivs)?;
        let t = trunc_gauss::moments(&inputs)?;
        for i in 0..m {
            // Density of the noise: N(h / tau, 1 / tau) restricted to [l - z, u - z).
            let shifted = Interval::new(ivs[i].lower - z[i], ivs[i].upper - z[i]);
            let (mean, var) = oracle::truncated_moments_quadrature(h[i] / tau, 1.0 / tau, shifted);
            let scale = (1.0 / tau).sqrt();
            rep.record((t.mean[i] - mean).abs() / scale.max(mean.abs()));
            rep.record(rel_diff(t.elem_var[i], var));
        }
        let step = 1e-5;
        for i in 0..m {
            let at = |dz: f64| -> Result<f64> {
                let mut zz = z.clone();
                zz[i] += dz;
                trunc_gauss::log_partition(&TiltedInputs::new(&zz, &h, Precision::Scalar(tau), &ivs)?)
            };
            let fd = (at(step)? - at(-step)?) / (2.0 * step);
            grad.record((fd - t.score[i]).abs() / t.score.amax().max(1e-12));
        }
    }
    rep.note(grad.to_string().trim_end());
    rep.passed &= grad.passed;
    Ok(rep)
}

/// Sign path against the general interval path.
pub fn one_bit_path(cases: usize, m: usize, seed: u64) -> Result<VerifyReport> {
    let mut rep = VerifyReport::new("one-bit-path", 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sign = QuantizerSpec::sign();
    for _ in 0..cases {
        let z: Vec<f64> = (0..m).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let h: Vec<f64> = (0..m).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let tau: f64 = 10f64.powf(rng.random_range(-2.0..2.0));
        let y: Vec<f64> = (0..m).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let ivs = sign.intervals_of(&y)?;
        let inputs = TiltedInputs::new(&z, &h, Precision::Scalar(tau), &ivs)?;
        let fast = trunc_gauss::moments_1bit(&inputs, &y)?;
        let general = trunc_gauss::moments(&inputs)?;
        for i in 0..m {
            // The tilted mean is h / tau plus a correction; compare on the
            // scale of the larger part so cancellation does not count.
            let scale = (h[i] / tau).abs().max(fast.mean[i].abs()).max(general.mean[i].abs());
            rep.record((fast.mean[i] - general.mean[i]).abs() / scale);
            rep.record(rel_diff(fast.elem_var[i], general.elem_var[i]));
            // Deep-tail scores underflow into subnormals on either path.
            let floor = tau.sqrt() * f64::MIN_POSITIVE;
            rep.record((fast.score[i] - general.score[i]).abs() / fast.score[i].abs().max(general.score[i].abs()).max(floor));
        }
        rep.record(rel_diff(fast.var, general.var));
        rep.record(rel_diff(fast.log_partition, general.log_partition));
    }
    Ok(rep)
}

/// SVD-basis Gaussian projection against explicit dense inverses.
pub fn svd_path(cases: usize, max_dim: usize, seed: u64) -> Result<VerifyReport> {
    let mut rep = VerifyReport::new("svd-path", 1e-10);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut tall, mut wide) = (0, 0);
    for c in 0..cases {
        let m = rng.random_range(1..=max_dim);
        let n = match c % 3 {
            0 => rng.random_range(1..=m),
            1 => rng.random_range(m..=max_dim),
            _ => rng.random_range(1..=max_dim),
        };
        tall += usize::from(m > n);
        wide += usize::from(m < n);
        let a = DMatrix::from_fn(m, n, |_, _| rng.sample(StandardNormal));
        let sigma = rng.random_range(0.01..1.0);
        let model = MeasurementModel::new(a, sigma)?;
        let beta = rng.random_range(0.0..2.0);
        let tau_g = if c % 5 == 0 { 0.0 } else { rng.random_range(0.0..5.0) };
        let h = normal_vec(m, &mut rng);
        let (fast, chi_fast) = ep::gaussian_projection(&model, beta, &h, tau_g)?;
        let (dense, chi_dense) = oracle::dense_projection(&model, beta, &h, tau_g)?;
        rep.record((&fast - &dense).amax() / dense.amax().max(1e-300));
        rep.record(rel_diff(chi_fast, chi_dense));
    }
    rep.note(format!("{tall} cases with M > N, {wide} with M < N"));
    Ok(rep)
}

/// Random quantized instance: measurements drawn from the perturbed model at
/// `z` so that every box has appreciable mass.
pub struct Instance {
    pub model: MeasurementModel,
    pub quantizer: QuantizerSpec,
    pub obs: Observations,
    pub z: DVector<f64>,
    pub beta: f64,
}

pub fn random_instance(m: usize, n: usize, bits: u32, kappa: f64, seed: u64) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = rng.random_range(0.05..0.5);
    let beta = rng.random_range(0.1..1.0);
    let model = MeasurementModel::generate(&EnsembleSpec::ill_conditioned(m, n, kappa, seed), sigma)?;
    let z = normal_vec(m, &mut rng);
    let root = model.gaussian_covariance_eigs(beta).map(f64::sqrt);
    let noise = model.svd_u() * normal_vec(m, &mut rng).component_mul(&root);
    let quantizer = QuantizerSpec::uniform(bits, 1.5)?;
    let y = quantizer.quantize((&z + noise).as_slice())?;
    let obs = Observations::new(&quantizer, &y)?;
    Ok(Instance {
        model,
        quantizer,
        obs,
        z,
        beta,
    })
}

/// Monte-Carlo hits below which a probe's standard error is not trusted.
pub const MIN_MC_HITS: f64 = 100.0;

/// EP evidence `P(z + n in box)` against Monte Carlo, in standard errors.
///
/// Probes whose box is too unlikely for `mc_samples` to resolve are redrawn;
/// the count of redraws is reported.
pub fn pseudolikelihood(
    bits: &[u32],
    kappas: &[f64],
    probes: usize,
    mc_samples: usize,
    ep_config: &EpConfig,
    seed: u64,
) -> Result<VerifyReport> {
    let mut rep = VerifyReport::new("pseudo-likelihood", 3.0);
    for &q in bits {
        for &kappa in kappas {
            let mut worst = 0.0f64;
            let mut fails = 0;
            let mut skipped = 0;
            let mut done = 0;
            let mut draw = 0u64;
            while done < probes {
                let s = seed.wrapping_add(1000 * u64::from(q)).wrapping_add(draw * 7919) ^ kappa.to_bits();
                draw += 1;
                if draw as usize > 20 * probes {
                    return Err(crate::error::QcsError::invalid(format!(
                        "only {done} of {probes} probes resolvable at Q={q}, kappa={kappa:e}"
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let m = rng.random_range(2..=8);
                let n = rng.random_range(m..=8);
                let inst = random_instance(m, n, q, kappa, s)?;
                let mc = oracle::mc_pseudolikelihood(&inst.model, inst.beta, &inst.z, &inst.obs, mc_samples, s)?;
                if mc.estimate * (mc.samples as f64) < MIN_MC_HITS {
                    skipped += 1;
                    continue;
                }
                done += 1;
                let state = ep::ep_fixed_point(&inst.model, inst.beta, &inst.z, &inst.obs, ep_config)?;
                let log_ep = ep::ep_log_evidence(&inst.model, inst.beta, &state)?;
                let z_score = (log_ep.exp() - mc.estimate).abs() / mc.std_error;
                worst = worst.max(z_score);
                fails += usize::from(!(z_score <= 3.0));
                rep.record(z_score);
            }
            rep.note(format!(
                "Q={q} kappa={kappa:e}: worst {worst:.2} SE, {fails}/{probes} probes beyond 3 SE, \
                 {skipped} redrawn with under {MIN_MC_HITS} MC hits"
            ));
        }
    }
    Ok(rep)
}

/// EP tilted moments against Monte-Carlo posterior moments of the noise.
pub fn ep_posterior(m: usize, n: usize, bits: u32, kappa: f64, mc_samples: usize, seed: u64) -> Result<VerifyReport> {
    let mut rep = VerifyReport::new("ep-posterior", 3.0);
    let inst = random_instance(m, n, bits, kappa, seed)?;
    let cfg = EpConfig { iter_ep: 50, ..EpConfig::default() };
    let state = ep::ep_fixed_point(&inst.model, inst.beta, &inst.z, &inst.obs, &cfg)?;
    let mc = mc_posterior_moments(&inst, mc_samples, seed)?;
    for i in 0..m {
        rep.record((state.m_a[i] - mc.mean[i]).abs() / mc.mean_se[i]);
    }
    let var_rel = rel_diff(state.chi_a, mc.avg_var);
    rep.note(format!("mean residuals in MC standard errors, {} accepted samples", mc.accepted));
    rep.note(format!(
        "chi_a {:.6} vs MC average variance {:.6}: {:.2}% (limit 5%)",
        state.chi_a,
        mc.avg_var,
        100.0 * var_rel
    ));
    rep.note(format!(
        "|m_a - m_b| {:.2e}, |chi_a - chi_b| {:.2e}, clamps {}",
        state.mean_residual(),
        state.var_residual(),
        state.clamp_count
    ));
    if !(var_rel <= 0.05) {
        rep.passed = false;
    }
    let log_ep = ep::ep_log_evidence(&inst.model, inst.beta, &state)?;
    rep.note(format!(
        "evidence: EP {:.6e}, MC {:.6e} +- {:.1e}",
        log_ep.exp(),
        mc.evidence,
        (mc.evidence * (1.0 - mc.evidence) / mc_samples as f64).sqrt()
    ));
    Ok(rep)
}

pub struct McMoments {
    pub mean: DVector<f64>,
    pub mean_se: DVector<f64>,
    pub avg_var: f64,
    pub accepted: usize,
    pub evidence: f64,
}

/// Rejection sampling of the noise posterior `N(0, C^{-1})` restricted to
/// the box.
pub fn mc_posterior_moments(inst: &Instance, samples: usize, seed: u64) -> Result<McMoments> {
    let m = inst.model.m();
    let root = inst.model.gaussian_covariance_eigs(inst.beta).map(f64::sqrt);
    let factor = inst.model.svd_u() * DMatrix::from_diagonal(&root);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut sum = DVector::zeros(m);
    let mut sum_sq = DVector::zeros(m);
    let mut accepted = 0usize;
    let ivs = inst.obs.intervals();
    let mut n = DVector::zeros(m);
    for _ in 0..samples {
        let w = normal_vec(m, &mut rng);
        n.gemv(1.0, &factor, &w, 0.0);
        if ivs.iter().enumerate().all(|(i, iv)| iv.contains(inst.z[i] + n[i])) {
            accepted += 1;
            sum += &n;
            sum_sq += n.component_mul(&n);
        }
    }
    let k = accepted.max(1) as f64;
    let mean = &sum / k;
    let var = &sum_sq / k - mean.component_mul(&mean);
    Ok(McMoments {
        mean_se: var.map(|v| (v.max(0.0) / k).sqrt()),
        avg_var: var.mean(),
        mean,
        accepted,
        evidence: accepted as f64 / samples as f64,
    })
}

/// Likelihood score against finite differences of the frozen closed-form
/// log-likelihood.
pub fn gradients(probes: usize, m: usize, n: usize, seed: u64) -> Result<VerifyReport> {
    let mut rep = VerifyReport::new("gradients", 1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EpConfig::default();
    for p in 0..probes {
        let bits = [1, 2, 3][p % 3];
        let kappa = [1.0, 30.0, 1e3][p % 3];
        let model = MeasurementModel::generate(&EnsembleSpec::ill_conditioned(m, n, kappa, seed + p as u64), 0.1)?;
        let quantizer = QuantizerSpec::uniform(bits, 2.0)?;
        let x_true = normal_vec(n, &mut rng);
        let (y, _) = model.simulate(&quantizer, &x_true, seed + p as u64)?;
        let obs = Observations::new(&quantizer, y.as_slice())?;
        let beta = rng.random_range(0.05..1.0);
        let x = &x_true + normal_vec(n, &mut rng) * beta;
        let (_, state) = ep::likelihood_score(&model, beta, &x, &obs, &cfg)?;
        let f = |v: &DVector<f64>| ep::frozen_log_likelihood(&model, v, &obs, &state.h_f, state.tau_f);
        let g = |v: &DVector<f64>| ep::frozen_score(&model, v, &obs, &state.h_f, state.tau_f);
        let fd = oracle::finite_diff_check(&f, &g, std::slice::from_ref(&x), 1e-5, rep.tolerance)?;
        rep.record(fd.max_rel_error);
    }
    Ok(rep)
}

/// EP likelihood score against the diagonal baseline on row-orthogonal
/// matrices, where the two coincide.
pub fn reduction(instances: usize, seed: u64) -> Result<VerifyReport> {
    let mut rep = VerifyReport::new("reduction", 1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..instances {
        let m = rng.random_range(2..=16);
        let n = rng.random_range(m..=24);
        let model = MeasurementModel::generate(&EnsembleSpec::row_orthogonal(m, n, seed + i as u64), 0.1)?;
        let quantizer = QuantizerSpec::uniform([1, 2, 3][i % 3], 2.0)?;
        let x = normal_vec(n, &mut rng);
        let (y, _) = model.simulate(&quantizer, &x, seed + i as u64)?;
        let obs = Observations::new(&quantizer, y.as_slice())?;
        for beta in [1.0, 0.3, 0.05] {
            let probe = &x + normal_vec(n, &mut rng) * beta;
            let (plus, _) = ep::likelihood_score(&model, beta, &probe, &obs, &EpConfig::default())?;
            let base = ep::diagonal_baseline_score(&model, beta, &probe, &obs)?;
            rep.record((plus - base).amax());
        }
    }
    Ok(rep)
}

/// `|chi_a - chi_b|` after the configured number of EP cycles on `M = N`
/// instances, at measurements simulated from a Gaussian signal and iterates
/// perturbed at each noise level.
pub fn ep_convergence(
    dim: usize,
    kappa: f64,
    tolerance: f64,
    instances: usize,
    ep_config: &EpConfig,
    seed: u64,
) -> Result<VerifyReport> {
    let mut rep = VerifyReport::new(&format!("ep-convergence kappa={kappa:e}"), tolerance);
    let mut clamps = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..instances {
        let model = MeasurementModel::generate(&EnsembleSpec::ill_conditioned(dim, dim, kappa, seed + i as u64), 0.1)?;
        let quantizer = QuantizerSpec::uniform([1, 2, 3][i % 3], 2.0)?;
        let x = normal_vec(dim, &mut rng);
        let (y, _) = model.simulate(&quantizer, &x, seed + i as u64)?;
        let obs = Observations::new(&quantizer, y.as_slice())?;
        for beta in [1.0, 0.3, 0.1, 0.05] {
            let z = model.forward(&(&x + normal_vec(dim, &mut rng) * beta))?;
            let state = ep::ep_fixed_point(&model, beta, &z, &obs, ep_config)?;
            clamps += state.clamp_count;
            rep.record(state.var_residual());
        }
    }
    rep.note(format!("clamp count {clamps}"));
    Ok(rep)
}
