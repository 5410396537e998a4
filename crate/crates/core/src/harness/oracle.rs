//! Independent reference computations used to check the fast paths.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{ensure_len, QcsError, Result};
use crate::ep::Observations;
use crate::prior::GaussianPrior;
use crate::quantizer::Interval;
use crate::sensing::MeasurementModel;

/// Largest `M` the Monte-Carlo oracle accepts.
pub const MC_MAX_M: usize = 12;
const MC_CHUNK: usize = 1 << 14;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Monte-Carlo estimate of `P(z + n in box)` with
/// `n ~ N(0, sigma^2 I + beta^2 A A^T)`, sampled through the SVD of `A`.
pub fn mc_pseudolikelihood(
    model: &MeasurementModel,
    beta: f64,
    z: &DVector<f64>,
    obs: &Observations,
    n_samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    let m = model.m();
    if m > MC_MAX_M {
        return Err(QcsError::invalid(format!("oracle supports M <= {MC_MAX_M}, got {m}")));
    }
    if n_samples < 10_000 {
        return Err(QcsError::invalid("oracle needs at least 1e4 samples"));
    }
    ensure_len("oracle z", m, z.len())?;
    ensure_len("oracle observations", m, obs.len())?;
    let root = model.gaussian_covariance_eigs(beta).map(f64::sqrt);
    let factor = model.svd_u() * DMatrix::from_diagonal(&root);
    let intervals = obs.intervals();

    let chunks = n_samples.div_ceil(MC_CHUNK);
    let hits: usize = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let count = MC_CHUNK.min(n_samples - c * MC_CHUNK);
            let mut w = DVector::zeros(m);
            let mut n = DVector::zeros(m);
            let mut hits = 0;
            for _ in 0..count {
                w.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
                n.gemv(1.0, &factor, &w, 0.0);
                if intervals.iter().enumerate().all(|(i, iv)| iv.contains(z[i] + n[i])) {
                    hits += 1;
                }
            }
            hits
        })
        .sum();
    let p = hits as f64 / n_samples as f64;
    Ok(McEstimate {
        estimate: p,
        std_error: (p * (1.0 - p) / n_samples as f64).sqrt(),
        samples: n_samples,
    })
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64, fm: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson(f, a, fa, m, fm, flm, left, 0.5 * tol, depth - 1) + simpson(f, m, fm, b, fb, frm, right, 0.5 * tol, depth - 1)
}

/// Adaptive Simpson quadrature on a finite interval.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    // Split first so narrow features are not skipped by the initial stencil.
    const PIECES: usize = 16;
    let h = (b - a) / PIECES as f64;
    (0..PIECES)
        .map(|i| {
            let (lo, hi) = (a + i as f64 * h, a + (i + 1) as f64 * h);
            let (flo, fhi, fmid) = (f(lo), f(hi), f(0.5 * (lo + hi)));
            let whole = (hi - lo) / 6.0 * (flo + 4.0 * fmid + fhi);
            simpson(f, lo, flo, hi, fhi, fmid, whole, tol / PIECES as f64, 40)
        })
        .sum()
}

/// Mean and variance of `N(mu, var)` restricted to `iv`, by quadrature.
pub fn truncated_moments_quadrature(mu: f64, var: f64, iv: Interval) -> (f64, f64) {
    let sd = var.sqrt();
    let lo = iv.lower.max(mu - 40.0 * sd);
    let hi = iv.upper.min(mu + 40.0 * sd);
    // Work relative to the most probable point of the interval.
    let anchor = mu.clamp(lo, hi);
    let shape = |x: f64| (-((x - mu).powi(2) - (anchor - mu).powi(2)) / (2.0 * var)).exp();
    let (a, b) = (lo, hi);
    let tol = 1e-14;
    let z = integrate(&shape, a, b, tol);
    let mean = integrate(&|x| (x - anchor) * shape(x), a, b, tol) / z + anchor;
    let second = integrate(&|x| (x - mean).powi(2) * shape(x), a, b, tol) / z;
    (mean, second)
}

/// Central-difference comparison of a gradient against its scalar field.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub probes: usize,
    pub max_rel_error: f64,
    pub worst_probe: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Relative error per probe is `max_i |fd_i - g_i| / max(|g|_inf, 1e-12)`.
pub fn finite_diff_check(
    f: &dyn Fn(&DVector<f64>) -> Result<f64>,
    grad: &dyn Fn(&DVector<f64>) -> Result<DVector<f64>>,
    probes: &[DVector<f64>],
    step: f64,
    tol: f64,
) -> Result<FdReport> {
    let mut worst = (0.0f64, 0usize);
    for (p, x) in probes.iter().enumerate() {
        let g = grad(x)?;
        ensure_len("finite-difference gradient", x.len(), g.len())?;
        let mut err = 0.0f64;
        for i in 0..x.len() {
            let mut up = x.clone();
            let mut down = x.clone();
            up[i] += step;
            down[i] -= step;
            let fd = (f(&up)? - f(&down)?) / (2.0 * step);
            err = err.max((fd - g[i]).abs());
        }
        let rel = err / g.amax().max(1e-12);
        if rel.is_nan() || rel > worst.0 {
            worst = (rel, p);
        }
    }
    Ok(FdReport {
        probes: probes.len(),
        max_rel_error: worst.0,
        worst_probe: worst.1,
        tolerance: tol,
        passed: worst.0 <= tol,
    })
}

/// `(tau_g I + C)^{-1} h_g` and its normalized trace with explicit inverses.
pub fn dense_projection(model: &MeasurementModel, beta: f64, h_g: &DVector<f64>, tau_g: f64) -> Result<(DVector<f64>, f64)> {
    let m = model.m();
    let a = model.matrix();
    let cov = DMatrix::identity(m, m) * model.noise_std().powi(2) + a * a.transpose() * (beta * beta);
    // (tau_g I + cov^{-1})^{-1} = cov (tau_g cov + I)^{-1}, valid for singular cov too.
    let inner = (&cov * tau_g + DMatrix::identity(m, m))
        .try_inverse()
        .ok_or_else(|| QcsError::NonFinite("dense projection inverse".into()))?;
    let inv = &cov * inner;
    Ok((&inv * h_g, inv.trace() / m as f64))
}

/// Posterior `N(mean, cov)` of `x ~ N(mu_0, Sigma_0)` given
/// `y = A x + e`, `e ~ N(0, noise_var I)`.
pub fn gaussian_linear_posterior(
    prior: &GaussianPrior,
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    noise_var: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (m, n) = a.shape();
    ensure_len("posterior y", m, y.len())?;
    ensure_len("posterior prior", n, prior.mean().len())?;
    let sigma0 = prior.covariance();
    let gain_inner = (a * &sigma0 * a.transpose() + DMatrix::identity(m, m) * noise_var)
        .cholesky()
        .ok_or_else(|| QcsError::NonFinite("posterior innovation covariance".into()))?;
    let cross = &sigma0 * a.transpose();
    let resid = y - a * prior.mean();
    let mean = prior.mean() + &cross * gain_inner.solve(&resid);
    let cov = &sigma0 - &cross * gain_inner.solve(&cross.transpose());
    Ok((mean, cov))
}
