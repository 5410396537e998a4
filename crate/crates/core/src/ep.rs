//! Expectation propagation for the quantized pseudo-likelihood.
//!
//! The posterior over the effective noise `n ~ N(0, C^{-1})`,
//! `C^{-1} = sigma^2 I + beta^2 A A^T`, restricted to the quantization box is
//! approximated by two scalar-precision Gaussian messages: `(h_f, tau_f)`
//! towards the box factor and `(h_g, tau_g)` towards the correlated Gaussian.
//! Each cycle matches the tilted box moments, then the Gaussian moments,
//! which in the SVD basis of `A` are diagonal.
//!
//! The likelihood score is `A^T g` with `g` the per-measurement score of the
//! box factor at the final `(h_f, tau_f)`, held fixed.

use log::trace;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, QcsError, Result};
use crate::quantizer::{Interval, QuantizerSpec};
use crate::sensing::MeasurementModel;
use crate::trunc_gauss::{self, Precision, TiltedInputs, TiltedMoments};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpInit {
    /// `h_f = 0`, `tau_f = 1 / mean(eig C^{-1})`, `h_g = 0`, `tau_g = 0`.
    #[default]
    DiagonalPrior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpConfig {
    pub iter_ep: usize,
    pub tau_floor: f64,
    /// Weight kept from the previous natural parameters; 0 is undamped.
    pub damping: f64,
    pub init_mode: EpInit,
    /// Start each Langevin step from the previous step's messages.
    pub warm_start: bool,
}

impl Default for EpConfig {
    fn default() -> Self {
        EpConfig {
            iter_ep: 5,
            tau_floor: 1e-10,
            damping: 0.0,
            init_mode: EpInit::DiagonalPrior,
            warm_start: false,
        }
    }
}

impl EpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iter_ep == 0 {
            return Err(QcsError::Config("ep.iter_ep must be at least 1".into()));
        }
        if !(self.tau_floor > 0.0) || !self.tau_floor.is_finite() {
            return Err(QcsError::Config("ep.tau_floor must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.damping) {
            return Err(QcsError::Config("ep.damping must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Observed codewords together with their quantization intervals.
#[derive(Debug, Clone)]
pub struct Observations {
    y: Vec<f64>,
    intervals: Vec<Interval>,
    one_bit: bool,
}

impl Observations {
    pub fn new(quantizer: &QuantizerSpec, y: &[f64]) -> Result<Self> {
        Ok(Observations {
            y: y.to_vec(),
            intervals: quantizer.intervals_of(y)?,
            one_bit: quantizer.bits() == 1,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }

    pub fn is_one_bit(&self) -> bool {
        self.one_bit
    }

    /// Tilted moments at `(z, h, tau)`, through the sign path when possible.
    pub fn tilted(&self, z: &[f64], h: &[f64], tau: Precision<'_>) -> Result<TiltedMoments> {
        let inputs = TiltedInputs::new(z, h, tau, &self.intervals)?;
        if self.one_bit {
            trunc_gauss::moments_1bit(&inputs, &self.y)
        } else {
            trunc_gauss::moments(&inputs)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpState {
    pub h_f: DVector<f64>,
    pub tau_f: f64,
    pub h_g: DVector<f64>,
    pub tau_g: f64,
    /// Tilted moments at the final `(h_f, tau_f)`.
    pub m_a: DVector<f64>,
    pub chi_a: f64,
    /// Gaussian-side moments from the last cycle.
    pub m_b: DVector<f64>,
    pub chi_b: f64,
    /// Moments of the combined message `(h_f + h_g) / (tau_f + tau_g)`.
    pub m_c: DVector<f64>,
    pub chi_c: f64,
    /// Per-measurement score of the box factor at the final messages.
    pub score: DVector<f64>,
    /// Sum of the log box masses at the final messages.
    pub log_partition: f64,
    pub iters_run: usize,
    pub clamp_count: usize,
}

impl EpState {
    /// `max |m_a - m_b|`.
    pub fn mean_residual(&self) -> f64 {
        (&self.m_a - &self.m_b).amax()
    }

    /// `|chi_a - chi_b|`.
    pub fn var_residual(&self) -> f64 {
        (self.chi_a - self.chi_b).abs()
    }
}

/// `(tau_g I + C)^{-1} h_g` and `tr[(tau_g I + C)^{-1}] / M`, with `C` the
/// precision of the perturbed noise, computed in the cached SVD basis.
pub fn gaussian_projection(
    model: &MeasurementModel,
    beta: f64,
    h_g: &DVector<f64>,
    tau_g: f64,
) -> Result<(DVector<f64>, f64)> {
    ensure_len("gaussian projection h_g", model.m(), h_g.len())?;
    if !(tau_g >= 0.0) {
        return Err(QcsError::invalid(format!("tau_g must be >= 0, got {tau_g}")));
    }
    let d = projection_weights(model, beta, tau_g);
    let u = model.svd_u();
    let mut coef = u.tr_mul(h_g);
    coef.component_mul_assign(&d);
    Ok((u * coef, d.mean()))
}

fn projection_weights(model: &MeasurementModel, beta: f64, tau_g: f64) -> DVector<f64> {
    model.gaussian_covariance_eigs(beta).map(|e| e / (tau_g * e + 1.0))
}

fn initial_tau_f(model: &MeasurementModel, beta: f64) -> Result<f64> {
    let mean_eig = model.gaussian_covariance_eigs(beta).mean();
    if !(mean_eig > 0.0) || !mean_eig.is_finite() {
        return Err(QcsError::invalid(format!(
            "perturbed noise covariance is degenerate at beta = {beta} (sigma = {})",
            model.noise_std()
        )));
    }
    Ok(1.0 / mean_eig)
}

fn clamp(value: f64, floor: f64, count: &mut usize) -> f64 {
    if value < floor || value.is_nan() {
        *count += 1;
        floor
    } else {
        value
    }
}

fn blend(damping: f64, new: f64, old: f64) -> f64 {
    if damping == 0.0 {
        new
    } else {
        (1.0 - damping) * new + damping * old
    }
}

fn blend_vec(damping: f64, new: DVector<f64>, old: &DVector<f64>) -> DVector<f64> {
    if damping == 0.0 {
        new
    } else {
        new * (1.0 - damping) + old * damping
    }
}

/// Runs `config.iter_ep` EP cycles at `z = A x`.
pub fn ep_fixed_point(
    model: &MeasurementModel,
    beta: f64,
    z: &DVector<f64>,
    obs: &Observations,
    config: &EpConfig,
) -> Result<EpState> {
    ep_fixed_point_from(model, beta, z, obs, config, None)
}

/// As [`ep_fixed_point`], optionally starting from earlier messages.
pub fn ep_fixed_point_from(
    model: &MeasurementModel,
    beta: f64,
    z: &DVector<f64>,
    obs: &Observations,
    config: &EpConfig,
    start: Option<&EpState>,
) -> Result<EpState> {
    config.validate()?;
    let m = model.m();
    ensure_len("ep z", m, z.len())?;
    ensure_len("ep observations", m, obs.len())?;

    let (mut h_f, mut tau_f, mut h_g, mut tau_g) = match start {
        Some(s) if s.h_f.len() == m => (s.h_f.clone(), s.tau_f, s.h_g.clone(), s.tau_g),
        _ => match config.init_mode {
            EpInit::DiagonalPrior => (DVector::zeros(m), initial_tau_f(model, beta)?, DVector::zeros(m), 0.0),
        },
    };
    let mut clamp_count = 0;
    let mut m_b = DVector::zeros(m);
    let mut chi_b = 0.0;
    let d = config.damping;

    for it in 0..config.iter_ep {
        let tilted = obs.tilted(z.as_slice(), h_f.as_slice(), Precision::Scalar(tau_f))?;
        let new_h_g = &tilted.mean / tilted.var - &h_f;
        let new_tau_g = 1.0 / tilted.var - tau_f;
        h_g = blend_vec(d, new_h_g, &h_g);
        tau_g = clamp(blend(d, new_tau_g, tau_g), config.tau_floor, &mut clamp_count);

        (m_b, chi_b) = gaussian_projection(model, beta, &h_g, tau_g)?;
        let new_h_f = &m_b / chi_b - &h_g;
        let new_tau_f = 1.0 / chi_b - tau_g;
        h_f = blend_vec(d, new_h_f, &h_f);
        tau_f = clamp(blend(d, new_tau_f, tau_f), config.tau_floor, &mut clamp_count);
        trace!("ep iter {it}: chi_a {} chi_b {chi_b} tau_f {tau_f} tau_g {tau_g}", tilted.var);
    }

    if h_f.iter().chain(h_g.iter()).any(|v| !v.is_finite()) || !tau_f.is_finite() || !tau_g.is_finite() {
        return Err(QcsError::NonFinite(format!("ep messages at beta = {beta}")));
    }
    let last = obs.tilted(z.as_slice(), h_f.as_slice(), Precision::Scalar(tau_f))?;
    let tau_c = tau_f + tau_g;
    Ok(EpState {
        m_c: (&h_f + &h_g) / tau_c,
        chi_c: 1.0 / tau_c,
        h_f,
        tau_f,
        h_g,
        tau_g,
        m_a: last.mean,
        chi_a: last.var,
        m_b,
        chi_b,
        score: last.score,
        log_partition: last.log_partition,
        iters_run: config.iter_ep,
        clamp_count,
    })
}

/// `grad_x log p(y | x)` through EP; the messages are treated as constants.
pub fn likelihood_score(
    model: &MeasurementModel,
    beta: f64,
    x: &DVector<f64>,
    obs: &Observations,
    config: &EpConfig,
) -> Result<(DVector<f64>, EpState)> {
    likelihood_score_from(model, beta, x, obs, config, None)
}

pub fn likelihood_score_from(
    model: &MeasurementModel,
    beta: f64,
    x: &DVector<f64>,
    obs: &Observations,
    config: &EpConfig,
    start: Option<&EpState>,
) -> Result<(DVector<f64>, EpState)> {
    let z = model.forward(x)?;
    let state = ep_fixed_point_from(model, beta, &z, obs, config, start)?;
    let grad = model.adjoint(&state.score)?;
    Ok((grad, state))
}

/// Per-measurement precisions `1 / (sigma^2 + beta^2 |a_m|^2)` of the
/// diagonal approximation.
pub fn diagonal_precisions(model: &MeasurementModel, beta: f64) -> Result<DVector<f64>> {
    let var = model.noise_std() * model.noise_std();
    let b2 = beta * beta;
    let tau = model.row_norms_sq().map(|r| 1.0 / (var + b2 * r));
    if tau.iter().any(|t| !t.is_finite()) {
        return Err(QcsError::invalid(format!(
            "zero effective noise for a measurement at beta = {beta}"
        )));
    }
    Ok(tau)
}

/// Likelihood score keeping only the diagonal of the perturbed noise
/// covariance, without EP.
pub fn diagonal_baseline_score(
    model: &MeasurementModel,
    beta: f64,
    x: &DVector<f64>,
    obs: &Observations,
) -> Result<DVector<f64>> {
    ensure_len("baseline observations", model.m(), obs.len())?;
    let z = model.forward(x)?;
    let tau = diagonal_precisions(model, beta)?;
    let h = vec![0.0; model.m()];
    let tilted = obs.tilted(z.as_slice(), &h, Precision::PerElement(tau.as_slice()))?;
    model.adjoint(&tilted.score)
}

/// `sum_m log Z_m(A x)` with fixed messages; its gradient in `x` is the
/// likelihood score.
pub fn frozen_log_likelihood(
    model: &MeasurementModel,
    x: &DVector<f64>,
    obs: &Observations,
    h_f: &DVector<f64>,
    tau_f: f64,
) -> Result<f64> {
    let z = model.forward(x)?;
    Ok(obs.tilted(z.as_slice(), h_f.as_slice(), Precision::Scalar(tau_f))?.log_partition)
}

/// Gradient companion of [`frozen_log_likelihood`].
pub fn frozen_score(
    model: &MeasurementModel,
    x: &DVector<f64>,
    obs: &Observations,
    h_f: &DVector<f64>,
    tau_f: f64,
) -> Result<DVector<f64>> {
    let z = model.forward(x)?;
    let t = obs.tilted(z.as_slice(), h_f.as_slice(), Precision::Scalar(tau_f))?;
    model.adjoint(&t.score)
}

/// EP estimate of `log P(z + n in box)`, `n ~ N(0, sigma^2 I + beta^2 A A^T)`:
/// the box masses plus the normalizer of the Gaussian factor minus the
/// overlap of the two messages.
pub fn ep_log_evidence(model: &MeasurementModel, beta: f64, state: &EpState) -> Result<f64> {
    let m = model.m();
    ensure_len("evidence messages", m, state.h_g.len())?;
    let (tg, tf) = (state.tau_g, state.tau_f);
    let mu_g = &state.h_g / tg;
    let var_g = 1.0 / tg;

    // log N(mu_g; 0, C^{-1} + I / tau_g) in the SVD basis.
    let eig = model.gaussian_covariance_eigs(beta);
    let proj = model.svd_u().tr_mul(&mu_g);
    let log_b: f64 = -0.5
        * proj
            .iter()
            .zip(eig.iter())
            .map(|(p, e)| {
                let v = e + var_g;
                p * p / v + v.ln() + LN_2PI
            })
            .sum::<f64>();

    // prod_m N(mu_g,m; h_f,m / tau_f, 1 / tau_g + 1 / tau_f).
    let v = var_g + 1.0 / tf;
    let log_c: f64 = -0.5
        * mu_g
            .iter()
            .zip(state.h_f.iter())
            .map(|(g, h)| {
                let r = g - h / tf;
                r * r / v + v.ln() + LN_2PI
            })
            .sum::<f64>();

    let out = state.log_partition + log_b - log_c;
    if !out.is_finite() {
        return Err(QcsError::NonFinite("ep log evidence".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensing::EnsembleSpec;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian_vec(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
    }

    fn dense_projection(model: &MeasurementModel, beta: f64, h_g: &DVector<f64>, tau_g: f64) -> (DVector<f64>, f64) {
        let m = model.m();
        let a = model.matrix();
        let cov = DMatrix::identity(m, m) * model.noise_std().powi(2) + a * a.transpose() * beta * beta;
        let prec = cov.try_inverse().unwrap();
        let inv = (DMatrix::identity(m, m) * tau_g + prec).try_inverse().unwrap();
        (&inv * h_g, inv.trace() / m as f64)
    }

    #[test]
    fn identity_projection_example() {
        let model = MeasurementModel::new(DMatrix::identity(3, 3), 0.0).unwrap();
        let h = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let (mb, chib) = gaussian_projection(&model, 1.0, &h, 1.0).unwrap();
        assert!((chib - 0.5).abs() < 1e-15);
        assert!((mb - &h / 2.0).amax() < 1e-15);
    }

    #[test]
    fn zero_tau_g_projection_is_covariance_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = DMatrix::from_fn(4, 6, |_, _| rng.sample(StandardNormal));
        let model = MeasurementModel::new(a.clone(), 0.3).unwrap();
        let h = gaussian_vec(4, &mut rng);
        let (mb, _) = gaussian_projection(&model, 0.7, &h, 0.0).unwrap();
        let want = (DMatrix::identity(4, 4) * 0.09 + &a * a.transpose() * 0.49) * &h;
        assert!((mb - &want).amax() < 1e-12 * want.amax());
    }

    #[test]
    fn projection_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (m, n) in [(6, 4), (4, 6), (5, 5)] {
            let a = DMatrix::from_fn(m, n, |_, _| rng.sample(StandardNormal));
            let model = MeasurementModel::new(a, 0.2).unwrap();
            let h = gaussian_vec(m, &mut rng);
            let (mb, chib) = gaussian_projection(&model, 0.8, &h, 1.7).unwrap();
            let (md, chid) = dense_projection(&model, 0.8, &h, 1.7);
            assert!((&mb - &md).amax() <= 1e-10 * md.amax());
            assert!((chib - chid).abs() <= 1e-10 * chid);
        }
    }

    #[test]
    fn row_orthogonal_state_is_immediately_fixed() {
        let model = MeasurementModel::generate(&EnsembleSpec::row_orthogonal(6, 10, 4), 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = gaussian_vec(6, &mut rng);
        let obs = Observations::new(&QuantizerSpec::sign(), &[1.0, -1.0, 1.0, 1.0, -1.0, -1.0]).unwrap();
        let beta = 0.6;
        let c = 10.0 / 6.0;
        let want = 1.0 / (0.01 + beta * beta * c);
        for iters in [1, 5] {
            let cfg = EpConfig { iter_ep: iters, ..EpConfig::default() };
            let s = ep_fixed_point(&model, beta, &z, &obs, &cfg).unwrap();
            assert!((s.tau_f - want).abs() < 1e-9 * want);
            assert!(s.h_f.amax() < 1e-9);
            assert!(s.var_residual() < 1e-12);
            assert_eq!(s.clamp_count, 0);
        }
    }

    #[test]
    fn baseline_uses_noise_precision_at_zero_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = DMatrix::from_fn(3, 3, |_, _| rng.sample(StandardNormal));
        let model = MeasurementModel::new(a, 0.5).unwrap();
        assert!(diagonal_precisions(&model, 0.0).unwrap().iter().all(|t| (*t - 4.0).abs() < 1e-15));
    }

    #[test]
    fn frozen_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = MeasurementModel::generate(&EnsembleSpec::ill_conditioned(8, 8, 100.0, 3), 0.1).unwrap();
        let q = QuantizerSpec::uniform(2, 1.5).unwrap();
        let x = gaussian_vec(8, &mut rng) * 0.5;
        let (y, _) = model.simulate(&q, &x, 4).unwrap();
        let obs = Observations::new(&q, y.as_slice()).unwrap();
        let probe = gaussian_vec(8, &mut rng) * 0.5;
        let (grad, s) = likelihood_score(&model, 0.4, &probe, &obs, &EpConfig::default()).unwrap();
        let step = 1e-5;
        for i in 0..8 {
            let mut p = probe.clone();
            let mut mn = probe.clone();
            p[i] += step;
            mn[i] -= step;
            let fd = (frozen_log_likelihood(&model, &p, &obs, &s.h_f, s.tau_f).unwrap()
                - frozen_log_likelihood(&model, &mn, &obs, &s.h_f, s.tau_f).unwrap())
                / (2.0 * step);
            assert!((fd - grad[i]).abs() <= 1e-6 * grad.amax(), "{i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn sign_path_and_general_path_agree_inside_ep() {
        let model = MeasurementModel::generate(&EnsembleSpec::ill_conditioned(5, 7, 50.0, 9), 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = gaussian_vec(7, &mut rng);
        let sign = QuantizerSpec::sign();
        let (y, z) = model.simulate(&sign, &x, 1).unwrap();
        let one_bit = Observations::new(&sign, y.as_slice()).unwrap();
        let mut general = one_bit.clone();
        general.one_bit = false;
        let a = ep_fixed_point(&model, 0.3, &z, &one_bit, &EpConfig::default()).unwrap();
        let b = ep_fixed_point(&model, 0.3, &z, &general, &EpConfig::default()).unwrap();
        assert!((a.score - b.score).amax() < 1e-10);
    }

    #[test]
    fn evidence_is_exact_for_isotropic_noise() {
        // With AA^T = cI the box probability factorizes and EP is exact.
        let model = MeasurementModel::generate(&EnsembleSpec::row_orthogonal(4, 8, 1), 0.2).unwrap();
        let q = QuantizerSpec::uniform(2, 1.0).unwrap();
        let obs = Observations::new(&q, &[-0.75, 0.25, 0.75, -0.25]).unwrap();
        let z = DVector::from_vec(vec![0.1, -0.3, 0.4, 0.0]);
        let beta = 0.5;
        let s = ep_fixed_point(&model, beta, &z, &obs, &EpConfig::default()).unwrap();
        let sd = (0.04 + beta * beta * 2.0f64).sqrt();
        let exact: f64 = obs
            .intervals()
            .iter()
            .zip(z.iter())
            .map(|(iv, zm)| {
                let cdf = |t: f64| 0.5 * trunc_gauss::erfc(-(t - zm) / sd / std::f64::consts::SQRT_2);
                (cdf(iv.upper) - cdf(iv.lower)).ln()
            })
            .sum();
        let ep = ep_log_evidence(&model, beta, &s).unwrap();
        assert!((ep - exact).abs() < 1e-9, "{ep} vs {exact}");
    }

    #[test]
    fn damping_still_converges() {
        let model = MeasurementModel::generate(&EnsembleSpec::ill_conditioned(8, 8, 10.0, 2), 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = gaussian_vec(8, &mut rng);
        let (y, z) = model.simulate(&QuantizerSpec::sign(), &x, 3).unwrap();
        let obs = Observations::new(&QuantizerSpec::sign(), y.as_slice()).unwrap();
        let cfg = EpConfig { iter_ep: 40, damping: 0.3, ..EpConfig::default() };
        let s = ep_fixed_point(&model, 0.5, &z, &obs, &cfg).unwrap();
        assert!(s.var_residual() < 1e-8);
        assert!(s.mean_residual() < 1e-6);
    }

    #[test]
    fn invalid_config_is_rejected() {
        assert!(EpConfig { iter_ep: 0, ..EpConfig::default() }.validate().is_err());
        assert!(EpConfig { damping: 1.5, ..EpConfig::default() }.validate().is_err());
        assert!(EpConfig { tau_floor: 0.0, ..EpConfig::default() }.validate().is_err());
    }
}
