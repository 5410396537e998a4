//! Tilted (interval-truncated) Gaussian moments and the per-measurement score.
//!
//! For measurement `m` with interval `[l, u)`, precision `tau` and natural
//! mean `h`, the tilted density over the effective noise is
//! `1(z + n in [l, u)) N(n; h / tau, 1 / tau)`. Everything reduces to a
//! standard normal truncated to the standardized bounds
//!
//! ```text
//! u~ = -sqrt(tau) z - h / sqrt(tau) + u sqrt(tau)
//! l~ = -sqrt(tau) z - h / sqrt(tau) + l sqrt(tau)
//! ```
//!
//! with mass `Z = Phi(u~) - Phi(l~)`. The tilted mean is
//! `h / tau + mu* / sqrt(tau)`, the variance `var* / tau` and the score
//! `d log Z / dz = sqrt(tau) mu*`, where `mu*`, `var*` are the standard
//! truncated-normal moments.
//!
//! Ratios are formed from `erfcx` so intervals deep in one tail never go
//! through `0 / 0`. One-sided tails switch to the Mills-ratio continued
//! fraction above [`MILLS_CF_START`]; bounded intervals beyond
//! [`ASYMPTOTIC_CUTOFF`] use an expansion around the near edge.

mod special;

use std::f64::consts::FRAC_1_SQRT_2;

use nalgebra::DVector;

use crate::error::{ensure_len, QcsError, Result};
use crate::quantizer::Interval;

pub use special::{erf, erfc, erfcx, normal_pdf};
use special::{mills_terms, LN_SQRT_2PI, SQRT_2_OVER_PI};

/// Standardized bound beyond which bounded intervals use the edge expansion.
pub const ASYMPTOTIC_CUTOFF: f64 = 38.0;
/// One-sided intervals starting above this use the continued fraction.
pub const MILLS_CF_START: f64 = 3.0;

/// Moments of a standard normal truncated to `[a, b]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StdTruncated {
    pub log_mass: f64,
    pub mean: f64,
    pub var: f64,
}

impl StdTruncated {
    fn mirrored(self) -> Self {
        StdTruncated {
            mean: -self.mean,
            ..self
        }
    }
}

/// Moments of `N(0, 1)` restricted to `[a, b]`; `None` when the mass is not
/// representable.
pub fn standard_truncated(a: f64, b: f64) -> Option<StdTruncated> {
    if a.is_nan() || b.is_nan() || !(a < b) {
        return None;
    }
    let out = if b == f64::INFINITY && a.is_finite() {
        Some(one_sided(a))
    } else if a == f64::NEG_INFINITY && b.is_finite() {
        Some(one_sided(-b).mirrored())
    } else if a >= 0.0 {
        upper_region(a, b)
    } else if b <= 0.0 {
        upper_region(-b, -a).map(StdTruncated::mirrored)
    } else {
        straddling(a, b)
    };
    out.filter(|t| t.log_mass.is_finite() && t.mean.is_finite() && t.var.is_finite() && t.var > 0.0)
}

/// `[t, inf)` for any finite `t`; the single-erfc forms.
pub(crate) fn one_sided(t: f64) -> StdTruncated {
    if t >= MILLS_CF_START {
        return mills_tail(t);
    }
    let ratio = SQRT_2_OVER_PI / erfcx(t * FRAC_1_SQRT_2);
    let log_mass = if t > 0.0 {
        -0.5 * t * t + (0.5 * erfcx(t * FRAC_1_SQRT_2)).ln()
    } else {
        (0.5 * erfc(t * FRAC_1_SQRT_2)).ln()
    };
    StdTruncated {
        log_mass,
        mean: ratio,
        var: 1.0 + t * ratio - ratio * ratio,
    }
}

fn mills_tail(a: f64) -> StdTruncated {
    let (d, e, f) = mills_terms(a);
    let lambda = a + d;
    StdTruncated {
        log_mass: -0.5 * a * a - LN_SQRT_2PI - lambda.ln(),
        mean: lambda,
        var: d * d * ((a - f) / (a + f) + e * e),
    }
}

/// `0 <= a < b`.
fn upper_region(a: f64, b: f64) -> Option<StdTruncated> {
    if b.is_infinite() {
        return Some(one_sided(a));
    }
    if a > ASYMPTOTIC_CUTOFF {
        return Some(edge_expansion(a, b));
    }
    // Z = exp(-a^2/2) / 2 * [erfcx(a/√2) - rho erfcx(b/√2)], rho = exp((a^2 - b^2)/2)
    let half_gap = 0.5 * (b - a) * (b + a);
    let rho = (-half_gap).exp();
    let one_minus_rho = -(-half_gap).exp_m1();
    let d = erfcx(a * FRAC_1_SQRT_2) - rho * erfcx(b * FRAC_1_SQRT_2);
    if !(d > 0.0) {
        return None;
    }
    let mean = SQRT_2_OVER_PI * one_minus_rho / d;
    // 1 + (a phi(a) - b phi(b)) / Z - mean^2, regrouped so only O(1) terms cancel.
    let upper_ratio = SQRT_2_OVER_PI * rho / d;
    Some(StdTruncated {
        log_mass: -0.5 * a * a + (0.5 * d).ln(),
        mean,
        var: 1.0 - mean * (mean - a) - (b - a) * upper_ratio,
    })
}

fn straddling(a: f64, b: f64) -> Option<StdTruncated> {
    let mass = 0.5 * (erf(b * FRAC_1_SQRT_2) - erf(a * FRAC_1_SQRT_2));
    if !(mass > 0.0) {
        return None;
    }
    let (pa, pb) = (normal_pdf(a), normal_pdf(b));
    let apa = if a.is_finite() { a * pa } else { 0.0 };
    let bpb = if b.is_finite() { b * pb } else { 0.0 };
    let mean = (pa - pb) / mass;
    Some(StdTruncated {
        log_mass: mass.ln(),
        mean,
        var: 1.0 + (apa - bpb) / mass - mean * mean,
    })
}

/// Bounded interval with `a > ASYMPTOTIC_CUTOFF`. With `s = a + u / a`, the
/// density on `u in [0, W]`, `W = a (b - a)`, is proportional to
/// `exp(-u) exp(-u^2 / (2 a^2))`; the second factor is expanded in `1 / a^2`.
fn edge_expansion(a: f64, b: f64) -> StdTruncated {
    const TERMS: usize = 10;
    let w = a * (b - a);
    let inv_a2 = 1.0 / (a * a);
    let mut moments = [0.0f64; 3];
    let mut coef = 1.0;
    for j in 0..TERMS {
        for (k, acc) in moments.iter_mut().enumerate() {
            *acc += coef * truncated_gamma_integral(k + 2 * j, w);
        }
        coef *= -0.5 * inv_a2 / (j + 1) as f64;
    }
    let [j0, j1, j2] = moments;
    let m1 = j1 / j0;
    let m2 = j2 / j0;
    StdTruncated {
        log_mass: -0.5 * a * a - LN_SQRT_2PI - a.ln() + j0.ln(),
        mean: a + m1 / a,
        var: (m2 - m1 * m1) * inv_a2,
    }
}

/// `int_0^w u^n e^{-u} du`.
fn truncated_gamma_integral(n: usize, w: f64) -> f64 {
    let factorial: f64 = (1..=n).map(|i| i as f64).product();
    let s = (n + 1) as f64;
    if w < s + 30.0 {
        // Lower regularized gamma via its positive series.
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 1.0;
        while term > sum * 1e-17 {
            term *= w / (s + k);
            sum += term;
            k += 1.0;
        }
        let log_lead = -w + s * w.ln() - ln_factorial(n + 1);
        factorial * log_lead.exp() * sum
    } else {
        let mut term = 1.0;
        let mut upper = 1.0;
        for i in 1..=n {
            term *= w / i as f64;
            upper += term;
        }
        factorial * (1.0 - (-w).exp() * upper)
    }
}

fn ln_factorial(n: usize) -> f64 {
    (1..=n).map(|i| (i as f64).ln()).sum()
}

/// Measurement precision: the scalar EP value or one per measurement.
#[derive(Debug, Clone, Copy)]
pub enum Precision<'a> {
    Scalar(f64),
    PerElement(&'a [f64]),
}

impl Precision<'_> {
    pub fn at(&self, m: usize) -> f64 {
        match self {
            Precision::Scalar(t) => *t,
            Precision::PerElement(v) => v[m],
        }
    }
}

/// Borrowed inputs of the tilted-moment kernels.
#[derive(Debug, Clone, Copy)]
pub struct TiltedInputs<'a> {
    pub z: &'a [f64],
    pub h: &'a [f64],
    pub tau: Precision<'a>,
    pub intervals: &'a [Interval],
}

impl<'a> TiltedInputs<'a> {
    pub fn new(
        z: &'a [f64],
        h: &'a [f64],
        tau: Precision<'a>,
        intervals: &'a [Interval],
    ) -> Result<Self> {
        let m = z.len();
        ensure_len("tilted h", m, h.len())?;
        ensure_len("tilted intervals", m, intervals.len())?;
        match tau {
            Precision::Scalar(t) => {
                if !(t > 0.0) || !t.is_finite() {
                    return Err(QcsError::invalid(format!("precision must be positive, got {t}")));
                }
            }
            Precision::PerElement(v) => {
                ensure_len("tilted precision", m, v.len())?;
                if let Some(t) = v.iter().find(|t| !(**t > 0.0) || !t.is_finite()) {
                    return Err(QcsError::invalid(format!("precision must be positive, got {t}")));
                }
            }
        }
        if let Some((i, iv)) = intervals.iter().enumerate().find(|(_, iv)| !(iv.lower < iv.upper)) {
            return Err(QcsError::invalid(format!(
                "interval {i} is empty: [{}, {})",
                iv.lower, iv.upper
            )));
        }
        if z.iter().chain(h).any(|v| !v.is_finite()) {
            return Err(QcsError::NonFinite("tilted inputs z or h".into()));
        }
        Ok(TiltedInputs {
            z,
            h,
            tau,
            intervals,
        })
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    fn offset(&self, m: usize) -> f64 {
        let st = self.tau.at(m).sqrt();
        -st * self.z[m] - self.h[m] / st
    }

    /// Standardized `(upper, lower)` bound of element `m`.
    pub fn standardized(&self, m: usize) -> (f64, f64) {
        let st = self.tau.at(m).sqrt();
        let base = self.offset(m);
        let iv = self.intervals[m];
        (base + iv.upper * st, base + iv.lower * st)
    }
}

/// Standardized upper and lower bounds `(u~, l~)` for every element.
pub fn standardize(inputs: &TiltedInputs<'_>) -> (Vec<f64>, Vec<f64>) {
    (0..inputs.len()).map(|m| inputs.standardized(m)).unzip()
}

/// Moments of the tilted distribution plus the score and log-partition.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltedMoments {
    /// Per-element tilted mean `m^a`.
    pub mean: DVector<f64>,
    /// Element-averaged tilted variance `chi^a`.
    pub var: f64,
    /// Per-element tilted variances (their average is `var`).
    pub elem_var: DVector<f64>,
    /// `d log Z_m / d z_m`.
    pub score: DVector<f64>,
    /// `sum_m log Z_m`, the log of the interval masses.
    pub log_partition: f64,
}

impl TiltedMoments {
    fn assemble(inputs: &TiltedInputs<'_>, std: &[StdTruncated]) -> Self {
        let m = inputs.len();
        let mut mean = DVector::zeros(m);
        let mut elem_var = DVector::zeros(m);
        let mut score = DVector::zeros(m);
        let mut log_partition = 0.0;
        for (i, t) in std.iter().enumerate() {
            let tau = inputs.tau.at(i);
            let st = tau.sqrt();
            mean[i] = inputs.h[i] / tau + t.mean / st;
            elem_var[i] = t.var / tau;
            score[i] = st * t.mean;
            log_partition += t.log_mass;
        }
        let var = if m == 0 { 0.0 } else { elem_var.sum() / m as f64 };
        TiltedMoments {
            mean,
            var,
            elem_var,
            score,
            log_partition,
        }
    }
}

fn general_elements(inputs: &TiltedInputs<'_>) -> Result<Vec<StdTruncated>> {
    (0..inputs.len())
        .map(|m| {
            let (upper, lower) = inputs.standardized(m);
            standard_truncated(lower, upper).ok_or(QcsError::DegenerateInterval {
                index: m,
                lower,
                upper,
            })
        })
        .collect()
}

/// Tilted moments for arbitrary intervals.
pub fn moments(inputs: &TiltedInputs<'_>) -> Result<TiltedMoments> {
    Ok(TiltedMoments::assemble(inputs, &general_elements(inputs)?))
}

/// Per-element score `g_m = d log Z_m / d z_m`.
pub fn score(inputs: &TiltedInputs<'_>) -> Result<DVector<f64>> {
    moments(inputs).map(|t| t.score)
}

pub fn log_partition(inputs: &TiltedInputs<'_>) -> Result<f64> {
    moments(inputs).map(|t| t.log_partition)
}

/// Sign-measurement specialization: every interval is `[0, inf)` or
/// `(-inf, 0)` according to `y_m = ±1`, and only `l~ = -sqrt(tau) z - h / sqrt(tau)`
/// enters, through a single `erfc(y l~ / √2)`.
pub fn moments_1bit(inputs: &TiltedInputs<'_>, y: &[f64]) -> Result<TiltedMoments> {
    ensure_len("1-bit codewords", inputs.len(), y.len())?;
    let std: Vec<StdTruncated> = y
        .iter()
        .enumerate()
        .map(|(m, &ym)| {
            if ym != 1.0 && ym != -1.0 {
                return Err(QcsError::UnknownCodeword(ym));
            }
            let l = inputs.offset(m);
            let t = one_sided(ym * l);
            if !t.log_mass.is_finite() {
                return Err(QcsError::DegenerateInterval {
                    index: m,
                    lower: l,
                    upper: f64::INFINITY,
                });
            }
            Ok(if ym > 0.0 { t } else { t.mirrored() })
        })
        .collect::<Result<_>>()?;
    Ok(TiltedMoments::assemble(inputs, &std))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // (a, b, log mass, mean, variance) of N(0,1) truncated to [a, b], from
    // 80-digit evaluation of the closed forms.
    #[allow(clippy::excessive_precision, clippy::approx_constant)]
    const REFERENCE: &[(f64, f64, f64, f64, f64)] = &[
        (0.0, f64::INFINITY, -0.69314718055994531, 0.79788456080286536, 0.36338022763241866),
        (-1.0, 2.0, -0.20016629432446258, 0.22963717909132897, 0.51976253921153394),
        (3.0, f64::INFINITY, -6.6077262215103495, 3.2830986549304365, 0.070559186785268117),
        (5.0, 5.2, -15.492118136845642, 5.0833092397442688, 0.0031630165440921008),
        (12.0, f64::INFINITY, -75.410673001568796, 12.082214175254284, 0.0066707263358458643),
        (20.0, 20.3, -203.91949293116013, 20.049052684477299, 0.0022533326191409347),
        (37.0, 37.5, -689.03058558493408, 37.026987682108135, 0.00072727609104629228),
        (38.5, f64::INFINITY, -745.69527029041108, 38.525939096854494, 0.00067193435636588132),
        (40.0, 40.05, -804.75346510703629, 40.017170386674059, 0.00017241344397941217),
        (40.0, 41.0, -804.60844201375379, 40.024968847207264, 0.00062266837859138626),
        (45.0, f64::INFINITY, -1017.2260942419524, 45.022200328343595, 0.00049236995965144707),
        (100.0, 100.001, -5007.8762773427469, 100.00049166801386, 8.3291680005918933e-8),
        (250.0, 260.0, -31256.440415450427, 250.00399987201024, 1.5998464204766059e-5),
        (1000.0, f64::INFINITY, -500007.82669481218, 1000.000999998, 9.9999400004999948e-7),
    ];

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn reference_moments() {
        for &(a, b, lz, mean, var) in REFERENCE {
            let t = standard_truncated(a, b).unwrap();
            assert!(rel(t.log_mass, lz) < 1e-13, "logZ [{a},{b}]: {} vs {lz}", t.log_mass);
            assert!(rel(t.mean, mean) < 1e-13, "mean [{a},{b}]: {} vs {mean}", t.mean);
            assert!(rel(t.var, var) < 1e-10, "var [{a},{b}]: {} vs {var}", t.var);
            // Mirror image.
            let m = standard_truncated(-b, -a).unwrap();
            assert_eq!(m.mean, -t.mean);
            assert_eq!(m.var, t.var);
        }
    }

    fn single(z: f64, h: f64, tau: f64, iv: Interval) -> TiltedMoments {
        let (zs, hs, ivs) = ([z], [h], [iv]);
        moments(&TiltedInputs::new(&zs, &hs, Precision::Scalar(tau), &ivs).unwrap()).unwrap()
    }

    #[test]
    fn standardize_examples() {
        let check = |z: f64, h: f64, tau: f64, iv: Interval, want: (f64, f64)| {
            let (zs, hs, ivs) = ([z], [h], [iv]);
            let inputs = TiltedInputs::new(&zs, &hs, Precision::Scalar(tau), &ivs).unwrap();
            let (u, l) = standardize(&inputs);
            assert_eq!((u[0], l[0]), want);
        };
        check(0.0, 0.0, 1.0, Interval::new(0.0, f64::INFINITY), (f64::INFINITY, 0.0));
        check(1.0, 0.0, 4.0, Interval::new(0.0, 1.0), (0.0, -2.0));
        let (zs, hs, ivs) = ([0.0], [2.0], [Interval::new(0.0, f64::INFINITY)]);
        let inputs = TiltedInputs::new(&zs, &hs, Precision::Scalar(4.0), &ivs).unwrap();
        assert_eq!(standardize(&inputs).1[0], -1.0);
    }

    #[test]
    fn half_normal_example() {
        let t = single(0.0, 0.0, 1.0, Interval::new(0.0, f64::INFINITY));
        let half_mean = (2.0 / std::f64::consts::PI).sqrt();
        assert!((t.mean[0] - half_mean).abs() < 1e-15);
        assert!((t.var - (1.0 - 2.0 / std::f64::consts::PI)).abs() < 1e-15);
        assert!((t.score[0] - half_mean).abs() < 1e-15);

        let (zs, hs, ys) = ([0.0], [0.0], [1.0]);
        let ivs = [Interval::new(0.0, f64::INFINITY)];
        let inputs = TiltedInputs::new(&zs, &hs, Precision::Scalar(1.0), &ivs).unwrap();
        let b = moments_1bit(&inputs, &ys).unwrap();
        assert!((b.mean[0] - 0.79788).abs() < 1e-5);
        assert!((b.var - 0.36338).abs() < 1e-5);
        assert!((b.score[0] - 0.79788).abs() < 1e-5);
    }

    #[test]
    fn satisfied_measurement_has_vanishing_score() {
        let mut last = f64::INFINITY;
        for z in [1.0, 5.0, 20.0, 100.0] {
            let g = single(z, 0.0, 1.0, Interval::new(0.0, f64::INFINITY)).score[0];
            assert!(g >= 0.0 && g < last);
            last = g;
        }
        assert!(last < 1e-300);
    }

    #[test]
    fn rejects_invalid_inputs() {
        let ivs = [Interval::new(0.0, 1.0)];
        assert!(TiltedInputs::new(&[0.0], &[0.0], Precision::Scalar(0.0), &ivs).is_err());
        assert!(TiltedInputs::new(&[0.0], &[0.0, 1.0], Precision::Scalar(1.0), &ivs).is_err());
        assert!(TiltedInputs::new(&[0.0], &[0.0], Precision::Scalar(1.0), &[Interval::new(1.0, 1.0)]).is_err());
        assert!(TiltedInputs::new(&[f64::NAN], &[0.0], Precision::Scalar(1.0), &ivs).is_err());
        let inputs = TiltedInputs::new(&[0.0], &[0.0], Precision::Scalar(1.0), &ivs).unwrap();
        assert!(moments_1bit(&inputs, &[0.5]).is_err());
    }

    #[test]
    fn degenerate_interval_is_reported() {
        // Far beyond double precision: the mass underflows even in log space
        // only if the bounds collapse, which happens for an absurd precision.
        let ivs = [Interval::new(0.0, 1e-300)];
        let inputs = TiltedInputs::new(&[0.0], &[0.0], Precision::Scalar(1e-10), &ivs).unwrap();
        assert!(matches!(moments(&inputs), Err(QcsError::DegenerateInterval { .. })));
    }

    fn interval_strategy() -> impl Strategy<Value = Interval> {
        (-3.0f64..3.0, 0.05f64..3.0, 0u8..4).prop_map(|(lo, w, kind)| match kind {
            0 => Interval::new(f64::NEG_INFINITY, lo),
            1 => Interval::new(lo, f64::INFINITY),
            _ => Interval::new(lo, lo + w),
        })
    }

    proptest! {
        #[test]
        fn mean_inside_shifted_interval(z in -4.0f64..4.0, h in -3.0f64..3.0, tau in 0.05f64..50.0, iv in interval_strategy()) {
            let t = single(z, h, tau, iv);
            prop_assert!(t.mean[0] > iv.lower - z && t.mean[0] < iv.upper - z);
            prop_assert!(t.var > 0.0 && t.var <= 1.0 / tau * (1.0 + 1e-12));
        }

        #[test]
        fn one_bit_sign_symmetry(z in -5.0f64..5.0, h in -3.0f64..3.0, tau in 0.05f64..50.0) {
            let ivs = [Interval::new(0.0, f64::INFINITY)];
            let (zp, hp, zn, hn) = ([z], [h], [-z], [-h]);
            let pos = TiltedInputs::new(&zp, &hp, Precision::Scalar(tau), &ivs).unwrap();
            let ivs_neg = [Interval::new(f64::NEG_INFINITY, 0.0)];
            let neg = TiltedInputs::new(&zn, &hn, Precision::Scalar(tau), &ivs_neg).unwrap();
            let a = moments_1bit(&pos, &[1.0]).unwrap();
            let b = moments_1bit(&neg, &[-1.0]).unwrap();
            prop_assert_eq!(a.mean[0], -b.mean[0]);
            prop_assert_eq!(a.score[0], -b.score[0]);
            prop_assert_eq!(a.var, b.var);
        }

        #[test]
        fn tail_gradient_identity(bound in -38.0f64..38.0, width in 0.1f64..5.0, one_sided in any::<bool>()) {
            // Bounds placed directly in standardized units (tau = 1, h = 0).
            let iv = if one_sided {
                Interval::new(bound, f64::INFINITY)
            } else {
                Interval::new(bound, bound + width)
            };
            let f = |z: f64| single(z, 0.0, 1.0, iv).log_partition;
            let step = 1e-5;
            let fd = (f(step) - f(-step)) / (2.0 * step);
            let g = single(0.0, 0.0, 1.0, iv).score[0];
            prop_assert!(g.is_finite());
            prop_assert!((fd - g).abs() <= 1e-4 * g.abs().max(1e-3), "fd {} vs g {}", fd, g);
        }
    }
}
