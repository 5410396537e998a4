//! Element-wise uniform quantizer with half-open threshold intervals.
//!
//! A `Q`-bit quantizer has `2^Q` codewords. Interior bins have width
//! `2·saturation / 2^Q`; the two outer bins extend to `±∞`. The 1-bit case is
//! the sign quantizer with codewords `{-1, +1}` and threshold `0`, and
//! `sign(0) = +1` because bins are `[l, u)`.

use serde::{Deserialize, Serialize};

use crate::error::{QcsError, Result};

/// Largest supported resolution. Codeword tables grow as `2^bits`.
pub const MAX_BITS: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn new(lower: f64, upper: f64) -> Self {
        Interval { lower, upper }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lower && v < self.upper
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerSpec {
    bits: u32,
    codewords: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    saturation: f64,
}

impl QuantizerSpec {
    /// The 1-bit sign quantizer.
    pub fn sign() -> Self {
        QuantizerSpec {
            bits: 1,
            codewords: vec![-1.0, 1.0],
            lower: vec![f64::NEG_INFINITY, 0.0],
            upper: vec![0.0, f64::INFINITY],
            saturation: 1.0,
        }
    }

    /// Symmetric saturating uniform quantizer over `[-saturation, saturation]`.
    ///
    /// Codewords of a multi-bit quantizer are the midpoints of the bins of the
    /// finite grid, so the saturating bins carry the outermost midpoints.
    pub fn uniform(bits: u32, saturation: f64) -> Result<Self> {
        if bits == 0 {
            return Err(QcsError::invalid("quantizer needs at least one bit"));
        }
        if bits > MAX_BITS {
            return Err(QcsError::invalid(format!(
                "quantizer resolution {bits} exceeds {MAX_BITS} bits"
            )));
        }
        if !saturation.is_finite() {
            return Err(QcsError::invalid(format!(
                "saturation must be finite, got {saturation}"
            )));
        }
        if bits == 1 {
            return Ok(Self::sign());
        }
        if saturation <= 0.0 {
            return Err(QcsError::invalid(format!(
                "saturation must be positive, got {saturation}"
            )));
        }

        let levels = 1usize << bits;
        let width = 2.0 * saturation / levels as f64;
        let edge = |r: usize| -saturation + r as f64 * width;

        let codewords = (0..levels).map(|r| edge(r) + 0.5 * width).collect();
        let lower = (0..levels)
            .map(|r| if r == 0 { f64::NEG_INFINITY } else { edge(r) })
            .collect();
        let upper = (0..levels)
            .map(|r| if r + 1 == levels { f64::INFINITY } else { edge(r + 1) })
            .collect();

        Ok(QuantizerSpec {
            bits,
            codewords,
            lower,
            upper,
            saturation,
        })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn levels(&self) -> usize {
        self.codewords.len()
    }

    pub fn codewords(&self) -> &[f64] {
        &self.codewords
    }

    pub fn saturation(&self) -> f64 {
        self.saturation
    }

    /// Width of an interior bin (2 for the sign quantizer, where it is only
    /// used to scale codeword matching).
    pub fn bin_width(&self) -> f64 {
        if self.bits == 1 {
            2.0
        } else {
            2.0 * self.saturation / self.levels() as f64
        }
    }

    pub fn interval(&self, index: usize) -> Interval {
        Interval::new(self.lower[index], self.upper[index])
    }

    /// Bin index of a finite value.
    pub fn bin_of(&self, v: f64) -> usize {
        // Interior thresholds are lower[1..]; v lands in the bin after the last
        // threshold that is <= v.
        self.lower[1..].partition_point(|&t| t <= v)
    }

    pub fn quantize_scalar(&self, v: f64) -> f64 {
        self.codewords[self.bin_of(v)]
    }

    pub fn quantize(&self, v: &[f64]) -> Result<Vec<f64>> {
        v.iter()
            .enumerate()
            .map(|(i, &x)| {
                if x.is_finite() {
                    Ok(self.quantize_scalar(x))
                } else {
                    Err(QcsError::NonFinite(format!("quantizer input [{i}] = {x}")))
                }
            })
            .collect()
    }

    pub fn index_of(&self, codeword: f64) -> Result<usize> {
        if !codeword.is_finite() {
            return Err(QcsError::UnknownCodeword(codeword));
        }
        let tol = 1e-6 * self.bin_width();
        let pos = self.codewords.partition_point(|&q| q < codeword);
        [pos.checked_sub(1), Some(pos)]
            .into_iter()
            .flatten()
            .filter(|&i| i < self.codewords.len())
            .min_by(|&i, &j| {
                let di = (self.codewords[i] - codeword).abs();
                let dj = (self.codewords[j] - codeword).abs();
                di.total_cmp(&dj)
            })
            .filter(|&i| (self.codewords[i] - codeword).abs() <= tol)
            .ok_or(QcsError::UnknownCodeword(codeword))
    }

    /// Thresholds `[l, u)` of the bin labelled by `codeword`.
    pub fn interval_of(&self, codeword: f64) -> Result<Interval> {
        self.index_of(codeword).map(|i| self.interval(i))
    }

    pub fn intervals_of(&self, y: &[f64]) -> Result<Vec<Interval>> {
        y.iter().map(|&q| self.interval_of(q)).collect()
    }

    /// True for the two unbounded outer bins of a multi-bit quantizer.
    pub fn is_saturating(&self, index: usize) -> bool {
        self.bits > 1 && (index == 0 || index + 1 == self.levels())
    }
}

/// Quantizer settings as they appear in the experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerConfig {
    pub bits: u32,
    /// Fixed half-range; when absent it is derived from the clean signal.
    #[serde(default)]
    pub saturation: Option<f64>,
    #[serde(default = "default_sigma_mult")]
    pub auto_saturation_sigma_mult: f64,
}

fn default_sigma_mult() -> f64 {
    3.0
}

impl QuantizerConfig {
    pub fn sign() -> Self {
        QuantizerConfig {
            bits: 1,
            saturation: None,
            auto_saturation_sigma_mult: default_sigma_mult(),
        }
    }

    /// Builds the quantizer, estimating the saturation as a multiple of the
    /// standard deviation of `pre_quantization` when none is configured.
    pub fn resolve(&self, pre_quantization: &[f64]) -> Result<QuantizerSpec> {
        if self.bits == 1 {
            return QuantizerSpec::uniform(1, self.saturation.unwrap_or(1.0));
        }
        let saturation = match self.saturation {
            Some(s) => s,
            None => {
                if !(self.auto_saturation_sigma_mult > 0.0) {
                    return Err(QcsError::Config(
                        "quantizer.auto_saturation_sigma_mult must be positive".into(),
                    ));
                }
                let std = std_dev(pre_quantization);
                if !(std > 0.0) {
                    return Err(QcsError::Config(
                        "cannot derive quantizer saturation from a constant signal".into(),
                    ));
                }
                self.auto_saturation_sigma_mult * std
            }
        };
        QuantizerSpec::uniform(self.bits, saturation)
    }
}

fn std_dev(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_bit_is_sign_regardless_of_saturation() {
        for s in [0.1, 1.0, 42.0] {
            assert_eq!(QuantizerSpec::uniform(1, s).unwrap(), QuantizerSpec::sign());
        }
        let q = QuantizerSpec::sign();
        assert_eq!(q.codewords(), &[-1.0, 1.0]);
        assert_eq!(q.interval_of(1.0).unwrap(), Interval::new(0.0, f64::INFINITY));
        assert_eq!(
            q.interval_of(-1.0).unwrap(),
            Interval::new(f64::NEG_INFINITY, 0.0)
        );
    }

    #[test]
    fn two_bit_thresholds() {
        let q = QuantizerSpec::uniform(2, 1.0).unwrap();
        assert_eq!(q.levels(), 4);
        assert_eq!(&q.lower[1..], &[-0.5, 0.0, 0.5]);
        assert_eq!(q.lower[0], f64::NEG_INFINITY);
        assert_eq!(q.upper[3], f64::INFINITY);
        assert_eq!(q.interval(1), Interval::new(-0.5, 0.0));
        assert_eq!(q.interval_of(q.codewords()[1]).unwrap(), Interval::new(-0.5, 0.0));
    }

    #[test]
    fn three_bit_width() {
        let q = QuantizerSpec::uniform(3, 3.0).unwrap();
        assert_eq!(q.levels(), 8);
        assert_eq!(q.bin_width(), 0.75);
        for r in 1..7 {
            let iv = q.interval(r);
            assert!((iv.upper - iv.lower - 0.75).abs() < 1e-15);
        }
    }

    #[test]
    fn quantize_examples() {
        let sign = QuantizerSpec::sign();
        assert_eq!(sign.quantize(&[-0.3, 0.0, 2.1]).unwrap(), vec![-1.0, 1.0, 1.0]);

        let q = QuantizerSpec::uniform(2, 1.0).unwrap();
        let y = q.quantize_scalar(0.49);
        assert_eq!(q.interval_of(y).unwrap(), Interval::new(0.0, 0.5));
        assert_eq!(q.quantize_scalar(7.0), q.codewords()[3]);
        assert_eq!(q.quantize_scalar(-7.0), q.codewords()[0]);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(QuantizerSpec::uniform(0, 1.0).is_err());
        assert!(QuantizerSpec::uniform(2, f64::NAN).is_err());
        assert!(QuantizerSpec::uniform(2, f64::INFINITY).is_err());
        assert!(QuantizerSpec::uniform(3, -1.0).is_err());
        assert!(QuantizerSpec::sign().quantize(&[f64::NAN]).is_err());
    }

    #[test]
    fn unknown_codeword() {
        let q = QuantizerSpec::uniform(2, 1.0).unwrap();
        assert!(matches!(q.interval_of(0.3), Err(QcsError::UnknownCodeword(_))));
        assert!(QuantizerSpec::sign().interval_of(0.0).is_err());
    }

    #[test]
    fn auto_saturation() {
        let cfg = QuantizerConfig {
            bits: 3,
            saturation: None,
            auto_saturation_sigma_mult: 2.0,
        };
        let q = cfg.resolve(&[-1.0, 1.0, -1.0, 1.0]).unwrap();
        assert_eq!(q.saturation(), 2.0);
        assert!(cfg.resolve(&[0.5, 0.5]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_and_partition(bits in 1u32..6, sat in 0.1f64..10.0, v in -50.0f64..50.0) {
            let q = QuantizerSpec::uniform(bits, sat).unwrap();
            // Exactly one interval contains v.
            let hits = (0..q.levels()).filter(|&r| q.interval(r).contains(v)).count();
            prop_assert_eq!(hits, 1);
            prop_assert!(q.interval_of(q.quantize_scalar(v)).unwrap().contains(v));
            for r in 0..q.levels() {
                let iv = q.interval(r);
                let probe = match (iv.lower.is_finite(), iv.upper.is_finite()) {
                    (true, true) => 0.5 * (iv.lower + iv.upper),
                    (true, false) => iv.lower + 1.0,
                    (false, true) => iv.upper - 1.0,
                    (false, false) => 0.0,
                };
                prop_assert_eq!(q.quantize_scalar(probe), q.codewords()[r]);
            }
        }

        #[test]
        fn sign_consistency(v in -10.0f64..10.0) {
            let expected = if v >= 0.0 { 1.0 } else { -1.0 };
            prop_assert_eq!(QuantizerSpec::sign().quantize_scalar(v), expected);
        }
    }
}
