//! Stored measurements: the codeword vector plus a JSON sidecar describing
//! how it was produced, and the settings for reconstructing from them.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{QcsError, Result};
use crate::prior::PriorConfig;
use crate::quantizer::{QuantizerConfig, QuantizerSpec};
use crate::sampler::SamplerConfig;

/// Written next to `y.qmx` as `y.qmx.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementMeta {
    pub bits: u32,
    pub saturation: f64,
    pub noise_std: f64,
    pub m: usize,
    pub seed: u64,
}

impl MeasurementMeta {
    pub fn sidecar_path(y_path: &Path) -> PathBuf {
        let mut s = y_path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    pub fn save(&self, y_path: &Path) -> Result<()> {
        fs::write(Self::sidecar_path(y_path), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// `None` when no sidecar exists.
    pub fn load(y_path: &Path) -> Result<Option<Self>> {
        let path = Self::sidecar_path(y_path);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| QcsError::Config(format!("{}: {e}", path.display())))
    }

    pub fn quantizer(&self) -> Result<QuantizerSpec> {
        QuantizerSpec::uniform(self.bits, self.saturation)
    }
}

/// Settings for `reconstruct`. An experiment config also parses; its extra
/// fields are ignored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconstructConfig {
    #[serde(default)]
    pub noise_std: Option<f64>,
    #[serde(default)]
    pub quantizer: Option<QuantizerConfig>,
    #[serde(default)]
    pub sampler: SamplerConfig,
    pub prior: PriorConfig,
}

impl ReconstructConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| QcsError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ReconstructConfig =
            serde_json::from_str(&text).map_err(|e| QcsError::Config(format!("{}: {e}", path.display())))?;
        cfg.sampler.validate().map_err(|e| QcsError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Quantizer and noise level, from the config where given and the
    /// sidecar otherwise.
    pub fn resolve(&self, meta: Option<&MeasurementMeta>) -> Result<(QuantizerSpec, f64)> {
        let quantizer = match (&self.quantizer, meta) {
            (Some(q), _) if q.bits == 1 => QuantizerSpec::sign(),
            (Some(QuantizerConfig { bits, saturation: Some(s), .. }), _) => QuantizerSpec::uniform(*bits, *s)?,
            (Some(q), Some(m)) if q.bits != m.bits => {
                return Err(QcsError::Config(format!(
                    "config asks for {} bits but the measurements have {}",
                    q.bits, m.bits
                )))
            }
            (_, Some(m)) => m.quantizer()?,
            (_, None) => {
                return Err(QcsError::Config(
                    "quantizer saturation unknown: set quantizer.saturation or keep the measurement sidecar".into(),
                ))
            }
        };
        let noise_std = self
            .noise_std
            .or(meta.map(|m| m.noise_std))
            .ok_or_else(|| QcsError::Config("noise_std missing from config and sidecar".into()))?;
        if !(noise_std >= 0.0) || !noise_std.is_finite() {
            return Err(QcsError::Config(format!("noise_std must be finite and >= 0, got {noise_std}")));
        }
        Ok((quantizer, noise_std))
    }
}

/// Loads `y` and its sidecar.
pub fn load_measurements(y_path: &Path) -> Result<(DVector<f64>, Option<MeasurementMeta>)> {
    let y = crate::qmx::load_vector(y_path)?;
    let meta = MeasurementMeta::load(y_path)?;
    if let Some(m) = &meta {
        if m.m != y.len() {
            return Err(QcsError::Config(format!(
                "sidecar says {} measurements, file holds {}",
                m.m,
                y.len()
            )));
        }
    }
    Ok((y, meta))
}
