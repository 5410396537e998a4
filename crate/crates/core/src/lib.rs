//! Posterior sampling from quantized linear measurements `y = Q(Ax + n)`.
//!
//! Annealed Langevin dynamics combines a prior score with a likelihood score
//! computed by expectation propagation, which stays accurate for
//! ill-conditioned and correlated sensing matrices.

pub mod ep;
pub mod error;
pub mod harness;
pub mod prior;
pub mod qmx;
pub mod quantizer;
pub mod sensing;
pub mod sampler;
pub mod trunc_gauss;

pub use ep::{EpConfig, EpState, Observations};
pub use error::{QcsError, Result};
pub use prior::{AnalyticPrior, GaussianPrior, GmmPrior, PriorScore};
pub use quantizer::{Interval, QuantizerConfig, QuantizerSpec};
pub use sensing::{EnsembleKind, EnsembleSpec, MeasurementModel};
