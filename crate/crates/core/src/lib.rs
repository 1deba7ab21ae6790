//! Simulation and analysis of single-photon detectors with temporal
//! efficiency recovery (TER): photon sources, detector models, the
//! waiting-time-distribution solver, TER calibration from time tags,
//! n-th order correlation estimators and detector-array analysis.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod array;
pub mod calibration;
pub mod correlator;
pub mod detector;
pub mod error;
pub mod io;
pub mod sources;
pub mod stream;
pub mod wtd;

pub use detector::{DetectorConfig, TerCurve};
pub use error::{Error, ErrorKind, Result};
pub use sources::{SourceKind, SourceModel};
pub use stream::{Budget, TimeTagStream};
pub use wtd::EfficiencyCurve;
