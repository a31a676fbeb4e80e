//! Functional autoregression of time-varying probability densities.
//!
//! Densities are discretized on a shared uniform grid ([`function_space`]),
//! estimated from raw observations ([`density`]), and modeled as a first-order
//! functional autoregression ([`far`]). The fitted operator can be analyzed
//! ([`analysis`]), used for forecasting and backtesting ([`forecast`]),
//! bootstrapped ([`bootstrap`]), and used as a simulation generator
//! ([`simulation`]). [`io`] handles files.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod bootstrap;
pub mod density;
pub mod error;
pub mod far;
pub mod forecast;
pub mod function_space;
pub mod io;
pub mod simulation;

pub use density::{DensityPanel, Kernel, RawPanel};
pub use error::{Error, Result};
pub use far::{fit, FarModel, FarMoments};
pub use forecast::{ErrorReport, Predictor};
pub use function_space::{EigenSystem, GridFunction, GridSpec, OperatorRep};
pub use simulation::{Generator, StudyConfig};
