//! Calibration of the log-periodic power law singularity (LPPLS) model.
//!
//! Three calibrators share one model core:
//!
//! * [`lm`]: multi-start Levenberg-Marquardt on the reduced loss, with the
//!   linear coefficients eliminated by variable projection;
//! * [`mlnn`]: a small network trained from scratch on a single series, whose
//!   loss is the reconstruction error of the LPPLS curve it parameterizes;
//! * [`plnn`]: a network trained once on labelled synthetic series and then
//!   reused for single-pass inference.
//!
//! [`bench`] reproduces the synthetic comparison between them and [`forecast`]
//! runs the rolling-window pipeline on observed data.

#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod autodiff;
pub mod bench;
pub mod calibration;
pub mod dataset;
pub mod error;
pub mod forecast;
pub mod lm;
pub mod mlnn;
pub mod model;
pub mod noise;
pub mod plnn;
pub mod svg;

pub use calibration::{Bounds, CalibrationResult, Diagnostics, Method};
pub use error::{LpplsError, Result};
pub use model::{
    eval_basis, eval_lppls, reduced_loss, residual_mse, solve_linear, Affine, LinearParams, LpplsParams,
    NonlinearParams, Series,
};
