//! Optimal-structure beamforming for 1-layer rate-splitting multiple access
//! in the multi-user MISO downlink.
//!
//! * [`model`]: system types and SINR / sum-rate evaluation.
//! * [`fp`]: fractional-programming surrogate and the optimal beamforming
//!   structure.
//! * [`hfpi`]: hyperplane fixed-point iteration and the FP-HFPI solver.
//! * [`autodiff`]: reverse-mode differentiation over real tensors.
//! * [`rsbnn`]: the deep-unfolded network and its training.
//! * [`data`]: channel datasets, labels, file formats, black-box baseline
//!   and benchmarking.

pub mod autodiff;
mod binio;
pub mod data;
pub mod error;
pub mod fp;
pub mod hfpi;
pub mod model;
pub mod rsbnn;

pub use error::{Error, Result};
pub use fp::{fp_objective, g_values, obs_beamformers, update_aux, AuxState, DualState, FpObjective, GValues};
pub use hfpi::{fp_hfpi_solve, hfpi_inner_loop, hfpi_step, init_beamformers, HfpiConfig, Solution, SolveDiagnostics};
pub use model::{
    compute_sinrs, power_used, rate_report, rectify_power, BeamMatrix, ChannelSample, RateReport, Sinrs, SystemConfig,
};
