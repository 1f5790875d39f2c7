//! Simulation and end-to-end training of full-duplex links whose terminals
//! carry stacked programmable metasurfaces.
//!
//! * [`wavefield`]: diffraction between metasurface layers.
//! * [`channel`]: correlated Rayleigh links, path loss and noise.
//! * [`autograd`]: reverse-mode differentiation over paired real/imag tensors.
//! * [`emnn`]: the end-to-end network from bits to soft bit estimates.
//! * [`training`]: loss, optimizer, base training, fine-tuning, checkpoints.
//! * [`eval`]: bit error rate, Monte Carlo runs, sweeps and reports.

pub mod autograd;
pub mod channel;
pub mod config;
pub mod emnn;
pub mod error;
pub mod eval;
pub mod rng;
pub mod training;
pub mod wavefield;

pub use config::SystemConfig;
pub use error::{Error, Result};
