//! Data-driven feedback linearisation of nonlinear mechanical systems.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: polynomial nonlinear state-space models and their velocity form
//! - [`excitation`]: random-phase multisines with detection lines
//! - [`plant`]: continuous-time and surrogate truth plants, sensor noise
//! - [`mpc`]: internal reference generator and closed-form two-rate MPC
//! - [`ukf`]: unscented Kalman filter observer
//! - [`closed_loop`]: open-loop and linearised-loop runners
//! - [`analysis`]: spectra, best linear approximation, distortion reports
//! - [`scenario`]: configuration files and end-to-end experiments

pub mod analysis;
pub mod closed_loop;
pub mod error;
pub mod excitation;
pub mod io;
pub mod mpc;
pub mod plant;
pub mod scenario;
pub mod ukf;
pub mod model;
pub mod signal;

pub use error::{Error, Result};
pub use model::{AugmentedModel, PolyNlssModel};
pub use signal::SignalRecord;
