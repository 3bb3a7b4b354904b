//! Numerical toolkit for the global stochastic maximum principle of fully
//! coupled forward-backward control systems.
//!
//! The core is generic over the scalar type; the `*64` aliases fix it to `f64`.

pub mod adjoint;
pub mod error;
pub mod fbsde;
pub mod hamiltonian;
pub mod model;
pub mod paths;
pub mod regression;
pub mod scalar;
pub mod spike;
pub mod stats;

pub use error::{Result, SmpError};
pub use scalar::Scalar;

pub const VERSION: &str = concat!("smp-core ", env!("CARGO_PKG_VERSION"));

pub type Spec64 = model::ProblemSpec<f64>;
pub type Panel64 = paths::ProcessPanel<f64>;
pub type Bundle64 = paths::BrownianBundle<f64>;
pub type Grid64 = paths::TimeGrid<f64>;
