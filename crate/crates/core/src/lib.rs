//! Two-parameter ambit fields driven by white noise: simulation on a lattice,
//! thinned power variations, their law of large numbers and central limit
//! theorem, and the analytic tools needed to check them numerically.

pub mod asymptotics;
pub mod config;
pub mod error;
pub mod gauss;
pub mod kernels;
pub mod limits;
pub mod quad;
pub mod region;
pub mod rng;
pub mod runner;
pub mod simulate;
pub mod variation;
pub mod volatility;

pub use error::{AmbitError, Result};
pub use kernels::{WeightShape, WeightSpec};
pub use volatility::{SigmaGrid, VolatilityModel};
