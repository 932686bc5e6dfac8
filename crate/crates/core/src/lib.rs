//! Multi-species interacting particle systems with full pairwise dynamics
//! and the random-batch method.
//!
//! * [`model`] defines a problem ([`SystemSpec`]) and validates it.
//! * [`batching`] draws and enumerates random batch partitions.
//! * [`dynamics`] evaluates drifts and runs Euler-Maruyama simulations,
//!   including synchronously coupled full / random-batch pairs.
//! * [`analysis`] holds the remainder statistics, error-bound constants,
//!   convergence fits, cost counts and histograms.
//! * [`scenarios`] ships the built-in presets and the configuration format.

pub mod analysis;
pub mod batching;
pub mod dynamics;
pub mod error;
pub mod io;
pub mod model;
pub mod scenarios;
pub mod streams;

pub use error::{Diagnostic, Error, Result, Severity};
pub use model::SystemSpec;
