//! Simulation and cross-validation toolkit for McKean–Vlasov SDEs.
//!
//! Three routes to the law of `X(t)` are provided and compared:
//! interacting particles ([`particle`]), Picard iteration over frozen
//! statistic flows ([`picard`]) and finite-difference solution of the
//! nonlocal Fokker–Planck equation ([`fokkerplanck`]). The [`malliavin`]
//! module simulates the first-variation process and the Malliavin
//! covariance matrix along particle paths.

pub mod coefficients;
pub mod error;
pub mod fokkerplanck;
pub mod harness;
pub mod linalg;
pub mod malliavin;
pub mod measures;
pub mod particle;
pub mod picard;
pub mod presets;

pub use error::{Error, Result};
