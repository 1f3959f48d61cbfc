//! Repeated route choice under private recommendations.
//!
//! - [`game`]: latency model, signal policies, obedience check.
//! - [`equilibrium`]: uninformed Wardrop equilibrium and obedient signal design.
//! - [`dynamics`]: population regret dynamics under a fixed policy.
//! - [`protocol`]: the rating/review experiment engine and its persistence.
//! - [`analysis`]: hypothesis tables, regressions, filters, exports.

pub mod analysis;
pub mod config;
pub mod dynamics;
pub mod equilibrium;
pub mod error;
pub mod game;
pub mod protocol;
pub mod sampling;
pub mod simplex;

pub use error::{Error, Result};
