//! Measuring how consistent feature attributions are across retrainings that
//! leave the task untouched (seed, data order, dropout rate).
//!
//! The pipeline is: [`datasets`] → [`models`] → [`explainers`] →
//! [`consistency`], with [`quality`] and [`svcca`] as side analyses.

pub mod error;
pub mod numkit;

pub use error::{Error, Result};
pub mod datasets;
pub mod models;
pub mod explainers;
pub mod consistency;
pub mod quality;
pub mod svcca;
