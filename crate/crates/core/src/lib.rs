//! Two-party training and inference on additively shared data, with
//! non-linear activations evaluated through secret-shared lookup tables.
//!
//! Two table families are provided: single-use tables that leak nothing and
//! are consumed per evaluation, and reusable tables keyed by a two-party
//! elliptic-curve PRF whose access pattern is perturbed with geometric noise.

pub mod activations;
pub mod csp_offline;
pub mod dxpriv;
pub mod error;
pub mod ml_train;
pub mod net;
pub mod ring64;
pub mod sharing;
pub mod tables_multi;
pub mod tables_single;

pub use error::{Error, Result};
