//! Continuous-time dynamics models (neural ODEs and neural delay ODEs) with
//! group-sparse input layers, trained so that the surviving input columns
//! expose Granger-causal structure between time series.

pub mod activation;
pub mod causality;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod ode;
pub mod optim;
pub mod rollout;
pub mod train;

pub use error::{Error, Result};
