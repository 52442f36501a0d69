//! Continuous-time autoregressive recurrent networks for probabilistic
//! forecasting of irregularly measured time series, together with the
//! glucose SDE simulator, proper scoring rules, and training machinery
//! used to study them.

pub mod autodiff;
pub mod baseline;
pub mod error;
pub mod evolve;
pub mod forecast;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nets;
pub mod sim;
pub mod train;

pub use autodiff::{grad_check, GradBuffer, Graph, NodeId, ParamStore, Tensor};
pub use error::{Error, Result};
pub use forecast::ForecastDist;
