//! Spatio-temporal graph forecasting of traffic series with missing values.
//!
//! The crate covers data handling ([`data`], [`masking`], [`synthetic`]),
//! the forecaster ([`memory`], [`graph`], [`stblock`], [`model`],
//! [`train`], [`checkpoint`]), comparison [`baselines`], evaluation
//! ([`eval`]) and run plumbing ([`config`], [`bundle`], [`experiment`]).

pub mod baselines;
pub mod bundle;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod graph;
pub mod masking;
pub mod memory;
pub mod model;
pub mod params;
pub mod stblock;
pub mod synthetic;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
