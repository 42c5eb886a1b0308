//! Asynchronous local SGD for LSTM time-series prediction.
//!
//! A server holds a versioned global model; `n` client workers pull snapshots,
//! run a growing number of local SGD steps per round and push back either
//! their model or their accumulated gradient. Round sizes grow linearly so the
//! number of communication rounds scales with the square root of the total
//! iteration budget. The [`extreme`] module provides extreme-event labels, the
//! GEV distribution and the extreme value loss.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod extreme;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod schedule;
pub mod sim;

pub use error::{Error, Result};
