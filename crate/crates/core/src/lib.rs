//! Opponent-model-aided multi-agent actor-critic with a distributional
//! critic, on a predator-prey grid world.

pub mod cdc;
pub mod checkpoint;
pub mod config;
pub mod diffcore;
pub mod env;
pub mod error;
pub mod metrics;
pub mod oma;
pub mod oppmodel;
pub mod rng;
pub mod runlog;
pub mod selftest;
pub mod trainer;

pub use error::{Error, Result};
