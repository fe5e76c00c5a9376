//! Battery energy storage bidding lab: a spot + contingency-reserve market
//! simulator, a soft actor-critic agent with a temporal attention feature
//! extractor, dynamic-programming dispatch oracles, and interpretability
//! probes, all on a small self-contained autodiff substrate.

pub mod error;
pub mod tensor;
pub mod store;
pub mod graph;
pub mod gradcheck;
pub mod data;
pub mod battery;
pub mod env;
pub mod nn;
pub mod extractor;
pub mod sac;
pub mod baselines;
pub mod interpret;
pub mod report;
pub mod config;

pub use error::{Error, Result};
