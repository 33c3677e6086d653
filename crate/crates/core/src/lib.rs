//! Spatiotemporal encoding, learned instance-level prompt routing and
//! language-model bridging for urban transportation forecasting and taxi
//! dispatch.

pub mod error;
pub mod cli;
pub mod data_io;
pub mod dispatch_sim;
pub mod gradcheck;
pub mod graph;
pub mod heads;
pub mod llm_bridge;
pub mod losses_metrics;
pub mod params;
pub mod prompt_router;
pub mod st_encoder;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
