//! Streaming projection and geometric auditing of neural-network hidden
//! representations across training epochs.

pub mod audit;
pub mod error;
pub mod graph;
pub mod ingest;
pub mod memory;
pub mod metrics;
pub mod neighbors;
pub mod par;
pub mod pipeline;
pub mod plot;
pub mod projection;
pub mod sampling;
pub mod theory;

pub use error::{Error, Result};
