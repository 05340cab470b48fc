//! Bus smart-card analytics: trip reconstruction, per-rider spatial and
//! temporal variability, grid fusion, spatial autocorrelation, and explained
//! gradient-boosted models of grid-level variability.

pub mod boost;
pub mod error;
pub mod explain;
pub mod features;
pub mod fusion;
pub mod geom;
pub mod geostats;
pub mod ingest;
pub mod pipeline;
pub mod synth;
pub mod variability;

pub use error::{Error, Result};
pub use geom::Point;
