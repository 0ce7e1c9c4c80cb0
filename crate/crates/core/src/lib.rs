pub mod body;
pub mod detections;
pub mod error;
pub mod geometry;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod pipeline;
pub mod robust;
pub mod solver;
pub mod sync;
pub mod synth;

pub use error::{Error, Result};
