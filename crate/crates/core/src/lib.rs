//! Track data model, synthetic motion generator, data pipeline and metrics.

pub mod bundle;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod pipeline;
pub mod synth;
pub mod tracks;

pub use error::{Error, Result};
pub use tracks::{BBox, Conditioning, DiffusionTarget, MotionBucket, TrackSet};
