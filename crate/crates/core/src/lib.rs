//! Deformable 3D image registration where a learned predictor is supervised
//! by displacement fields that an instance optimizer refines on the fly.

pub mod data;
pub mod energy;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod optimizer;
pub mod predictor;
pub mod training;
pub mod volume;
pub mod warp;

pub use error::{FormatError, OfgError, Result};
pub use volume::{DisplacementField, Grid, ImagePair, LabelVolume, ScalarVolume};
