//! Recurrent semantic instance segmentation.
//!
//! A convolutional encoder builds a feature pyramid once per image; a stack
//! of ConvLSTM layers then emits one instance per time step (soft mask, box,
//! class distribution, stop score). Training pairs predictions with ground
//! truth through a minimum-cost assignment. The crate also carries the
//! evaluation metrics and the object-ordering / error analyses.

pub mod analysis;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod hungarian;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod parallel;
pub mod params;
pub mod plot;
pub mod tensor;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use types::{
    binarize, box_from_mask, center_of_mass, AssignmentMatrix, BBox, BinaryMask, GroundTruthInstance,
    ImageSample, InstancePrediction, PredictionSequence, SoftMask,
};
