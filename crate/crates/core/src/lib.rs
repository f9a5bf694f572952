//! Multi-scale temporal action detection with scale-time features.
//!
//! The crate covers the full pipeline: synthetic data generation, a
//! convolutional backbone, scale-time feature construction and refinement,
//! anchor-free detection heads, inference with NMS, evaluation metrics and a
//! deterministic trainer.

pub mod backbone;
pub mod data;
pub mod error;
pub mod heads;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod real;
pub mod scaletime;
pub mod synth;
pub mod train;

pub use data::{
    temporal_iou, ActionInstance, AnnotationSet, Detection, DetectionSet, FeatureSequence, Interval, VideoAnnotation,
    BACKGROUND,
};
pub use error::{Error, Result};
pub use nn::ScaleTimeTensor;
pub use real::Real;
