//! Multi-class visual anomaly detection via structural teacher-student
//! normality learning.
//!
//! A frozen teacher and a trainable student produce matched feature
//! pyramids; the student is optimized with a four-part structural
//! distillation objective (channel distance, spatial KL, intra- and
//! inter-affinity) and carries a central residual aggregation module
//! (CRAM) after each block to compact its normal representation. At
//! inference, feature-distance and affinity-error maps fuse into a
//! per-pixel anomaly map whose maximum is the image-level score.

pub mod autodiff;
pub mod error;

pub use error::{Result, SnlError};
