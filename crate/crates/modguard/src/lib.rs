//! On-device NSFW moderation ensemble.
//!
//! The crate wires a body-part detector and an image classifier into a
//! single moderation pipeline: images are letterboxed and passed to the
//! detector, unsafe body-part hits flag the image directly, person boxes are
//! cropped and classified individually, and crowded or person-free images
//! fall back to whole-image classification. Model execution is isolated
//! behind the [`backends`] contract so everything here runs deterministically
//! without network weights.
//!
//! Modules:
//! - [`imageops`]: decoding, letterbox/anti-alias resizing, crops and the
//!   training-time augmentations.
//! - [`detector`]: anchor generation, box decoding, NMS and detection.
//! - [`classifier`]: scoring heads, the weighted cross-entropy loss with its
//!   gradient, and a desk-scale trainable head.
//! - [`pipeline`]: the ensemble orchestration and batch scanning.
//! - [`metrics`]: dataset manifests, confusion counts, precision/recall/F1,
//!   false-positive rate and (mean) average precision.
//! - [`backends`]: the model-invocation contract plus synthetic and
//!   record/replay implementations.

pub mod backends;
pub mod classifier;
pub mod detector;
pub mod imageops;
pub mod metrics;
pub mod pipeline;
