//! Desk-scale promptable segmentation with multi-box co-training.
//!
//! A small SAM-style network (frozen image encoder, box-prompt encoder,
//! two-way mask decoder) is fine-tuned with several box prompts per image,
//! backpropagating only the worst per-prompt Dice + cross-entropy loss.
//! The crate covers the full loop: synthetic organ/lesion data generation,
//! training, IoU/DSC/NSD/ASSD evaluation, and arm-vs-arm comparison reports.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::{BBox, Mask2D, PerturbSpec};
pub use tensor::{Scalar, Tensor};
