//! Mask-conditioned adversarial lesion synthesis and segmentation augmentation.

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod evaluator;
pub mod experiment;
pub mod exec;
pub mod fixtures;
pub mod fsutil;
pub mod imageio;
pub mod ingest;
pub mod maskforge;
pub mod nn;
pub mod segmenter;
pub mod translator;

pub use error::{Error, Result};
