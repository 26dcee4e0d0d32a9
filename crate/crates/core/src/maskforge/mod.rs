//! Input masks for the translator: parametric shapes, elastic deformation of
//! existing masks, and a PCA statistical shape model.

mod elastic;
mod geometric;
mod pca;

use std::path::Path;

pub use elastic::{elastic_deform, DeformationField, DEFAULT_GRID};
pub use geometric::{make_geometric_mask, ShapeSpec};
pub use pca::{fit_pca_shape_model, pca_vector, sample_pca_mask, ShapeModel, PCA_THRESHOLD};

use crate::error::{Error, Result};
use crate::imageio;
use crate::ingest::{resize_nearest, BinaryMask};

/// Read a hand-drawn or exported mask, binarize at 128 and resize to `side`.
pub fn import_mask(path: &Path, side: usize) -> Result<BinaryMask> {
    resize_nearest(&imageio::read_mask(path)?, side)
}

/// Retry `f` with successive seeds until it stops returning a degenerate
/// output, giving up after `attempts` tries.
pub fn retry_degenerate<T>(seed: u64, attempts: usize, mut f: impl FnMut(u64) -> Result<T>) -> Result<T> {
    let mut last = None;
    for i in 0..attempts as u64 {
        match f(seed.wrapping_add(i.wrapping_mul(0x9E37_79B9_7F4A_7C15))) {
            Err(Error::Degenerate(m)) => last = Some(m),
            other => return other,
        }
    }
    Err(Error::Degenerate(last.unwrap_or_else(|| "no attempts made".into())))
}
