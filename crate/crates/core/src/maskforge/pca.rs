use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::ingest::BinaryMask;
use crate::nn::params::{read_f64, read_u32, take};

/// Statistical shape model over flattened binary masks.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeModel {
    pub height: usize,
    pub width: usize,
    pub n_train: usize,
    /// Per-pixel foreground frequency, row-major.
    pub mean: Vec<f64>,
    /// Orthonormal principal directions, strongest first.
    pub components: Vec<Vec<f64>>,
    /// Sample-covariance eigenvalues (divisor n − 1), non-increasing.
    pub eigenvalues: Vec<f64>,
}

const MAGIC: &[u8; 4] = b"M2SM";
const VERSION: u32 = 1;
/// Eigenvalues at or below this (relative to the largest) count as zero.
const RANK_TOL: f64 = 1e-10;

impl ShapeModel {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    /// Principal-axis coordinates of `mask` (dot products with each component
    /// after mean subtraction).
    pub fn project(&self, mask: &BinaryMask) -> Result<Vec<f64>> {
        self.check_dims(mask)?;
        let centered: Vec<f64> = mask.to_f64().iter().zip(&self.mean).map(|(v, m)| v - m).collect();
        Ok(self.components.iter().map(|c| dot(c, &centered)).collect())
    }

    /// `mean + Σ coeffᵢ · componentᵢ`.
    pub fn reconstruct(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut v = self.mean.clone();
        for (c, comp) in coeffs.iter().zip(&self.components) {
            v.iter_mut().zip(comp).for_each(|(x, p)| *x += c * p);
        }
        v
    }

    fn check_dims(&self, mask: &BinaryMask) -> Result<()> {
        if mask.height() != self.height || mask.width() != self.width {
            return Err(Error::Argument(format!(
                "mask is {}x{}, model is {}x{}",
                mask.height(),
                mask.width(),
                self.height,
                self.width
            )));
        }
        Ok(())
    }

    /// Versioned little-endian binary form.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 8 * self.mean.len() * (1 + self.k()));
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.height as u32, self.width as u32, self.n_train as u32, self.k() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.mean.iter().chain(self.components.iter().flatten()).chain(&self.eigenvalues) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let b = &mut bytes;
        if take(b, 4)? != MAGIC {
            return Err(Error::Format("not a shape model file (bad magic)".into()));
        }
        let version = read_u32(b)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported shape model version {version}")));
        }
        let height = read_u32(b)? as usize;
        let width = read_u32(b)? as usize;
        let n_train = read_u32(b)? as usize;
        let k = read_u32(b)? as usize;
        let d = height * width;
        let mut vec_of = |n: usize| -> Result<Vec<f64>> { (0..n).map(|_| read_f64(b)).collect() };
        let mean = vec_of(d)?;
        let components = (0..k).map(|_| vec_of(d)).collect::<Result<Vec<_>>>()?;
        let eigenvalues = vec_of(k)?;
        if !b.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes in shape model", b.len())));
        }
        Ok(ShapeModel {
            height,
            width,
            n_train,
            mean,
            components,
            eigenvalues,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fit a PCA shape model with up to `k` components. `k` beyond the data rank
/// is truncated (with a warning).
pub fn fit_pca_shape_model(masks: &[BinaryMask], k: usize) -> Result<ShapeModel> {
    if masks.len() < 2 {
        return Err(Error::Argument(format!("PCA needs at least 2 masks, got {}", masks.len())));
    }
    if k == 0 {
        return Err(Error::Argument("PCA needs k ≥ 1".into()));
    }
    let (h, w) = (masks[0].height(), masks[0].width());
    if let Some(m) = masks.iter().find(|m| m.height() != h || m.width() != w) {
        return Err(Error::Argument(format!("mask is {}x{}, expected {h}x{w}", m.height(), m.width())));
    }
    let n = masks.len();
    let d = h * w;
    let mut mean = vec![0.0; d];
    for m in masks {
        mean.iter_mut().zip(m.values()).for_each(|(a, &v)| *a += v as f64);
    }
    mean.iter_mut().for_each(|a| *a /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| masks[i].values()[j] as f64 - mean[j]);
    let denom = (n - 1) as f64;

    // Eigen-decompose whichever of the n×n Gram or d×d covariance is smaller.
    let (mut pairs, via_gram): (Vec<(f64, Vec<f64>)>, bool) = if n <= d {
        let gram = (&centered * centered.transpose()) / denom;
        let eig = SymmetricEigen::new(gram);
        let p = (0..n)
            .map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).iter().copied().collect()))
            .collect();
        (p, true)
    } else {
        let cov = (centered.transpose() * &centered) / denom;
        let eig = SymmetricEigen::new(cov);
        let p = (0..d)
            .map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).iter().copied().collect()))
            .collect();
        (p, false)
    };
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let top = pairs.first().map_or(0.0, |p| p.0).max(0.0);
    let rank = pairs.iter().filter(|p| p.0 > RANK_TOL * top.max(1.0)).count();
    let max_k = rank.min(n - 1).min(d);
    if k > max_k {
        log::warn!("requested {k} shape components but the data has rank {max_k}; truncating");
    }
    let k = k.min(max_k);

    let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut eigenvalues = Vec::with_capacity(k);
    for (lambda, vec) in pairs.into_iter().take(k) {
        let mut comp: Vec<f64> = if via_gram {
            // pixel-space direction Xᵀu
            (0..d)
                .map(|j| (0..n).map(|i| centered[(i, j)] * vec[i]).sum())
                .collect()
        } else {
            vec
        };
        // re-orthogonalize against earlier components for numerical hygiene
        for prev in &components {
            let p = dot(prev, &comp);
            comp.iter_mut().zip(prev).for_each(|(c, q)| *c -= p * q);
        }
        let norm = dot(&comp, &comp).sqrt();
        comp.iter_mut().for_each(|c| *c /= norm);
        // deterministic sign: largest-magnitude entry positive
        let pivot = comp.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        if pivot < 0.0 {
            comp.iter_mut().for_each(|c| *c = -*c);
        }
        components.push(comp);
        eigenvalues.push(lambda.max(0.0));
    }
    Ok(ShapeModel {
        height: h,
        width: w,
        n_train: n,
        mean,
        components,
        eigenvalues,
    })
}

/// Pre-threshold synthesis vector `mean + Σ wᵢ·√λᵢ·componentᵢ`.
pub fn pca_vector(model: &ShapeModel, weights: &BTreeMap<usize, f64>) -> Result<Vec<f64>> {
    let k = model.k();
    let mut v = model.mean.clone();
    for (&i, &wgt) in weights {
        if i >= k {
            return Err(Error::Argument(format!("component index {i} out of range (k = {k})")));
        }
        if !(wgt.abs() <= 1.0) {
            return Err(Error::Argument(format!("component weight {wgt} outside [-1, 1]")));
        }
        let s = wgt * model.eigenvalues[i].sqrt();
        v.iter_mut().zip(&model.components[i]).for_each(|(x, c)| *x += s * c);
    }
    Ok(v)
}

/// Synthesis threshold applied to [`pca_vector`] output (inclusive).
pub const PCA_THRESHOLD: f64 = 0.5;

/// Sample a binary mask from the shape model.
pub fn sample_pca_mask(model: &ShapeModel, weights: &BTreeMap<usize, f64>) -> Result<BinaryMask> {
    let v = pca_vector(model, weights)?;
    let mask = BinaryMask::new(
        model.height,
        model.width,
        v.iter().map(|&x| (x >= PCA_THRESHOLD) as u8).collect(),
    )?;
    if mask.is_empty() {
        return Err(Error::Degenerate("PCA sample thresholded to an empty mask".into()));
    }
    Ok(mask)
}
