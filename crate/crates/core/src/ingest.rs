//! Dataset ingestion: ISIC-layout loading, nearest-neighbour resizing,
//! intensity normalization, classical augmentation and manifests.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec;
use crate::imageio;

/// Default side length images and masks are resized to.
pub const DEFAULT_SIDE: usize = 128;
/// Grayscale mask values at or above this become foreground.
pub const MASK_THRESHOLD: u8 = 128;

/// Planar (CHW) floating-point image with every value in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::Argument(format!(
                "image must be non-empty with 1 or 3 channels, got {height}x{width}x{channels}"
            )));
        }
        if values.len() != height * width * channels {
            return Err(Error::Argument(format!(
                "{} values for a {height}x{width}x{channels} image",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::Validation(format!("image value {v} outside [-1, 1]")));
        }
        Ok(ImageTensor {
            height,
            width,
            channels,
            values,
        })
    }

    /// Constant image.
    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.values[(c * self.height + y) * self.width + x]
    }

    /// Values widened to `f64`, CHW order.
    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    /// Clamp `[−1, 1]` values coming out of a network into an image.
    pub fn from_f64(height: usize, width: usize, channels: usize, values: &[f64]) -> Result<Self> {
        let v = values.iter().map(|&x| (x as f32).clamp(-1.0, 1.0)).collect();
        Self::new(height, width, channels, v)
    }

    pub fn max_abs_diff(&self, other: &ImageTensor) -> f32 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// H×W mask with every value exactly 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::Argument(format!(
                "{} values for a {height}x{width} mask",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::Validation(format!("mask value {v} is not binary")));
        }
        Ok(BinaryMask {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            values: vec![0; height * width],
        }
    }

    /// Build from a predicate over `(row, col)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(y, x) as u8);
            }
        }
        BinaryMask {
            height,
            width,
            values,
        }
    }

    /// Binarize grayscale values at [`MASK_THRESHOLD`].
    pub fn from_gray(height: usize, width: usize, gray: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            gray.iter().map(|&g| (g >= MASK_THRESHOLD) as u8).collect(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn foreground_count(&self) -> usize {
        self.values.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.foreground_count() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    /// Number of pixels on which two same-sized masks differ.
    pub fn disagreement(&self, other: &BinaryMask) -> usize {
        self.values
            .iter()
            .zip(&other.values)
            .filter(|(a, b)| a != b)
            .count()
    }
}

/// Where a training sample came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Real,
    Synthetic,
    ClassicalAugmented,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Argument(format!("unknown split `{other}`"))),
        }
    }
}

/// Image/mask files of a sample, relative to the manifest's source path.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleFiles {
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// An (image, mask) training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub image: ImageTensor,
    pub mask: BinaryMask,
    pub provenance: Provenance,
    pub files: Option<SampleFiles>,
}

impl PairedSample {
    pub fn new(id: impl Into<String>, image: ImageTensor, mask: BinaryMask, provenance: Provenance) -> Result<Self> {
        let id = id.into();
        if image.height() != mask.height() || image.width() != mask.width() {
            return Err(Error::Argument(format!(
                "sample `{id}`: image {}x{} vs mask {}x{}",
                image.height(),
                image.width(),
                mask.height(),
                mask.width()
            )));
        }
        Ok(PairedSample {
            id,
            image,
            mask,
            provenance,
            files: None,
        })
    }

    /// SHA-256 over dimensions, image values (LE `f32`) and mask bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for d in [self.image.height(), self.image.width(), self.image.channels()] {
            h.update((d as u64).to_le_bytes());
        }
        for v in self.image.values() {
            h.update(v.to_le_bytes());
        }
        h.update(self.mask.values());
        hex::encode(h.finalize())
    }
}

/// An ordered, duplicate-free set of samples for one split.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub samples: Vec<PairedSample>,
    pub split: Split,
    pub seed: u64,
    pub source_path: PathBuf,
}

impl DatasetManifest {
    pub fn new(samples: Vec<PairedSample>, split: Split, seed: u64, source_path: PathBuf) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Validation(format!("duplicate sample id `{}`", s.id)));
            }
        }
        Ok(DatasetManifest {
            samples,
            split,
            seed,
            source_path,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.id.as_str()).collect()
    }

    pub fn count(&self, provenance: Provenance) -> usize {
        self.samples.iter().filter(|s| s.provenance == provenance).count()
    }
}

/// Options for [`load_dataset`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IngestOptions {
    pub side: usize,
    pub seed: u64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            side: DEFAULT_SIDE,
            seed: 0,
        }
    }
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];
const MASK_SUFFIX: &str = "_segmentation";

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Load `<root>/images/<id>.{png,jpg}` paired with `<root>/masks/<id>_segmentation.png`,
/// resized to `opts.side` and normalized. Samples are ordered by id.
pub fn load_dataset(root: &Path, split: Split, opts: IngestOptions) -> Result<DatasetManifest> {
    if opts.side == 0 {
        return Err(Error::Argument("side must be at least 1".into()));
    }
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    for dir in [&images_dir, &masks_dir] {
        if !dir.is_dir() {
            return Err(Error::Config(format!("missing dataset directory {}", dir.display())));
        }
    }
    let mut images: BTreeMap<String, PathBuf> = BTreeMap::new();
    for p in list_dir(&images_dir)? {
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if images.insert(id.clone(), p).is_some() {
            return Err(Error::Validation(format!("image id `{id}` present with several extensions")));
        }
    }
    if images.is_empty() {
        return Err(Error::Config(format!("no images found in {}", images_dir.display())));
    }
    let mut masks: BTreeMap<String, PathBuf> = BTreeMap::new();
    for p in list_dir(&masks_dir)? {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        if let Some(id) = stem.strip_suffix(MASK_SUFFIX) {
            masks.insert(id.to_string(), p);
        }
    }
    if let Some(id) = images.keys().find(|id| !masks.contains_key(*id)) {
        return Err(Error::Pairing { id: id.clone() });
    }
    if let Some(id) = masks.keys().find(|id| !images.contains_key(*id)) {
        return Err(Error::Pairing { id: id.clone() });
    }
    let entries: Vec<(String, PathBuf, PathBuf)> = images
        .into_iter()
        .map(|(id, img)| {
            let mask = masks[&id].clone();
            (id, img, mask)
        })
        .collect();
    let loaded = exec::map_slice(&entries, |(id, img, mask)| -> Result<PairedSample> {
        let image = resize_nearest(&imageio::read_image(img)?, opts.side)?;
        let mask_m = resize_nearest(&imageio::read_mask(mask)?, opts.side)?;
        let mut s = PairedSample::new(id.clone(), image, mask_m, Provenance::Real)?;
        s.files = Some(SampleFiles {
            image: img.strip_prefix(root).unwrap_or(img).to_path_buf(),
            mask: mask.strip_prefix(root).unwrap_or(mask).to_path_buf(),
        });
        Ok(s)
    });
    let samples = loaded.into_iter().collect::<Result<Vec<_>>>()?;
    DatasetManifest::new(samples, split, opts.seed, root.to_path_buf())
}

/// Something with square-resizable pixels.
pub trait Raster: Sized {
    fn dims(&self) -> (usize, usize);
    /// Build a `height × width` copy whose pixel `(y, x)` is source pixel `pick(y, x)`.
    fn remap(&self, height: usize, width: usize, pick: impl Fn(usize, usize) -> (usize, usize)) -> Self;
}

impl Raster for ImageTensor {
    fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn remap(&self, height: usize, width: usize, pick: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        let mut values = Vec::with_capacity(height * width * self.channels);
        for c in 0..self.channels {
            for y in 0..height {
                for x in 0..width {
                    let (sy, sx) = pick(y, x);
                    values.push(self.get(c, sy, sx));
                }
            }
        }
        ImageTensor {
            height,
            width,
            channels: self.channels,
            values,
        }
    }
}

impl Raster for BinaryMask {
    fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn remap(&self, height: usize, width: usize, pick: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        BinaryMask::from_fn(height, width, |y, x| {
            let (sy, sx) = pick(y, x);
            self.get(sy, sx) == 1
        })
    }
}

/// Center-aligned nearest-neighbour source index: `floor((dst + 0.5)·src/dst)`.
pub fn nearest_index(dst: usize, src_size: usize, dst_size: usize) -> usize {
    let s = ((dst as f64 + 0.5) * src_size as f64 / dst_size as f64).floor() as usize;
    s.min(src_size - 1)
}

/// Resize to `side × side` by nearest-neighbour sampling.
pub fn resize_nearest<R: Raster>(input: &R, side: usize) -> Result<R> {
    if side == 0 {
        return Err(Error::Argument("resize side must be at least 1".into()));
    }
    let (h, w) = input.dims();
    let rows: Vec<usize> = (0..side).map(|y| nearest_index(y, h, side)).collect();
    let cols: Vec<usize> = (0..side).map(|x| nearest_index(x, w, side)).collect();
    Ok(input.remap(side, side, |y, x| (rows[y], cols[x])))
}

/// Map one 8-bit intensity to `[-1, 1]`: `v / 127.5 − 1`.
pub fn normalize_value(v: u8) -> f32 {
    (v as f64 / 127.5 - 1.0) as f32
}

/// Inverse of [`normalize_value`], rounding to the nearest level.
pub fn denormalize_value(v: f32) -> u8 {
    (((v as f64).clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Normalize a planar (CHW) raw 8-bit image.
pub fn normalize_intensity(raw: &[u16], height: usize, width: usize, channels: usize) -> Result<ImageTensor> {
    if let Some(v) = raw.iter().find(|&&v| v > 255) {
        return Err(Error::Validation(format!("raw intensity {v} exceeds 8-bit range")));
    }
    ImageTensor::new(
        height,
        width,
        channels,
        raw.iter().map(|&v| normalize_value(v as u8)).collect(),
    )
}

/// Spatial transforms available for classical augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AugmentOp {
    /// Counter-clockwise rotation by `k` quarter turns.
    Rotate90(u8),
    FlipHorizontal,
    FlipVertical,
    /// One of the seven non-identity rotations/flips, drawn from the seed.
    Random,
}

impl AugmentOp {
    const NON_IDENTITY: [(u8, bool); 7] = [(1, false), (2, false), (3, false), (0, true), (1, true), (2, true), (3, true)];

    /// (quarter turns, then horizontal flip?) pair equivalent to this op.
    fn resolve(self, rng: &mut ChaCha8Rng) -> (u8, bool) {
        match self {
            AugmentOp::Rotate90(k) => (k % 4, false),
            AugmentOp::FlipHorizontal => (0, true),
            // vertical flip = horizontal flip after a half turn
            AugmentOp::FlipVertical => (2, true),
            AugmentOp::Random => Self::NON_IDENTITY[rng.random_range(0..Self::NON_IDENTITY.len())],
        }
    }
}

fn transform_name((k, flip): (u8, bool)) -> String {
    match (k, flip) {
        (0, true) => "fliph".into(),
        (2, true) => "flipv".into(),
        (k, false) => format!("rot{}", 90 * k as u32),
        (k, true) => format!("rot{}-fliph", 90 * k as u32),
    }
}

/// Source pixel for output `(y, x)` after `k` CCW quarter turns then an optional
/// horizontal flip, on an `n × n` square.
fn d4_source(n: usize, (k, flip): (u8, bool), y: usize, x: usize) -> (usize, usize) {
    let x = if flip { n - 1 - x } else { x };
    // inverse of k CCW rotations = k CW rotations applied to the output coordinate
    let (mut sy, mut sx) = (y, x);
    for _ in 0..k {
        // CCW rotation maps source (r, c) → (n−1−c, r); invert: (y, x) ← (x, n−1−y)
        (sy, sx) = (sx, n - 1 - sy);
    }
    (sy, sx)
}

fn apply_d4<R: Raster>(r: &R, t: (u8, bool)) -> R {
    let (h, w) = r.dims();
    debug_assert_eq!(h, w);
    r.remap(h, w, |y, x| d4_source(h, t, y, x))
}

/// One augmented copy of `sample` per entry of `ops`; image and mask receive
/// the same transform.
pub fn classical_augment(sample: &PairedSample, ops: &[AugmentOp], seed: u64) -> Result<Vec<PairedSample>> {
    let (h, w) = sample.mask.dims();
    if h != w {
        return Err(Error::Argument(format!("classical augmentation needs square samples, got {h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ops.iter()
        .enumerate()
        .map(|(j, op)| {
            let t = op.resolve(&mut rng);
            PairedSample::new(
                format!("{}-aug{j}-{}", sample.id, transform_name(t)),
                apply_d4(&sample.image, t),
                apply_d4(&sample.mask, t),
                Provenance::ClassicalAugmented,
            )
        })
        .collect()
}

/// Carve a seeded random `fraction` of `manifest` into a validation split.
/// Both halves keep id order.
pub fn split_validation(manifest: &DatasetManifest, fraction: f64, seed: u64) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("validation fraction {fraction} outside [0, 1)")));
    }
    let n = manifest.len();
    let n_val = ((n as f64) * fraction).round() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; n];
    for &i in &idx[..n_val] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (s, v) in manifest.samples.iter().zip(is_val) {
        if v { &mut val } else { &mut train }.push(s.clone());
    }
    Ok((
        DatasetManifest::new(train, manifest.split, seed, manifest.source_path.clone())?,
        DatasetManifest::new(val, Split::Validation, seed, manifest.source_path.clone())?,
    ))
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    format: String,
    version: u32,
    split: Split,
    seed: u64,
    source_path: PathBuf,
}

/// One line of a persisted manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub provenance: Provenance,
    pub split: Split,
    pub checksum: String,
}

const MANIFEST_FORMAT: &str = "lesionsynth-manifest";

/// Persist as JSON lines: a header line followed by one [`SampleRecord`] per
/// sample. Every sample must reference files.
pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let header = ManifestHeader {
        format: MANIFEST_FORMAT.into(),
        version: 1,
        split: manifest.split,
        seed: manifest.seed,
        source_path: manifest.source_path.clone(),
    };
    let mut text = serde_json::to_string(&header).expect("header serializes");
    text.push('\n');
    for s in &manifest.samples {
        let files = s
            .files
            .as_ref()
            .ok_or_else(|| Error::Argument(format!("sample `{}` has no backing files", s.id)))?;
        let rec = SampleRecord {
            id: s.id.clone(),
            image: files.image.clone(),
            mask: files.mask.clone(),
            provenance: s.provenance,
            split: manifest.split,
            checksum: s.checksum(),
        };
        text.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        text.push('\n');
    }
    crate::fsutil::write_atomic(path, text.as_bytes())
}

/// Records of a persisted manifest without decoding any image.
pub fn read_manifest_records(path: &Path) -> Result<(Split, u64, PathBuf, Vec<SampleRecord>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: ManifestHeader = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{} is empty", path.display())))
        .and_then(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))?;
    if header.format != MANIFEST_FORMAT || header.version != 1 {
        return Err(Error::Format(format!("{} is not a version-1 manifest", path.display())));
    }
    let records = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect::<Result<Vec<SampleRecord>>>()?;
    Ok((header.split, header.seed, header.source_path, records))
}

/// Load a persisted manifest, decoding and resizing every referenced file.
pub fn read_manifest(path: &Path, side: usize) -> Result<DatasetManifest> {
    let (split, seed, source, records) = read_manifest_records(path)?;
    let base = if source.is_absolute() {
        source.clone()
    } else {
        path.parent().unwrap_or(Path::new(".")).join(&source)
    };
    let loaded = exec::map_slice(&records, |r| -> Result<PairedSample> {
        let image = resize_nearest(&imageio::read_image(&base.join(&r.image))?, side)?;
        let mask = resize_nearest(&imageio::read_mask(&base.join(&r.mask))?, side)?;
        let mut s = PairedSample::new(r.id.clone(), image, mask, r.provenance)?;
        s.files = Some(SampleFiles {
            image: r.image.clone(),
            mask: r.mask.clone(),
        });
        Ok(s)
    });
    DatasetManifest::new(loaded.into_iter().collect::<Result<_>>()?, split, seed, source)
}

/// Write every sample of `manifest` as PNG files under `dir` (`images/<id>.png`,
/// `masks/<id>_segmentation.png`) plus `dir/manifest.jsonl`, and return the
/// manifest as re-read from disk (8-bit quantized).
pub fn save_samples(manifest: &DatasetManifest, dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    fs::create_dir_all(dir.join("masks")).map_err(|e| Error::io(dir, e))?;
    let mut out = manifest.clone();
    for s in &mut out.samples {
        let image = PathBuf::from("images").join(format!("{}.png", s.id));
        let mask = PathBuf::from("masks").join(format!("{}{MASK_SUFFIX}.png", s.id));
        imageio::write_image(&s.image, &dir.join(&image))?;
        imageio::write_mask(&s.mask, &dir.join(&mask))?;
        s.files = Some(SampleFiles { image, mask });
    }
    out.source_path = PathBuf::from(".");
    let path = dir.join("manifest.jsonl");
    let side = manifest.samples.first().map_or(DEFAULT_SIDE, |s| s.mask.height());
    // write once to get record paths; re-read for quantized values, then rewrite checksums
    write_manifest(&out, &path)?;
    let reread = read_manifest(&path, side)?;
    write_manifest(&reread, &path)?;
    Ok(reread)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn mask_from(rows: &[&[u8]]) -> BinaryMask {
        BinaryMask::new(rows.len(), rows[0].len(), rows.concat()).unwrap()
    }

    #[test]
    fn normalize_endpoints_and_midpoint() {
        assert_eq!(normalize_value(0), -1.0);
        assert_eq!(normalize_value(255), 1.0);
        assert!((normalize_value(102) as f64 + 0.2).abs() < 1e-7);
        assert!(normalize_intensity(&[0, 256], 1, 2, 1).is_err());
    }

    #[test]
    fn normalize_is_monotone_bijection() {
        let vals: Vec<f32> = (0..=255u8).map(normalize_value).collect();
        assert!(vals.windows(2).all(|w| w[0] < w[1]));
        for v in 0..=255u8 {
            assert_eq!(denormalize_value(normalize_value(v)), v);
        }
    }

    #[test]
    fn resize_identity_at_same_side() {
        let m = BinaryMask::from_fn(8, 8, |y, x| (y * 3 + x) % 5 == 0);
        assert_eq!(resize_nearest(&m, 8).unwrap(), m);
    }

    #[test]
    fn resize_2x2_upsamples_into_blocks() {
        let img = ImageTensor::new(2, 2, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let up = resize_nearest(&img, 4).unwrap();
        #[rustfmt::skip]
        let want = [
            0.1, 0.1, 0.2, 0.2,
            0.1, 0.1, 0.2, 0.2,
            0.3, 0.3, 0.4, 0.4,
            0.3, 0.3, 0.4, 0.4,
        ];
        assert_eq!(up.values(), &want);
    }

    #[test]
    fn resize_checkerboard_down_follows_index_map() {
        let m = BinaryMask::from_fn(4, 4, |y, x| (y + x) % 2 == 0);
        let down = resize_nearest(&m, 2).unwrap();
        // index map for 4 → 2: dst 0 → floor(0.5·2) = 1, dst 1 → floor(1.5·2) = 3
        let oracle = BinaryMask::from_fn(2, 2, |y, x| m.get([1, 3][y], [1, 3][x]) == 1);
        assert_eq!(down, oracle);
        assert!(down.values().iter().all(|&v| v <= 1));
        assert!(resize_nearest(&m, 0).is_err());
    }

    #[test]
    fn flips_and_rotations_compose_to_identity() {
        let m = mask_from(&[&[1, 1, 0], &[0, 1, 0], &[0, 0, 0]]);
        let img = ImageTensor::new(3, 3, 1, (0..9).map(|v| v as f32 / 10.0).collect()).unwrap();
        let s = PairedSample::new("a", img, m, Provenance::Real).unwrap();
        let once = &classical_augment(&s, &[AugmentOp::FlipHorizontal], 0).unwrap()[0];
        let twice = &classical_augment(once, &[AugmentOp::FlipHorizontal], 0).unwrap()[0];
        assert_eq!(twice.mask, s.mask);
        assert_eq!(twice.image, s.image);
        let mut r = s.clone();
        for _ in 0..4 {
            r = classical_augment(&r, &[AugmentOp::Rotate90(1)], 0).unwrap().remove(0);
        }
        assert_eq!(r.mask, s.mask);
        assert_eq!(r.image, s.image);
        assert_eq!(once.provenance, Provenance::ClassicalAugmented);
        assert!(classical_augment(&s, &[], 0).unwrap().is_empty());
    }

    #[test]
    fn rotate90_is_counter_clockwise() {
        let m = mask_from(&[&[1, 0], &[0, 0]]);
        let s = PairedSample::new("a", ImageTensor::filled(2, 2, 1, 0.0).unwrap(), m, Provenance::Real).unwrap();
        let r = classical_augment(&s, &[AugmentOp::Rotate90(1)], 0).unwrap().remove(0);
        // top-left moves to bottom-left under a CCW quarter turn
        assert_eq!(r.mask, mask_from(&[&[0, 0], &[1, 0]]));
        let v = classical_augment(&s, &[AugmentOp::FlipVertical], 0).unwrap().remove(0);
        assert_eq!(v.mask, mask_from(&[&[0, 0], &[1, 0]]));
        let h = classical_augment(&s, &[AugmentOp::FlipHorizontal], 0).unwrap().remove(0);
        assert_eq!(h.mask, mask_from(&[&[0, 1], &[0, 0]]));
    }

    #[test]
    fn random_op_is_seeded() {
        let m = BinaryMask::from_fn(5, 5, |y, x| y < 2 && x < 3);
        let s = PairedSample::new("a", ImageTensor::filled(5, 5, 3, 0.0).unwrap(), m, Provenance::Real).unwrap();
        let ops = [AugmentOp::Random; 4];
        assert_eq!(classical_augment(&s, &ops, 9).unwrap(), classical_augment(&s, &ops, 9).unwrap());
    }

    proptest! {
        #[test]
        fn augmentation_preserves_foreground(bits in proptest::collection::vec(0u8..2, 36), seed in 0u64..1000) {
            let m = BinaryMask::new(6, 6, bits).unwrap();
            let s = PairedSample::new("p", ImageTensor::filled(6, 6, 1, 0.0).unwrap(), m, Provenance::Real).unwrap();
            let ops = [AugmentOp::FlipVertical, AugmentOp::FlipHorizontal, AugmentOp::Rotate90(3), AugmentOp::Random];
            for a in classical_augment(&s, &ops, seed).unwrap() {
                prop_assert_eq!(a.mask.foreground_count(), s.mask.foreground_count());
            }
        }

        #[test]
        fn resize_never_invents_values(h in 1usize..12, w in 1usize..12, side in 1usize..20, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vals: Vec<f32> = (0..h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let img = ImageTensor::new(h, w, 1, vals.clone()).unwrap();
            let out = resize_nearest(&img, side).unwrap();
            prop_assert_eq!(out.height(), side);
            for v in out.values() {
                prop_assert!(vals.contains(v));
            }
        }
    }
}
