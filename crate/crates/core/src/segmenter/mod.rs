//! Baseline U-Net segmentation network, training regimes and prediction.

mod compose;
mod train;

pub use compose::{compose_regime_dataset, Composition, CompositionLog, CompositionOptions};
pub use train::{
    segmentation_loss, train_segmenter, SegEpochRecord, SegTrainOptions, SegTrainOutcome,
};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::fsutil;
use crate::ingest::{BinaryMask, ImageTensor};
use crate::nn::params::{read_u32, read_u64, take};
use crate::nn::{Activation, Block, Conv, ForwardCtx, Graph, Norm, ParamStore, Var};
use crate::translator::image_input;

/// Training-set composition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Regime {
    #[serde(alias = "noaug")]
    NoAug,
    #[serde(alias = "classic")]
    ClassicAug,
    #[serde(alias = "m2l")]
    Mask2LesionAug,
    #[serde(alias = "all")]
    AllAug,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::NoAug, Regime::ClassicAug, Regime::Mask2LesionAug, Regime::AllAug];

    pub fn label(self) -> &'static str {
        match self {
            Regime::NoAug => "NoAug",
            Regime::ClassicAug => "ClassicAug",
            Regime::Mask2LesionAug => "Mask2LesionAug",
            Regime::AllAug => "AllAug",
        }
    }

    /// Short command-line name.
    pub fn short(self) -> &'static str {
        match self {
            Regime::NoAug => "noaug",
            Regime::ClassicAug => "classic",
            Regime::Mask2LesionAug => "m2l",
            Regime::AllAug => "all",
        }
    }

    pub fn uses_classical(self) -> bool {
        matches!(self, Regime::ClassicAug | Regime::AllAug)
    }

    pub fn uses_synthetic(self) -> bool {
        matches!(self, Regime::Mask2LesionAug | Regime::AllAug)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let l = s.to_ascii_lowercase();
        Regime::ALL
            .into_iter()
            .find(|r| r.short() == l || r.label().to_ascii_lowercase() == l)
            .ok_or_else(|| Error::Argument(format!("unknown regime `{s}` (expected noaug, classic, m2l or all)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterConfig {
    pub side: usize,
    /// Channels of the first level; doubled at every level below.
    pub base_channels: usize,
    /// Number of 2x2 poolings.
    pub depth: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig {
            side: 128,
            base_channels: 16,
            depth: 4,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 50,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("segmenter batch_size must be at least 1".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold must be in (0, 1), got {}", self.threshold));
        }
        if self.base_channels == 0 {
            return bad("segmenter base_channels must be positive".into());
        }
        if self.side == 0 || !self.side.is_multiple_of(1 << self.depth) {
            return bad(format!(
                "segmenter side {} must be a positive multiple of 2^depth = {}",
                self.side,
                1usize << self.depth
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        Ok(())
    }

    /// Channels at `level` (0 = full resolution).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Two 3x3 conv + BN + ReLU blocks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DoubleConv {
    pub first: Block,
    pub second: Block,
}

impl DoubleConv {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let mut block = |suffix: &str, i: usize| {
            let name = format!("{name}.{suffix}");
            let std = (2.0 / (9 * i) as f64).sqrt();
            Block {
                conv: Conv::new(store, &name, i, c_out, 3, 1, 1, false, false, std, rng),
                norm: Some(Norm::new(store, &format!("{name}.bn"), c_out)),
                dropout: false,
                activation: Activation::Relu,
            }
        };
        let first = block("a", c_in);
        let second = block("b", c_out);
        DoubleConv { first, second }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: &mut ForwardCtx) -> Var {
        let h = self.first.forward(g, store, x, ctx);
        self.second.forward(g, store, h, ctx)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmenterArch {
    /// `down[depth]` is the bottleneck.
    pub down: Vec<DoubleConv>,
    /// Innermost first: 2x2 transposed conv then a double conv on the
    /// concatenation with the matching skip.
    pub up: Vec<(Conv, DoubleConv)>,
    pub head: Conv,
}

impl SegmenterArch {
    fn new(store: &mut ParamStore, cfg: &SegmenterConfig, rng: &mut impl Rng) -> Self {
        let ch = |l| cfg.channels(l);
        let down = (0..=cfg.depth)
            .map(|l| {
                let c_in = if l == 0 { 3 } else { ch(l - 1) };
                DoubleConv::new(store, &format!("seg.down{l}"), c_in, ch(l), rng)
            })
            .collect();
        let up = (0..cfg.depth)
            .rev()
            .map(|l| {
                let std = (2.0 / ch(l + 1) as f64).sqrt();
                let t = Conv::new(store, &format!("seg.up{l}.t"), ch(l + 1), ch(l), 2, 2, 0, true, true, std, rng);
                (t, DoubleConv::new(store, &format!("seg.up{l}"), 2 * ch(l), ch(l), rng))
            })
            .collect();
        let std = (1.0 / ch(0) as f64).sqrt();
        let head = Conv::new(store, "seg.head", ch(0), 1, 1, 1, 0, true, false, std, rng);
        SegmenterArch { down, up, head }
    }

    /// `[batch, 3, s, s]` → logits `[batch, 1, s, s]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: &mut ForwardCtx) -> Var {
        let mut skips = Vec::with_capacity(self.down.len());
        let mut h = x;
        for (l, d) in self.down.iter().enumerate() {
            if l > 0 {
                h = g.max_pool2(h);
            }
            h = d.forward(g, store, h, ctx);
            skips.push(h);
        }
        let depth = self.down.len() - 1;
        for (j, (t, d)) in self.up.iter().enumerate() {
            let u = t.forward(g, store, h);
            let cat = g.concat(u, skips[depth - 1 - j]);
            h = d.forward(g, store, cat, ctx);
        }
        self.head.forward(g, store, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmenterModel {
    pub config: SegmenterConfig,
    pub store: ParamStore,
    pub arch: SegmenterArch,
    pub trained_epochs: usize,
}

pub fn build_segmenter(config: &SegmenterConfig) -> Result<SegmenterModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new();
    let arch = SegmenterArch::new(&mut store, config, &mut rng);
    Ok(SegmenterModel {
        config: config.clone(),
        store,
        arch,
        trained_epochs: 0,
    })
}

/// Closed-form trainable parameter count.
pub fn segmenter_param_count(config: &SegmenterConfig) -> usize {
    let ch = |l| config.channels(l);
    let double = |i: usize, o: usize| 9 * i * o + 2 * o + 9 * o * o + 2 * o;
    let mut n = double(3, ch(0));
    for l in 1..=config.depth {
        n += double(ch(l - 1), ch(l));
    }
    for l in 0..config.depth {
        n += 4 * ch(l + 1) * ch(l) + ch(l) + double(2 * ch(l), ch(l));
    }
    n + ch(0) + 1
}

impl SegmenterModel {
    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    fn check_image(&self, image: &ImageTensor) -> Result<()> {
        let s = self.config.side;
        if image.height() != s || image.width() != s || image.channels() != 3 {
            return Err(Error::Argument(format!(
                "image is {}x{}x{}, segmenter expects {s}x{s}x3",
                image.height(),
                image.width(),
                image.channels()
            )));
        }
        Ok(())
    }

    /// Foreground probabilities, row-major, using running statistics.
    pub fn probabilities(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        self.check_image(image)?;
        let mut g = Graph::new();
        let x = g.input(image_input(&[image]));
        let mut ctx = ForwardCtx::new(false, None, 1.0);
        let logits = self.arch.forward(&mut g, &self.store, x, &mut ctx);
        Ok(g.value(logits).data().iter().map(|&z| crate::nn::graph::sigmoid(z)).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        let cfg = serde_json::to_string(&self.config).expect("config serializes");
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.trained_epochs as u64).to_le_bytes());
        self.store.write_f32(&mut out);
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let b = &mut bytes;
        if take(b, 4)? != MODEL_MAGIC {
            return Err(Error::Format("not a segmenter model file (bad magic)".into()));
        }
        let v = read_u32(b)?;
        if v != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported segmenter model version {v}")));
        }
        let n = read_u32(b)? as usize;
        let text = std::str::from_utf8(take(b, n)?).map_err(|e| Error::Format(e.to_string()))?;
        let config: SegmenterConfig = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        let mut model = build_segmenter(&config)?;
        model.trained_epochs = read_u64(b)? as usize;
        model.store.read_f32(b)?;
        if !b.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes in model file", b.len())));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub const MODEL_MAGIC: &[u8; 4] = b"M2LS";
pub const MODEL_VERSION: u32 = 1;

/// `p ≥ threshold` → foreground.
pub fn threshold_probabilities(probs: &[f64], height: usize, width: usize, threshold: f64) -> Result<BinaryMask> {
    BinaryMask::new(height, width, probs.iter().map(|&p| (p >= threshold) as u8).collect())
}

pub fn predict_mask(model: &SegmenterModel, image: &ImageTensor, threshold: f64) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Argument(format!("threshold must be in (0, 1), got {threshold}")));
    }
    let probs = model.probabilities(image)?;
    threshold_probabilities(&probs, image.height(), image.width(), threshold)
}

/// [`predict_mask`] over many images, in input order.
pub fn predict_masks(model: &SegmenterModel, images: &[&ImageTensor], threshold: f64) -> Vec<Result<BinaryMask>> {
    exec::map_slice(images, |img| predict_mask(model, img, threshold))
}
