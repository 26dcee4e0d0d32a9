//! Mask-conditioned adversarial translator: a U-Net generator mapping a
//! binary mask to an RGB image, and a patch critic scoring (mask, image)
//! pairs.

mod arch;
mod checkpoint;
mod train;

pub use arch::{CriticArch, GeneratorArch};
pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{
    synthesize, train_translator, translator_objectives, EpochRecord, ObjectiveEval, StepRecord, TrainOptions, TrainOutcome,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{BinaryMask, ImageTensor, PairedSample};
use crate::nn::{ForwardCtx, Graph, ParamStore, Tensor};

/// Clamp applied to every probability before taking a logarithm.
pub const LOG_EPS: f64 = 1e-7;
/// Smallest side the patch critic still produces a non-empty score map for.
pub const MIN_SIDE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdversarialVariant {
    /// G minimizes `log(1 − D(x, G(x)))`.
    Saturating,
    /// G minimizes `−log D(x, G(x))`.
    NonSaturating,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TranslatorConfig {
    pub side: usize,
    pub kernel: usize,
    pub stride: usize,
    pub base_channels: usize,
    pub encoder_depth: usize,
    pub leaky_slope: f64,
    pub dropout_keep: f64,
    pub dropout_decoder_only: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub l1_weight: f64,
    pub adversarial_variant: AdversarialVariant,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub init_std: f64,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TranslatorConfig {
    fn default() -> Self {
        TranslatorConfig {
            side: 128,
            kernel: 4,
            stride: 2,
            base_channels: 64,
            encoder_depth: 7,
            leaky_slope: 0.2,
            dropout_keep: 0.5,
            dropout_decoder_only: false,
            epochs: 200,
            batch_size: 1,
            l1_weight: 100.0,
            adversarial_variant: AdversarialVariant::NonSaturating,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            init_std: 0.02,
            checkpoint_every: 10,
            seed: 0,
        }
    }
}

impl TranslatorConfig {
    /// Set `side` and the matching encoder depth.
    pub fn with_side(mut self, side: usize) -> Self {
        self.side = side;
        self.encoder_depth = if side.is_power_of_two() { side.trailing_zeros() as usize } else { 0 };
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !self.side.is_power_of_two() || self.side < MIN_SIDE {
            return bad(format!("translator side must be a power of two >= {MIN_SIDE}, got {}", self.side));
        }
        if self.encoder_depth != self.side.trailing_zeros() as usize {
            return bad(format!(
                "encoder_depth {} does not reach a 1x1 bottleneck at side {} (expected {})",
                self.encoder_depth,
                self.side,
                self.side.trailing_zeros()
            ));
        }
        if self.kernel != 4 || self.stride != 2 {
            return bad(format!(
                "only kernel 4 / stride 2 blocks are supported, got kernel {} stride {}",
                self.kernel, self.stride
            ));
        }
        if self.base_channels == 0 {
            return bad("base_channels must be positive".into());
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return bad(format!("dropout_keep must be in (0, 1], got {}", self.dropout_keep));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return bad(format!("leaky_slope must be in [0, 1), got {}", self.leaky_slope));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.l1_weight >= 0.0 && self.l1_weight.is_finite()) {
            return bad(format!("l1_weight must be a non-negative number, got {}", self.l1_weight));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must be in [0, 1)".into());
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad(format!("init_std must be positive, got {}", self.init_std));
        }
        Ok(())
    }
}

/// Generator and critic sharing one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct TranslatorModel {
    pub config: TranslatorConfig,
    pub store: ParamStore,
    pub generator: GeneratorArch,
    pub critic: CriticArch,
    pub trained_epochs: usize,
}

impl TranslatorModel {
    pub fn generator_ids(&self) -> Vec<usize> {
        self.generator.param_ids()
    }

    pub fn critic_ids(&self) -> Vec<usize> {
        self.critic.param_ids()
    }

    pub fn generator_param_count(&self) -> usize {
        self.store.count(self.generator_ids())
    }

    pub fn critic_param_count(&self) -> usize {
        self.store.count(self.critic_ids())
    }

    /// Side of the critic's square score map.
    pub fn score_side(&self) -> usize {
        self.critic.output_side(self.config.side)
    }

    fn check_mask(&self, mask: &BinaryMask) -> Result<()> {
        let s = self.config.side;
        if mask.height() != s || mask.width() != s {
            return Err(Error::Argument(format!(
                "mask is {}x{}, translator expects {s}x{s}",
                mask.height(),
                mask.width()
            )));
        }
        Ok(())
    }

    fn check_image(&self, image: &ImageTensor) -> Result<()> {
        let s = self.config.side;
        if image.height() != s || image.width() != s || image.channels() != 3 {
            return Err(Error::Argument(format!(
                "image is {}x{}x{}, translator expects {s}x{s}x3",
                image.height(),
                image.width(),
                image.channels()
            )));
        }
        Ok(())
    }
}

pub fn build_translator(config: &TranslatorConfig) -> Result<TranslatorModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new();
    let generator = GeneratorArch::new(&mut store, config, &mut rng);
    let critic = CriticArch::new(&mut store, config, &mut rng);
    Ok(TranslatorModel {
        config: config.clone(),
        store,
        generator,
        critic,
        trained_epochs: 0,
    })
}

/// Closed-form generator parameter count for a configuration.
pub fn generator_param_count(config: &TranslatorConfig) -> usize {
    let depth = config.encoder_depth;
    let k2 = config.kernel * config.kernel;
    let ch = |level: usize| arch::encoder_channels(config.base_channels, level);
    let mut total = k2 * ch(1) + ch(1);
    for i in 2..depth {
        total += k2 * ch(i - 1) * ch(i) + 2 * ch(i);
    }
    total += k2 * ch(depth - 1) * ch(depth) + ch(depth);
    total += k2 * ch(depth) * ch(depth - 1) + 2 * ch(depth - 1);
    for j in 1..depth - 1 {
        total += k2 * 2 * ch(j + 1) * ch(j) + 2 * ch(j);
    }
    total + k2 * 2 * ch(1) * 3 + 3
}

/// Receptive field of a stack of `(kernel, stride)` layers.
pub fn receptive_field(layers: &[(usize, usize)]) -> Result<usize> {
    if layers.is_empty() {
        return Err(Error::Argument("empty layer descriptor".into()));
    }
    let (mut rf, mut jump) = (1usize, 1usize);
    for &(k, s) in layers {
        if s == 0 {
            return Err(Error::Argument("zero stride in layer descriptor".into()));
        }
        if k == 0 {
            return Err(Error::Argument("zero kernel in layer descriptor".into()));
        }
        rf += (k - 1) * jump;
        jump *= s;
    }
    Ok(rf)
}

/// Critic output: per-patch probabilities and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchScoreMap {
    pub side: usize,
    pub scores: Vec<f64>,
    pub mean: f64,
}

impl PatchScoreMap {
    pub fn new(side: usize, scores: Vec<f64>) -> Result<Self> {
        if side == 0 || scores.len() != side * side {
            return Err(Error::Argument(format!("{} scores for a {side}x{side} map", scores.len())));
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        Ok(PatchScoreMap { side, scores, mean })
    }

    pub fn constant(side: usize, value: f64) -> Self {
        PatchScoreMap::new(side, vec![value; side * side]).expect("non-empty map")
    }
}

/// Mask as a network input, foreground +1 and background −1.
pub(crate) fn mask_input(masks: &[&BinaryMask]) -> Tensor {
    let (h, w) = (masks[0].height(), masks[0].width());
    let data = masks
        .iter()
        .flat_map(|m| m.values().iter().map(|&v| if v == 1 { 1.0 } else { -1.0 }))
        .collect();
    Tensor::new(vec![masks.len(), 1, h, w], data)
}

pub(crate) fn image_input(images: &[&ImageTensor]) -> Tensor {
    let (h, w) = (images[0].height(), images[0].width());
    let data = images.iter().flat_map(|i| i.to_f64()).collect();
    Tensor::new(vec![images.len(), 3, h, w], data)
}

fn run_generator(model: &TranslatorModel, mask: &BinaryMask, dropout_seed: u64, ablate_inner_skip: bool) -> Result<ImageTensor> {
    model.check_mask(mask)?;
    let mut g = Graph::new();
    let x = g.input(mask_input(&[mask]));
    let rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let mut ctx = ForwardCtx::new(false, Some(rng), model.config.dropout_keep);
    let y = model.generator.forward(&mut g, &model.store, x, &mut ctx, ablate_inner_skip);
    let s = model.config.side;
    ImageTensor::from_f64(s, s, 3, g.value(y).data())
}

/// Generate an image for `mask`. Batch norm uses running statistics and
/// dropout stays active; its masks are drawn from `dropout_seed`.
pub fn generator_forward(model: &TranslatorModel, mask: &BinaryMask, dropout_seed: u64) -> Result<ImageTensor> {
    run_generator(model, mask, dropout_seed, false)
}

/// [`generator_forward`] with the innermost skip connection replaced by zeros.
pub fn generator_forward_without_inner_skip(
    model: &TranslatorModel,
    mask: &BinaryMask,
    dropout_seed: u64,
) -> Result<ImageTensor> {
    run_generator(model, mask, dropout_seed, true)
}

/// Score a (mask, image) pair with running-statistics batch norm.
pub fn discriminator_forward(model: &TranslatorModel, mask: &BinaryMask, image: &ImageTensor) -> Result<PatchScoreMap> {
    model.check_mask(mask)?;
    model.check_image(image)?;
    let mut g = Graph::new();
    let m = g.input(mask_input(&[mask]));
    let i = g.input(image_input(&[image]));
    let x = g.concat(m, i);
    let mut ctx = ForwardCtx::new(false, None, 1.0);
    let logits = model.critic.forward(&mut g, &model.store, x, &mut ctx);
    let side = g.value(logits).shape()[2];
    let scores = g.value(logits).data().iter().map(|&z| crate::nn::graph::sigmoid(z)).collect();
    PatchScoreMap::new(side, scores)
}

/// Objective values for one (real, fake) pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslatorLoss {
    pub d_objective: f64,
    pub g_objective: f64,
    pub l1_term: f64,
    pub cgan_term: f64,
}

fn clamped_log_mean(values: &[f64], complement: bool) -> f64 {
    let s: f64 = values
        .iter()
        .map(|&p| {
            let q = if complement { 1.0 - p } else { p };
            q.clamp(LOG_EPS, 1.0 - LOG_EPS).ln()
        })
        .sum();
    s / values.len() as f64
}

pub fn translator_loss(
    real: &PairedSample,
    fake_image: &ImageTensor,
    d_real: &PatchScoreMap,
    d_fake: &PatchScoreMap,
    config: &TranslatorConfig,
) -> Result<TranslatorLoss> {
    fn finite(term: &str, mut vals: impl Iterator<Item = f64>) -> Result<()> {
        if vals.all(f64::is_finite) {
            Ok(())
        } else {
            Err(Error::Numeric {
                term: term.to_string(),
                message: "non-finite input".into(),
            })
        }
    }
    finite("d_real", d_real.scores.iter().copied())?;
    finite("d_fake", d_fake.scores.iter().copied())?;
    finite("fake_image", fake_image.values().iter().map(|&v| v as f64))?;
    finite("real_image", real.image.values().iter().map(|&v| v as f64))?;
    if d_real.side != d_fake.side {
        return Err(Error::Argument(format!(
            "score maps differ in size: {} vs {}",
            d_real.side, d_fake.side
        )));
    }
    if fake_image.values().len() != real.image.values().len() {
        return Err(Error::Argument("fake and real images differ in shape".into()));
    }
    let l1_term = real
        .image
        .values()
        .iter()
        .zip(fake_image.values())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum::<f64>()
        / real.image.values().len() as f64;
    let cgan_term = clamped_log_mean(&d_real.scores, false) + clamped_log_mean(&d_fake.scores, true);
    let adversarial = match config.adversarial_variant {
        AdversarialVariant::Saturating => clamped_log_mean(&d_fake.scores, true),
        AdversarialVariant::NonSaturating => -clamped_log_mean(&d_fake.scores, false),
    };
    let out = TranslatorLoss {
        d_objective: -cgan_term,
        g_objective: adversarial + config.l1_weight * l1_term,
        l1_term,
        cgan_term,
    };
    for (term, v) in [
        ("d_objective", out.d_objective),
        ("g_objective", out.g_objective),
        ("l1_term", out.l1_term),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric {
                term: term.into(),
                message: format!("evaluated to {v}"),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
