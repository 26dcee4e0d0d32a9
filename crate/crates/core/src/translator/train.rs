use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, RngState, CHECKPOINT_VERSION};
use super::{build_translator, image_input, mask_input, AdversarialVariant, TranslatorConfig, TranslatorModel, LOG_EPS};
use crate::error::{Error, Result};
use crate::exec;
use crate::ingest::{BinaryMask, DatasetManifest, PairedSample, Provenance};
use crate::nn::layers::BN_MOMENTUM;
use crate::nn::params::{read_u64, take};
use crate::nn::{Adam, ForwardCtx, Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for periodic and final checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
    /// Append-only per-epoch log (one JSON object per line).
    pub log_path: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh build.
    pub resume: Option<Checkpoint>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub d_objective: f64,
    pub g_objective: f64,
    pub l1_term: f64,
    pub cgan_term: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub d_objective: f64,
    pub g_objective: f64,
    pub l1_term: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

struct Optimizers {
    generator: Adam,
    critic: Adam,
}

impl Optimizers {
    fn new(model: &TranslatorModel) -> Self {
        let c = &model.config;
        Optimizers {
            generator: Adam::new(&model.store, model.generator_ids(), c.learning_rate, c.beta1, c.beta2),
            critic: Adam::new(&model.store, model.critic_ids(), c.learning_rate, c.beta1, c.beta2),
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for blob in [self.generator.to_bytes(), self.critic.to_bytes()] {
            out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            out.extend_from_slice(&blob);
        }
        out
    }

    fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let b = &mut bytes;
        let mut read = || -> Result<Adam> {
            let n = read_u64(b)? as usize;
            let mut blob = take(b, n)?;
            Adam::from_bytes(&mut blob)
        };
        Ok(Optimizers {
            generator: read()?,
            critic: read()?,
        })
    }
}

fn critic_probs(g: &mut Graph, model: &TranslatorModel, mask: Var, image: Var, ctx: &mut ForwardCtx) -> Var {
    critic_probs_with(g, model, &model.store, mask, image, ctx)
}

fn critic_probs_with(
    g: &mut Graph,
    model: &TranslatorModel,
    store: &ParamStore,
    mask: Var,
    image: Var,
    ctx: &mut ForwardCtx,
) -> Var {
    let pair = g.concat(mask, image);
    let logits = model.critic.forward(g, store, pair, ctx);
    g.sigmoid(logits)
}

/// `mean log p_real + mean log(1 − p_fake)` on the tape.
fn cgan_graph(g: &mut Graph, p_real: Var, p_fake: Var) -> Var {
    let lr = g.log_clamped(p_real, LOG_EPS);
    let lr = g.mean(lr);
    let q = g.one_minus(p_fake);
    let lf = g.log_clamped(q, LOG_EPS);
    let lf = g.mean(lf);
    g.add(lr, lf)
}

fn adversarial_graph(g: &mut Graph, p_fake: Var, variant: AdversarialVariant) -> Var {
    match variant {
        AdversarialVariant::Saturating => {
            let q = g.one_minus(p_fake);
            let l = g.log_clamped(q, LOG_EPS);
            g.mean(l)
        }
        AdversarialVariant::NonSaturating => {
            let l = g.log_clamped(p_fake, LOG_EPS);
            let m = g.mean(l);
            g.scale(m, -1.0)
        }
    }
}

fn finite(term: &str, v: f64, epoch: usize, last_good: &Option<PathBuf>) -> Result<f64> {
    if v.is_finite() {
        return Ok(v);
    }
    let retained = last_good
        .as_ref()
        .map_or("no checkpoint written yet".to_string(), |p| format!("last good checkpoint {}", p.display()));
    Err(Error::Numeric {
        term: term.into(),
        message: format!("training diverged in epoch {epoch} ({retained})"),
    })
}

/// One critic step followed by one generator step on `batch`.
fn train_step(
    model: &mut TranslatorModel,
    opt: &mut Optimizers,
    batch: &[&PairedSample],
    dropout_seed: u64,
) -> (f64, f64, f64, f64) {
    let cfg = model.config.clone();
    let n = model.store.len();
    let masks: Vec<&BinaryMask> = batch.iter().map(|s| &s.mask).collect();
    let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
    let mut g = Graph::new();
    let m = g.input(mask_input(&masks));
    let real = g.input(image_input(&images));
    let mut gctx = ForwardCtx::new(true, Some(ChaCha8Rng::seed_from_u64(dropout_seed)), cfg.dropout_keep);
    let fake = model.generator.forward(&mut g, &model.store, m, &mut gctx, false);

    let mut dctx = ForwardCtx::new(true, None, 1.0);
    let p_real = critic_probs(&mut g, model, m, real, &mut dctx);
    let fake_fixed = g.detach(fake);
    let p_fake = critic_probs(&mut g, model, m, fake_fixed, &mut dctx);
    let cgan = cgan_graph(&mut g, p_real, p_fake);
    let d_obj = g.scale(cgan, -1.0);
    let grads = g.backward(d_obj).param_grads(n);
    opt.critic.update(&mut model.store, &grads);
    dctx.apply_running_stats(&mut model.store, BN_MOMENTUM);

    let mut dctx = ForwardCtx::new(true, None, 1.0);
    let p_fake = critic_probs(&mut g, model, m, fake, &mut dctx);
    let adv = adversarial_graph(&mut g, p_fake, cfg.adversarial_variant);
    let l1 = g.abs_diff_mean(fake, real);
    let weighted = g.scale(l1, cfg.l1_weight);
    let g_obj = g.add(adv, weighted);
    let grads = g.backward(g_obj).param_grads(n);
    opt.generator.update(&mut model.store, &grads);
    gctx.apply_running_stats(&mut model.store, BN_MOMENTUM);

    (
        g.value(d_obj).item(),
        g.value(g_obj).item(),
        g.value(l1).item(),
        g.value(cgan).item(),
    )
}

/// Objective values of one batch, optionally with gradients of
/// `d_objective` (critic slots) and `g_objective` (generator slots).
#[derive(Clone, Debug)]
pub struct ObjectiveEval {
    pub d_objective: f64,
    pub g_objective: f64,
    pub l1_term: f64,
    pub cgan_term: f64,
    pub d_grads: Option<Vec<Option<Tensor>>>,
    pub g_grads: Option<Vec<Option<Tensor>>>,
}

/// Evaluate the training objectives with `store` in place of the model's
/// parameters, without updating anything. Batch statistics and dropout are
/// used exactly as in a training step seeded with `dropout_seed`.
pub fn translator_objectives(
    model: &TranslatorModel,
    store: &ParamStore,
    batch: &[&PairedSample],
    dropout_seed: u64,
    with_grads: bool,
) -> ObjectiveEval {
    let cfg = &model.config;
    let masks: Vec<&BinaryMask> = batch.iter().map(|s| &s.mask).collect();
    let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
    let mut g = Graph::new();
    let m = g.input(mask_input(&masks));
    let real = g.input(image_input(&images));
    let mut gctx = ForwardCtx::new(true, Some(ChaCha8Rng::seed_from_u64(dropout_seed)), cfg.dropout_keep);
    let fake = model.generator.forward(&mut g, store, m, &mut gctx, false);
    let mut dctx = ForwardCtx::new(true, None, 1.0);
    let p_real = critic_probs_with(&mut g, model, store, m, real, &mut dctx);
    let fake_fixed = g.detach(fake);
    let p_fake = critic_probs_with(&mut g, model, store, m, fake_fixed, &mut dctx);
    let cgan = cgan_graph(&mut g, p_real, p_fake);
    let d_obj = g.scale(cgan, -1.0);
    let p_fake = critic_probs_with(&mut g, model, store, m, fake, &mut dctx);
    let adv = adversarial_graph(&mut g, p_fake, cfg.adversarial_variant);
    let l1 = g.abs_diff_mean(fake, real);
    let weighted = g.scale(l1, cfg.l1_weight);
    let g_obj = g.add(adv, weighted);
    let n = store.len();
    ObjectiveEval {
        d_objective: g.value(d_obj).item(),
        g_objective: g.value(g_obj).item(),
        l1_term: g.value(l1).item(),
        cgan_term: g.value(cgan).item(),
        d_grads: with_grads.then(|| g.backward(d_obj).param_grads(n)),
        g_grads: with_grads.then(|| g.backward(g_obj).param_grads(n)),
    }
}

fn append_log(path: &PathBuf, rec: &EpochRecord) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(rec).expect("record serializes");
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Train generator and critic with alternating Adam updates.
pub fn train_translator(train: &DatasetManifest, config: &TranslatorConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    if train.samples.is_empty() {
        return Err(Error::Validation("training manifest is empty".into()));
    }
    let side = config.side;
    for s in &train.samples {
        if s.mask.is_empty() {
            return Err(Error::Validation(format!("sample `{}` has an empty mask", s.id)));
        }
        if s.mask.height() != side || s.mask.width() != side || s.image.channels() != 3 {
            return Err(Error::Argument(format!(
                "sample `{}` is {}x{}x{}, translator expects {side}x{side}x3",
                s.id,
                s.image.height(),
                s.image.width(),
                s.image.channels()
            )));
        }
    }

    let (mut model, mut opt, mut rng, start) = match &opts.resume {
        Some(ck) => {
            if ck.model.config != *config {
                return Err(Error::Config("resume checkpoint was trained with a different configuration".into()));
            }
            (
                ck.model.clone(),
                Optimizers::from_bytes(&ck.optimizer_state)?,
                ck.rng_state.restore(),
                ck.epoch,
            )
        }
        None => {
            let model = build_translator(config)?;
            let opt = Optimizers::new(&model);
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(1);
            (model, opt, rng, 0)
        }
    };

    let snapshot = |model: &TranslatorModel, opt: &Optimizers, rng: &ChaCha8Rng, epoch: usize| Checkpoint {
        model: model.clone(),
        optimizer_state: opt.to_bytes(),
        epoch,
        rng_state: RngState::capture(rng),
        format_version: CHECKPOINT_VERSION,
    };
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut order: Vec<usize> = (0..train.samples.len()).collect();
    let mut epochs = Vec::new();
    let mut steps = Vec::new();
    let mut last_good: Option<PathBuf> = None;
    for epoch in start + 1..=config.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 3];
        let mut count = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&PairedSample> = chunk.iter().map(|&i| &train.samples[i]).collect();
            let seed: u64 = rng.random();
            let (d, gv, l1, cgan) = train_step(&mut model, &mut opt, &batch, seed);
            finite("d_objective", d, epoch, &last_good)?;
            finite("g_objective", gv, epoch, &last_good)?;
            finite("l1_term", l1, epoch, &last_good)?;
            if !model.store.all_finite() {
                finite("parameters", f64::NAN, epoch, &last_good)?;
            }
            steps.push(StepRecord {
                step: steps.len() + 1,
                epoch,
                d_objective: d,
                g_objective: gv,
                l1_term: l1,
                cgan_term: cgan,
            });
            sums[0] += d;
            sums[1] += gv;
            sums[2] += l1;
            count += 1;
        }
        model.trained_epochs = epoch;
        let c = count as f64;
        let rec = EpochRecord {
            epoch,
            d_objective: sums[0] / c,
            g_objective: sums[1] / c,
            l1_term: sums[2] / c,
            wall_seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "translator epoch {epoch}: d {:.4} g {:.4} l1 {:.4}",
            rec.d_objective,
            rec.g_objective,
            rec.l1_term
        );
        if let Some(path) = &opts.log_path {
            append_log(path, &rec)?;
        }
        epochs.push(rec);
        if let Some(dir) = &opts.checkpoint_dir {
            if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 && epoch != config.epochs {
                let path = dir.join(format!("epoch-{epoch:04}.ckpt"));
                snapshot(&model, &opt, &rng, epoch).save(&path)?;
                last_good = Some(path);
            }
        }
    }
    let checkpoint = snapshot(&model, &opt, &rng, config.epochs.max(start));
    if let Some(dir) = &opts.checkpoint_dir {
        checkpoint.save(&dir.join("final.ckpt"))?;
    }
    Ok(TrainOutcome {
        checkpoint,
        epochs,
        steps,
    })
}

/// Per-item dropout seed so results do not depend on scheduling.
fn item_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generate one synthetic pair per `(id, mask)`; ids gain a `-synth` suffix.
/// Failures (for example empty masks) are reported per item.
pub fn synthesize(checkpoint: &Checkpoint, masks: &[(String, BinaryMask)], dropout_seed: u64) -> Vec<Result<PairedSample>> {
    let model = &checkpoint.model;
    let indexed: Vec<(usize, &(String, BinaryMask))> = masks.iter().enumerate().collect();
    exec::map_slice(&indexed, |&(i, (id, mask))| {
        if mask.is_empty() {
            return Err(Error::Degenerate(format!("mask `{id}` has no foreground")));
        }
        let image = super::generator_forward(model, mask, item_seed(dropout_seed, i))?;
        PairedSample::new(format!("{id}-synth"), image, mask.clone(), Provenance::Synthetic)
    })
}
