use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_segmenter, predict_masks, SegmenterConfig, SegmenterModel};
use crate::error::{Error, Result};
use crate::evaluator::confusion_metrics;
use crate::ingest::{DatasetManifest, PairedSample};
use crate::nn::layers::BN_MOMENTUM;
use crate::nn::{ForwardCtx, Graph, ParamStore, Sgd, Tensor};
use crate::translator::image_input;

#[derive(Clone, Debug, Default)]
pub struct SegTrainOptions {
    pub log_path: Option<PathBuf>,
    /// Held-out split scored (mean Dice) after every epoch.
    pub validation: Option<DatasetManifest>,
    /// Stop after this many epochs without a validation improvement.
    /// Only meaningful with `validation`; the best model is returned.
    pub patience: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegEpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub wall_seconds: f64,
    pub validation_dice: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SegTrainOutcome {
    pub model: SegmenterModel,
    pub epochs: Vec<SegEpochRecord>,
    pub best_epoch: usize,
}

/// Mean binary cross-entropy of `batch` under `store`, using batch
/// statistics. Returns the loss and parameter gradients.
pub fn segmentation_loss(
    model: &SegmenterModel,
    store: &ParamStore,
    batch: &[&PairedSample],
    with_grads: bool,
) -> (f64, Option<Vec<Option<Tensor>>>) {
    let (loss, grads, _) = loss_pass(model, store, batch, with_grads);
    (loss, grads)
}

fn loss_pass(
    model: &SegmenterModel,
    store: &ParamStore,
    batch: &[&PairedSample],
    with_grads: bool,
) -> (f64, Option<Vec<Option<Tensor>>>, ForwardCtx) {
    let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
    let target: Vec<f64> = batch.iter().flat_map(|s| s.mask.to_f64()).collect();
    let mut g = Graph::new();
    let x = g.input(image_input(&images));
    let mut ctx = ForwardCtx::new(true, None, 1.0);
    let logits = model.arch.forward(&mut g, store, x, &mut ctx);
    let loss = g.bce_with_logits_mean(logits, target);
    let grads = with_grads.then(|| g.backward(loss).param_grads(store.len()));
    (g.value(loss).item(), grads, ctx)
}

fn mean_dice(model: &SegmenterModel, val: &DatasetManifest) -> Result<f64> {
    let images: Vec<_> = val.samples.iter().map(|s| &s.image).collect();
    let preds = predict_masks(model, &images, model.config.threshold);
    let mut dice: Vec<f64> = Vec::with_capacity(preds.len());
    for (p, s) in preds.into_iter().zip(&val.samples) {
        dice.push(confusion_metrics(&s.id, &p?, &s.mask)?.dice);
    }
    dice.sort_by(f64::total_cmp);
    Ok(dice.iter().sum::<f64>() / dice.len().max(1) as f64)
}

fn append_log(path: &PathBuf, rec: &SegEpochRecord) -> Result<()> {
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

/// Minibatch SGD with momentum on binary cross-entropy.
pub fn train_segmenter(train: &DatasetManifest, config: &SegmenterConfig, opts: &SegTrainOptions) -> Result<SegTrainOutcome> {
    config.validate()?;
    if train.samples.is_empty() {
        return Err(Error::Validation("segmenter training set is empty".into()));
    }
    let side = config.side;
    let sets = std::iter::once(train).chain(opts.validation.as_ref());
    for s in sets.flat_map(|m| &m.samples) {
        if s.image.height() != side || s.image.width() != side || s.image.channels() != 3 {
            return Err(Error::Argument(format!(
                "sample `{}` is {}x{}x{}, segmenter expects {side}x{side}x3",
                s.id,
                s.image.height(),
                s.image.width(),
                s.image.channels()
            )));
        }
    }
    if opts.patience.is_some() && opts.validation.is_none() {
        return Err(Error::Config("early stopping needs a validation split".into()));
    }

    let mut model = build_segmenter(config)?;
    let mut sgd = Sgd::new(&model.store, config.learning_rate, config.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.samples.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, SegmenterModel)> = None;
    for epoch in 1..=config.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&PairedSample> = chunk.iter().map(|&i| &train.samples[i]).collect();
            let (loss, grads, mut ctx) = loss_pass(&model, &model.store, &batch, true);
            if !loss.is_finite() {
                return Err(Error::Numeric {
                    term: "segmentation_loss".into(),
                    message: format!("non-finite loss in epoch {epoch}"),
                });
            }
            sgd.update(&mut model.store, &grads.expect("requested"));
            ctx.apply_running_stats(&mut model.store, BN_MOMENTUM);
            if !model.store.all_finite() {
                return Err(Error::Numeric {
                    term: "parameters".into(),
                    message: format!("non-finite segmenter parameters in epoch {epoch}"),
                });
            }
            sum += loss * batch.len() as f64;
            count += batch.len();
        }
        model.trained_epochs = epoch;
        let validation_dice = match &opts.validation {
            Some(v) => Some(mean_dice(&model, v)?),
            None => None,
        };
        let rec = SegEpochRecord {
            epoch,
            loss: sum / count as f64,
            wall_seconds: t0.elapsed().as_secs_f64(),
            validation_dice,
        };
        log::info!("segmenter epoch {epoch}: loss {:.4} val dice {:?}", rec.loss, rec.validation_dice);
        if let Some(p) = &opts.log_path {
            append_log(p, &rec)?;
        }
        epochs.push(rec);
        if let Some(d) = validation_dice {
            if best.as_ref().is_none_or(|(bd, _, _)| d > *bd) {
                best = Some((d, epoch, model.clone()));
            }
            let since = epoch - best.as_ref().map_or(0, |b| b.1);
            if opts.patience.is_some_and(|p| since >= p) {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    let (model, best_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => {
            let e = model.trained_epochs;
            (model, e)
        }
    };
    Ok(SegTrainOutcome {
        model,
        epochs,
        best_epoch,
    })
}
