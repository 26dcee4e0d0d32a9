use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::manifest::{hash_outputs, outputs_intact, ExperimentManifest, HistoryEvent, StageAction, StageRecord, StageStatus};
use super::{ExperimentConfig, MaskSource};
use crate::error::{Error, Result};
use crate::evaluator::{
    aggregate_metrics, batch_metrics, density_series, emit_figures, RegimeReport, GRID_COLUMNS,
};
use crate::fsutil::{sha256_bytes, sha256_file, write_atomic};
use crate::imageio;
use crate::ingest::{load_dataset, read_manifest, save_samples, write_manifest, BinaryMask, DatasetManifest, IngestOptions, Split};
use crate::maskforge::{
    elastic_deform, fit_pca_shape_model, import_mask, make_geometric_mask, retry_degenerate, sample_pca_mask,
    DeformationField,
};
use crate::segmenter::{
    compose_regime_dataset, predict_masks, train_segmenter, CompositionOptions, SegTrainOptions, SegmenterModel,
};
use crate::translator::{receptive_field, synthesize, train_translator, Checkpoint, TrainOptions};

const SYNTH_SEED_SALT: u64 = 0x0005_EED0_F5E7;

fn fingerprint(parts: &impl Serialize) -> String {
    sha256_bytes(serde_json::to_string(parts).expect("fingerprint serializes").as_bytes())
}

fn save_json(value: &impl Serialize, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

struct Runner {
    root: PathBuf,
    manifest: ExperimentManifest,
}

impl Runner {
    /// Run `work` in a fresh `dir` unless a completed record with the same
    /// input hash and intact outputs exists. Returns the stage's output hash.
    fn stage(&mut self, name: &str, dir: &str, input_hash: String, work: impl FnOnce(&Path) -> Result<()>) -> Result<(String, bool)> {
        let run = self.manifest.runs;
        let event = |action| HistoryEvent {
            run,
            stage: name.to_string(),
            action,
            input_hash: input_hash.clone(),
        };
        if let Some(rec) = self.manifest.stage(name) {
            if rec.status == StageStatus::Completed && rec.input_hash == input_hash && outputs_intact(&self.root, &rec.outputs) {
                let out = rec.output_hash();
                log::info!("stage {name}: up to date, skipped");
                self.manifest.history.push(event(StageAction::Skipped));
                self.manifest.save(&self.root)?;
                return Ok((out, false));
            }
        }
        let path = self.root.join(dir);
        if path.exists() {
            fs::remove_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        }
        fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        log::info!("stage {name}: running");
        let t0 = Instant::now();
        let result = work(&path);
        let outputs = hash_outputs(&self.root, &path)?;
        let rec = StageRecord {
            name: name.to_string(),
            status: if result.is_ok() { StageStatus::Completed } else { StageStatus::Failed },
            input_hash: input_hash.clone(),
            outputs,
            wall_seconds: t0.elapsed().as_secs_f64(),
            error: result.as_ref().err().map(|e| e.to_string()),
        };
        let out = rec.output_hash();
        self.manifest.upsert(rec);
        self.manifest.history.push(event(if result.is_ok() { StageAction::Ran } else { StageAction::Failed }));
        self.manifest.save(&self.root)?;
        result.map(|_| (out, true))
    }
}

/// Hash of every dataset file, so edits to the inputs invalidate stages.
fn dataset_fingerprint(root: &Path) -> Result<String> {
    let mut parts = Vec::new();
    for split in ["train", "test"] {
        for sub in ["images", "masks"] {
            let dir = root.join(split).join(sub);
            for rel in super::manifest::list_files(&dir, &dir)? {
                parts.push((format!("{split}/{sub}/{}", rel.display()), sha256_file(&dir.join(&rel))?));
            }
        }
    }
    Ok(fingerprint(&parts))
}

fn mix(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Input masks for the synthesis showcase.
fn showcase_masks(cfg: &ExperimentConfig, train: &DatasetManifest) -> Result<Vec<(String, BinaryMask)>> {
    let side = cfg.side;
    let seed = cfg.seeds.global;
    let real: Vec<&BinaryMask> = train.samples.iter().map(|s| &s.mask).filter(|m| !m.is_empty()).collect();
    let mut out = Vec::new();
    for (si, src) in cfg.mask_sources.iter().enumerate() {
        match src {
            MaskSource::Geometric { shapes } => {
                for (i, s) in shapes.iter().enumerate() {
                    out.push((format!("src{si}-geometric-{i}"), make_geometric_mask(s, side)?));
                }
            }
            MaskSource::Elastic { count, amplitude, smoothing_sigma } => {
                if real.is_empty() {
                    return Err(Error::Validation("elastic mask source needs non-empty training masks".into()));
                }
                for i in 0..*count {
                    let base = real[i % real.len()];
                    let m = retry_degenerate(mix(seed, si * 1000 + i), 8, |s| {
                        let m = elastic_deform(base, &DeformationField::new(*amplitude, *smoothing_sigma, s))?;
                        if m.is_empty() {
                            return Err(Error::Degenerate("deformed mask is empty".into()));
                        }
                        Ok(m)
                    })?;
                    out.push((format!("src{si}-elastic-{i}"), m));
                }
            }
            MaskSource::Pca { count, components, spread } => {
                let masks: Vec<BinaryMask> = real.iter().map(|m| (*m).clone()).collect();
                let model = fit_pca_shape_model(&masks, *components)?;
                for i in 0..*count {
                    let m = retry_degenerate(mix(seed, si * 1000 + i), 16, |s| {
                        let mut rng = ChaCha8Rng::seed_from_u64(s);
                        let w: BTreeMap<usize, f64> =
                            (0..model.k()).map(|j| (j, rng.random_range(-1.0..=1.0) * spread)).collect();
                        sample_pca_mask(&model, &w)
                    })?;
                    out.push((format!("src{si}-pca-{i}"), m));
                }
            }
            MaskSource::Directory { path } => {
                let mut files: Vec<PathBuf> = fs::read_dir(path)
                    .map_err(|e| Error::io(path, e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                    .collect();
                files.sort();
                for f in files {
                    let stem = f.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                    out.push((format!("src{si}-{stem}"), import_mask(&f, side)?));
                }
            }
        }
    }
    if out.is_empty() {
        out = train
            .samples
            .iter()
            .filter(|s| !s.mask.is_empty())
            .take(GRID_COLUMNS)
            .map(|s| (s.id.clone(), s.mask.clone()))
            .collect();
    }
    Ok(out)
}

#[derive(Serialize)]
struct ArchitectureNote {
    critic_layers: Vec<(usize, usize)>,
    receptive_field: usize,
    side: usize,
    score_side: usize,
    note: String,
}

fn architecture_note(ck: &Checkpoint) -> Result<ArchitectureNote> {
    let layers = ck.model.critic.descriptor();
    let rf = receptive_field(&layers)?;
    let side = ck.model.config.side;
    let score = ck.model.score_side();
    let note = format!(
        "critic receptive field {rf}x{rf}; a {side}-pixel input yields a {score}x{score} score map by layer arithmetic. \
         The commonly quoted 30x30 map corresponds to 256-pixel inputs, not 128."
    );
    log::info!("{note}");
    Ok(ArchitectureNote {
        critic_layers: layers,
        receptive_field: rf,
        side,
        score_side: score,
        note,
    })
}

/// Execute every stage in dependency order, skipping those whose inputs
/// and outputs are unchanged since the last run.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentManifest> {
    let mut cfg = config.clone();
    cfg.resolve();
    cfg.validate()?;
    let root = cfg.output_root.clone();
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let mut manifest = ExperimentManifest::load(&root)?.unwrap_or_else(|| ExperimentManifest::new(cfg.clone()));
    manifest.config = cfg.clone();
    manifest.runs += 1;
    let mut runner = Runner { root: root.clone(), manifest };

    // ingest
    let ingest = IngestOptions { side: cfg.side, seed: cfg.seeds.global };
    let train = load_dataset(&cfg.dataset_root.join("train"), Split::Train, ingest)?;
    let test = load_dataset(&cfg.dataset_root.join("test"), Split::Test, ingest)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Validation("train and test splits must both be non-empty".into()));
    }
    let data_hash = fingerprint(&(dataset_fingerprint(&cfg.dataset_root)?, cfg.side, cfg.seeds.global));
    let (ingest_hash, _) = runner.stage("ingest", "ingest", data_hash, |dir| {
        write_manifest(&train, &dir.join("train.jsonl"))?;
        write_manifest(&test, &dir.join("test.jsonl"))
    })?;

    // translator
    let needs_translator = cfg.regimes.iter().any(|r| r.uses_synthetic()) || !cfg.mask_sources.is_empty();
    let translator: Option<(Checkpoint, String)> = if let Some(p) = &cfg.translator_checkpoint {
        let ck = Checkpoint::load(p)?;
        if ck.model.config.side != cfg.side {
            return Err(Error::Config(format!(
                "checkpoint side {} differs from experiment side {}",
                ck.model.config.side, cfg.side
            )));
        }
        Some((ck, sha256_file(p)?))
    } else if cfg.train_translator && needs_translator {
        let hash = fingerprint(&(&ingest_hash, &cfg.translator));
        let (h, _) = runner.stage("translator", "translator", hash, |dir| {
            let opts = TrainOptions {
                checkpoint_dir: Some(dir.to_path_buf()),
                log_path: Some(dir.join("log.jsonl")),
                resume: None,
            };
            train_translator(&train, &cfg.translator, &opts).map(|_| ())
        })?;
        Some((Checkpoint::load(&root.join("translator").join("final.ckpt"))?, h))
    } else {
        None
    };

    // synthesis showcase
    let mut synth_hash = String::new();
    if let Some((ck, th)) = &translator {
        let hash = fingerprint(&(&ingest_hash, th, &cfg.mask_sources, cfg.seeds.global));
        let (h, _) = runner.stage("synthesis", "synthesis", hash, |dir| {
            let masks = showcase_masks(&cfg, &train)?;
            let seed = cfg.seeds.global ^ SYNTH_SEED_SALT;
            let pairs = synthesize(ck, &masks, seed).into_iter().collect::<Result<Vec<_>>>()?;
            let man = DatasetManifest::new(pairs, Split::Train, seed, PathBuf::from("."))?;
            save_samples(&man, dir).map(|_| ())
        })?;
        synth_hash = h;
    }

    // segmenters and evaluation
    let mut reports = Vec::new();
    let mut report_hashes = Vec::new();
    for &regime in &cfg.regimes {
        let th = if regime.uses_synthetic() {
            translator.as_ref().map(|t| t.1.clone())
        } else {
            None
        };
        let dir = format!("segmenter/{}", regime.short());
        let hash = fingerprint(&(&ingest_hash, &th, &cfg.segmenter, &cfg.composition, cfg.seeds, regime));
        let (seg_hash, _) = runner.stage(&format!("segmenter-{}", regime.short()), &dir, hash, |dir| {
            let opts = CompositionOptions {
                classical_multiplicity: cfg.composition.classical_multiplicity,
                synthetic_multiplicity: cfg.composition.synthetic_multiplicity,
                augmentation_seed: cfg.seeds.augmentation,
                synthesis_seed: cfg.seeds.global,
            };
            let comp = compose_regime_dataset(&train, regime, translator.as_ref().map(|t| &t.0), &opts)?;
            save_json(&comp.log, &dir.join("composition.json"))?;
            let out = train_segmenter(
                &comp.manifest,
                &cfg.segmenter,
                &SegTrainOptions {
                    log_path: Some(dir.join("log.jsonl")),
                    ..SegTrainOptions::default()
                },
            )?;
            out.model.save(&dir.join("model.bin"))
        })?;
        let model_path = root.join(&dir).join("model.bin");

        let eval_dir = format!("evaluate/{}", regime.short());
        let hash = fingerprint(&(&ingest_hash, &seg_hash, cfg.segmenter.threshold));
        let (eh, _) = runner.stage(&format!("evaluate-{}", regime.short()), &eval_dir, hash, |dir| {
            let model = SegmenterModel::load(&model_path)?;
            let images: Vec<_> = test.samples.iter().map(|s| &s.image).collect();
            let preds = predict_masks(&model, &images, cfg.segmenter.threshold);
            let mut items = Vec::with_capacity(preds.len());
            for (p, s) in preds.into_iter().zip(&test.samples) {
                let p = p?;
                imageio::write_mask(&p, &dir.join("predictions").join(format!("{}_pred.png", s.id)))?;
                items.push((s.id.clone(), p, s.mask.clone()));
            }
            let report = aggregate_metrics(&batch_metrics(&items)?, regime)?;
            save_json(&report, &dir.join("report.json"))
        })?;
        let text = fs::read_to_string(root.join(&eval_dir).join("report.json")).map_err(|e| Error::io(&eval_dir, e))?;
        reports.push(serde_json::from_str::<RegimeReport>(&text).map_err(|e| Error::Format(e.to_string()))?);
        report_hashes.push(eh);
    }

    // report
    let hash = fingerprint(&(&report_hashes, &synth_hash, cfg.kde_boundary, translator.as_ref().map(|t| &t.1)));
    runner.stage("report", "report", hash, |dir| {
        let pairs = if translator.is_some() {
            read_manifest(&root.join("synthesis").join("manifest.jsonl"), cfg.side)?.samples
        } else {
            Vec::new()
        };
        let curves = density_series(&reports, cfg.kde_boundary);
        let figures = emit_figures(&reports, &curves, &pairs, dir)?;
        let names: Vec<String> = figures
            .written
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect();
        save_json(&serde_json::json!({ "written": names, "failures": figures.failures }), &dir.join("figures.json"))?;
        if let Some((ck, _)) = &translator {
            save_json(&architecture_note(ck)?, &dir.join("architecture.json"))?;
        }
        Ok(())
    })?;
    Ok(runner.manifest)
}
