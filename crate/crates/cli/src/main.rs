use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lesionsynth::evaluator::{
    aggregate_metrics, batch_metrics, density_series, emit_figures, Boundary, Metric, RegimeReport,
};
use lesionsynth::experiment::{run_experiment, validate_config, ExperimentConfig};
use lesionsynth::ingest::{load_dataset, write_manifest, BinaryMask, DatasetManifest, IngestOptions, Split};
use lesionsynth::maskforge::{
    elastic_deform, fit_pca_shape_model, import_mask, make_geometric_mask, retry_degenerate, sample_pca_mask,
    DeformationField, ShapeSpec,
};
use lesionsynth::segmenter::{
    compose_regime_dataset, predict_masks, train_segmenter, CompositionOptions, Regime, SegTrainOptions, SegmenterModel,
};
use lesionsynth::translator::{synthesize, train_translator, Checkpoint, TrainOptions};
use lesionsynth::{exec, fixtures, imageio, Error, Result};

#[derive(Parser)]
#[command(name = "lesionsynth", version, about = "Mask-conditioned lesion synthesis and segmentation augmentation")]
struct Cli {
    /// Experiment file supplying defaults (side, seeds, network settings).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run every data-parallel kernel on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pair images with masks and write a manifest.
    Ingest {
        /// Split directory with `images/` and `masks/`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        #[arg(long)]
        side: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Manifest file (JSON lines).
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate input masks.
    MaskGen(MaskGenArgs),
    /// Write a synthetic ISIC-layout dataset for smoke runs.
    Fixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        side: usize,
        #[arg(long, default_value_t = 40)]
        train: usize,
        #[arg(long, default_value_t = 10)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the mask-to-image translator.
    TrainGan {
        /// Split directory with `images/` and `masks/`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        l1_weight: Option<f64>,
        #[arg(long)]
        side: Option<usize>,
        #[arg(long)]
        base_channels: Option<usize>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Output directory for checkpoints and the training log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate lesion images for a directory of masks.
    Synth {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of PNG masks.
        #[arg(long)]
        masks: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a segmenter under one augmentation regime.
    TrainSeg {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        regime: Regime,
        /// Translator checkpoint (required for m2l and all).
        #[arg(long)]
        gan_ckpt: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        side: Option<usize>,
        #[arg(long)]
        base_channels: Option<usize>,
        #[arg(long, default_value_t = 1)]
        classical_multiplicity: usize,
        #[arg(long, default_value_t = 1)]
        synthetic_multiplicity: usize,
        /// Model file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write `<id>_pred.png` masks for a directory of images.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth.
    Evaluate {
        /// Directory of `<id>_pred.png`.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of `<id>_segmentation.png`.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        regime: Regime,
        /// Report file (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Comparison table and figures from evaluation reports.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        reports: Vec<PathBuf>,
        /// Directory of synthesized pairs (from `synth`) for the grids.
        #[arg(long)]
        synth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the whole experiment described by `--config`.
    Run {
        /// Validate the configuration and print it resolved, without running.
        #[arg(long)]
        dry_run: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum MaskKind {
    Geometric,
    Elastic,
    Pca,
}

#[derive(Clone, Copy, ValueEnum)]
enum ShapeArg {
    Circle,
    Ellipse,
    Star,
}

#[derive(Args)]
struct MaskGenArgs {
    #[arg(long, value_enum)]
    kind: MaskKind,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    side: Option<usize>,
    /// Geometric: shape family; parameters are drawn at random.
    #[arg(long, value_enum, default_value = "ellipse")]
    shape: ShapeArg,
    /// Elastic and PCA: directory of source masks.
    #[arg(long)]
    from: Option<PathBuf>,
    /// Elastic: maximum control displacement in pixels.
    #[arg(long, default_value_t = 4.0)]
    amplitude: f64,
    /// Elastic: smoothing of the displacement field in pixels.
    #[arg(long, default_value_t = 4.0)]
    sigma: f64,
    /// PCA: number of components.
    #[arg(long, default_value_t = 4)]
    components: usize,
    /// PCA: weights are uniform in [-spread, spread].
    #[arg(long, default_value_t = 1.0)]
    spread: f64,
    #[arg(long)]
    out: PathBuf,
}

fn defaults(cli: &Cli) -> Result<ExperimentConfig> {
    match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.to_path_buf(), message: e.to_string() })?;
            let cfg = ExperimentConfig::from_toml_str(&text, p.parent().unwrap_or(Path::new(".")))?;
            Ok(cfg)
        }
        None => {
            let mut cfg = ExperimentConfig::default();
            cfg.resolve();
            Ok(cfg)
        }
    }
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), message: e.to_string() })?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

fn write_json(value: &impl serde::Serialize, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    lesionsynth::fsutil::write_atomic(path, text.as_bytes())
}

fn random_shape(shape: ShapeArg, side: usize, rng: &mut impl Rng) -> ShapeSpec {
    let s = side as f64;
    let (cx, cy) = (rng.random_range(0.4..0.6) * s, rng.random_range(0.4..0.6) * s);
    match shape {
        ShapeArg::Circle => ShapeSpec::Circle {
            cx,
            cy,
            radius: rng.random_range(0.12..0.3) * s,
        },
        ShapeArg::Ellipse => ShapeSpec::Ellipse {
            cx,
            cy,
            rx: rng.random_range(0.12..0.3) * s,
            ry: rng.random_range(0.12..0.3) * s,
            angle_deg: rng.random_range(0.0..180.0),
        },
        ShapeArg::Star => {
            let outer = rng.random_range(0.2..0.32) * s;
            ShapeSpec::Star {
                cx,
                cy,
                outer,
                inner: outer * rng.random_range(0.4..0.7),
                points: rng.random_range(4..=8),
                rotation_deg: rng.random_range(0.0..90.0),
            }
        }
    }
}

fn mask_gen(a: &MaskGenArgs, side: usize) -> Result<()> {
    let sources = || -> Result<Vec<BinaryMask>> {
        let dir = a
            .from
            .as_ref()
            .ok_or_else(|| Error::Argument("--from is required for elastic and pca masks".into()))?;
        png_files(dir)?.iter().map(|p| import_mask(p, side)).collect()
    };
    let masks: Vec<BinaryMask> = match a.kind {
        MaskKind::Geometric => {
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            (0..a.count)
                .map(|_| make_geometric_mask(&random_shape(a.shape, side, &mut rng), side))
                .collect::<Result<_>>()?
        }
        MaskKind::Elastic => {
            let src: Vec<BinaryMask> = sources()?.into_iter().filter(|m| !m.is_empty()).collect();
            if src.is_empty() {
                return Err(Error::Argument("no non-empty source masks".into()));
            }
            (0..a.count)
                .map(|i| {
                    retry_degenerate(a.seed.wrapping_add(i as u64 * 7919), 8, |s| {
                        let m = elastic_deform(&src[i % src.len()], &DeformationField::new(a.amplitude, a.sigma, s))?;
                        if m.is_empty() {
                            return Err(Error::Degenerate("deformed mask is empty".into()));
                        }
                        Ok(m)
                    })
                })
                .collect::<Result<_>>()?
        }
        MaskKind::Pca => {
            let model = fit_pca_shape_model(&sources()?, a.components)?;
            (0..a.count)
                .map(|i| {
                    retry_degenerate(a.seed.wrapping_add(i as u64 * 7919), 16, |s| {
                        let mut rng = ChaCha8Rng::seed_from_u64(s);
                        let w: BTreeMap<usize, f64> =
                            (0..model.k()).map(|j| (j, rng.random_range(-1.0..=1.0) * a.spread)).collect();
                        sample_pca_mask(&model, &w)
                    })
                })
                .collect::<Result<_>>()?
        }
    };
    for (i, m) in masks.iter().enumerate() {
        imageio::write_mask(m, &a.out.join(format!("mask_{i:04}.png")))?;
    }
    println!("wrote {} masks to {}", masks.len(), a.out.display());
    Ok(())
}

fn load_split(dir: &Path, split: Split, side: usize, seed: u64) -> Result<DatasetManifest> {
    load_dataset(dir, split, IngestOptions { side, seed })
}

fn run(cli: Cli) -> Result<()> {
    let base = defaults(&cli)?;
    match cli.command {
        Command::Ingest { data, split, side, seed, out } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let m = load_split(&data, split, side.unwrap_or(base.side), seed.unwrap_or(base.seeds.global))?;
            write_manifest(&m, &out)?;
            println!("{} pairs -> {}", m.len(), out.display());
        }
        Command::MaskGen(a) => mask_gen(&a, a.side.unwrap_or(base.side))?,
        Command::Fixtures { out, side, train, test, seed } => {
            fixtures::write_dataset(&out, side, train, test, seed)?;
            println!("fixture dataset at {}", out.display());
        }
        Command::TrainGan {
            data,
            epochs,
            seed,
            l1_weight,
            side,
            base_channels,
            resume,
            out,
        } => {
            let mut cfg = base.translator.clone().with_side(side.unwrap_or(base.side));
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.l1_weight = l1_weight.unwrap_or(cfg.l1_weight);
            cfg.base_channels = base_channels.unwrap_or(cfg.base_channels);
            let train = load_split(&data, Split::Train, cfg.side, base.seeds.global)?;
            let opts = TrainOptions {
                checkpoint_dir: Some(out.clone()),
                log_path: Some(out.join("log.jsonl")),
                resume: resume.as_deref().map(Checkpoint::load).transpose()?,
            };
            let outcome = train_translator(&train, &cfg, &opts)?;
            if let Some(last) = outcome.epochs.last() {
                println!("epoch {}: l1 {:.4}", last.epoch, last.l1_term);
            }
            println!("checkpoint {}", out.join("final.ckpt").display());
        }
        Command::Synth { ckpt, masks, seed, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let side = ck.model.config.side;
            let items: Vec<(String, BinaryMask)> = png_files(&masks)?
                .iter()
                .map(|p| Ok((stem(p), import_mask(p, side)?)))
                .collect::<Result<_>>()?;
            let mut failed = 0;
            for (r, (id, _)) in synthesize(&ck, &items, seed).into_iter().zip(&items) {
                match r {
                    Ok(p) => {
                        imageio::write_image(&p.image, &out.join("images").join(format!("{}.png", p.id)))?;
                        imageio::write_mask(&p.mask, &out.join("masks").join(format!("{}_segmentation.png", p.id)))?;
                    }
                    Err(e) => {
                        log::warn!("{id}: {e}");
                        failed += 1;
                    }
                }
            }
            println!("{} synthesized, {failed} skipped", items.len() - failed);
        }
        Command::TrainSeg {
            data,
            regime,
            gan_ckpt,
            seed,
            epochs,
            side,
            base_channels,
            classical_multiplicity,
            synthetic_multiplicity,
            out,
        } => {
            let mut cfg = base.segmenter.clone();
            cfg.side = side.unwrap_or(base.side);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.base_channels = base_channels.unwrap_or(cfg.base_channels);
            let train = load_split(&data, Split::Train, cfg.side, base.seeds.global)?;
            let ck = gan_ckpt.as_deref().map(Checkpoint::load).transpose()?;
            let opts = CompositionOptions {
                classical_multiplicity,
                synthetic_multiplicity,
                augmentation_seed: base.seeds.augmentation,
                synthesis_seed: base.seeds.global,
            };
            let comp = compose_regime_dataset(&train, regime, ck.as_ref(), &opts)?;
            println!(
                "{regime}: {} real + {} classical + {} synthetic",
                comp.log.real, comp.log.classical, comp.log.synthetic
            );
            let log_path = out.with_extension("log.jsonl");
            let res = train_segmenter(&comp.manifest, &cfg, &SegTrainOptions { log_path: Some(log_path), ..Default::default() })?;
            res.model.save(&out)?;
            println!("model {}", out.display());
        }
        Command::Predict { model, images, threshold, out } => {
            let model = SegmenterModel::load(&model)?;
            let thr = threshold.unwrap_or(model.config.threshold);
            let side = model.config.side;
            let files = png_files(&images)?;
            let imgs = files
                .iter()
                .map(|p| lesionsynth::ingest::resize_nearest(&imageio::read_image(p)?, side))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<_> = imgs.iter().collect();
            for (p, f) in predict_masks(&model, &refs, thr).into_iter().zip(&files) {
                imageio::write_mask(&p?, &out.join(format!("{}_pred.png", stem(f))))?;
            }
            println!("{} predictions in {}", files.len(), out.display());
        }
        Command::Evaluate { pred, gt, regime, out } => {
            let mut items = Vec::new();
            for p in png_files(&pred)? {
                let s = stem(&p);
                let Some(id) = s.strip_suffix("_pred") else { continue };
                let g = gt.join(format!("{id}_segmentation.png"));
                if !g.is_file() {
                    return Err(Error::Pairing { id: id.to_string() });
                }
                let pm = imageio::read_mask(&p)?;
                let gm = lesionsynth::ingest::resize_nearest(&imageio::read_mask(&g)?, pm.height())?;
                items.push((id.to_string(), pm, gm));
            }
            let report = aggregate_metrics(&batch_metrics(&items)?, regime)?;
            write_json(&report, &out)?;
            for m in Metric::ALL {
                println!("{:<12} {}", m.label(), report.cell(m));
            }
        }
        Command::Report { reports, synth, out } => {
            let reports: Vec<RegimeReport> = reports
                .iter()
                .map(|p| {
                    let t = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.to_path_buf(), message: e.to_string() })?;
                    serde_json::from_str(&t).map_err(|e| Error::Format(format!("{}: {e}", p.display())))
                })
                .collect::<Result<_>>()?;
            let curves = density_series(&reports, Boundary::Truncate);
            let pairs = match synth {
                Some(dir) => {
                    let first = png_files(&dir.join("images"))?
                        .into_iter()
                        .next()
                        .ok_or_else(|| Error::Config(format!("no images in {}", dir.join("images").display())))?;
                    let side = imageio::read_image(&first)?.height();
                    load_split(&dir, Split::Train, side, 0)?.samples
                }
                None => Vec::new(),
            };
            let man = emit_figures(&reports, &curves, &pairs, &out)?;
            for f in &man.failures {
                eprintln!("figure {} not written: {}", f.figure, f.message);
            }
            if let Ok(t) = std::fs::read_to_string(out.join("comparison.txt")) {
                print!("{t}");
            }
        }
        Command::Run { dry_run } => {
            let path = cli
                .config
                .as_ref()
                .ok_or_else(|| Error::Config("`run` needs --config PATH".into()))?;
            let cfg = validate_config(path)?;
            if dry_run {
                print!("{}", cfg.to_toml());
                return Ok(());
            }
            let m = run_experiment(&cfg)?;
            for (stage, action) in m.last_run() {
                println!("{stage:<20} {action:?}");
            }
            if let Ok(t) = std::fs::read_to_string(cfg.output_root.join("report").join("comparison.txt")) {
                print!("{t}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if cli.sequential {
        exec::set_parallel(false);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
