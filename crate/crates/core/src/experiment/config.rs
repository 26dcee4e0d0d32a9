use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::Boundary;
use crate::maskforge::ShapeSpec;
use crate::segmenter::{Regime, SegmenterConfig};
use crate::translator::{TranslatorConfig, MIN_SIDE};

pub const SCHEMA_VERSION: u32 = 1;

/// The four independent seeds every stage draws from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Dataset ordering and synthesis dropout.
    pub global: u64,
    pub translator: u64,
    pub segmenter: u64,
    /// Classical augmentation draws.
    pub augmentation: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompositionConfig {
    pub classical_multiplicity: usize,
    pub synthetic_multiplicity: usize,
}

impl Default for CompositionConfig {
    fn default() -> Self {
        CompositionConfig {
            classical_multiplicity: 1,
            synthetic_multiplicity: 1,
        }
    }
}

/// Extra masks pushed through the trained translator for inspection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum MaskSource {
    Geometric {
        shapes: Vec<ShapeSpec>,
    },
    /// Warps of the first `count` training masks (cycling when short).
    Elastic {
        count: usize,
        amplitude: f64,
        smoothing_sigma: f64,
    },
    /// Shape-model samples with uniform weights in `[-spread, spread]` on
    /// the leading `components`.
    Pca {
        count: usize,
        components: usize,
        #[serde(default = "default_spread")]
        spread: f64,
    },
    /// Every PNG in a directory.
    Directory {
        path: PathBuf,
    },
}

fn default_spread() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Holds `train/` and `test/`, each with `images/` and `masks/`.
    pub dataset_root: PathBuf,
    pub output_root: PathBuf,
    /// Working resolution of both networks; overrides their own `side`.
    pub side: usize,
    pub translator: TranslatorConfig,
    /// Use this checkpoint instead of training the translator.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub translator_checkpoint: Option<PathBuf>,
    /// Set to false to skip the translator stage altogether.
    pub train_translator: bool,
    pub segmenter: SegmenterConfig,
    pub regimes: Vec<Regime>,
    pub composition: CompositionConfig,
    pub mask_sources: Vec<MaskSource>,
    pub seeds: Seeds,
    pub kde_boundary: Boundary,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            dataset_root: PathBuf::new(),
            output_root: PathBuf::from("experiment-output"),
            side: 128,
            translator: TranslatorConfig::default(),
            translator_checkpoint: None,
            train_translator: true,
            segmenter: SegmenterConfig::default(),
            regimes: Regime::ALL.to_vec(),
            composition: CompositionConfig::default(),
            mask_sources: Vec::new(),
            seeds: Seeds::default(),
            kde_boundary: Boundary::Truncate,
        }
    }
}

/// Keys accepted in a table, taken from the serialized defaults.
fn known_keys(value: &toml::Value) -> Vec<String> {
    value.as_table().map(|t| t.keys().cloned().collect()).unwrap_or_default()
}

fn suggest(key: &str, known: &[String]) -> Option<String> {
    known
        .iter()
        .map(|k| (strsim::jaro_winkler(key, k), k))
        .filter(|(s, _)| *s > 0.8)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, k)| k.clone())
}

/// Reject keys absent from the schema, recursing into nested tables.
fn check_keys(user: &toml::Table, reference: &toml::Value, prefix: &str, extra: &[&str]) -> Result<()> {
    let mut known = known_keys(reference);
    known.extend(extra.iter().map(|s| s.to_string()));
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        if !known.contains(k) {
            let hint = suggest(k, &known).map_or(String::new(), |s| format!(" (did you mean `{s}`?)"));
            return Err(Error::Config(format!("unknown key `{path}`{hint}")));
        }
        if let (Some(t), Some(r)) = (v.as_table(), reference.get(k)) {
            if r.is_table() {
                check_keys(t, r, &path, &[])?;
            }
        }
    }
    Ok(())
}

impl ExperimentConfig {
    /// Parse TOML text; relative paths are resolved against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let reference = toml::Value::try_from(ExperimentConfig::default()).expect("defaults serialize");
        check_keys(&user, &reference, "", &["translator_checkpoint"])?;
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        resolve(&mut cfg.dataset_root);
        resolve(&mut cfg.output_root);
        if let Some(p) = cfg.translator_checkpoint.as_mut() {
            resolve(p);
        }
        for s in &mut cfg.mask_sources {
            if let MaskSource::Directory { path } = s {
                resolve(path);
            }
        }
        cfg.resolve();
        Ok(cfg)
    }

    /// Push the shared side and seeds down into the stage configs.
    pub fn resolve(&mut self) {
        self.translator = self.translator.clone().with_side(self.side);
        self.translator.seed = self.seeds.translator;
        self.segmenter.side = self.side;
        self.segmenter.seed = self.seeds.segmenter;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Structural checks that need no filesystem access.
    pub fn check(&self) -> Result<()> {
        if self.dataset_root.as_os_str().is_empty() {
            return Err(Error::Config("`dataset_root` is required".into()));
        }
        if self.regimes.is_empty() {
            return Err(Error::Config("`regimes` is empty".into()));
        }
        for (i, r) in self.regimes.iter().enumerate() {
            if self.regimes[..i].contains(r) {
                return Err(Error::Config(format!("regime {r} listed twice")));
            }
        }
        let needs_translator = self.regimes.iter().any(|r| r.uses_synthetic()) || !self.mask_sources.is_empty();
        if needs_translator && !self.train_translator && self.translator_checkpoint.is_none() {
            return Err(Error::Config(
                "synthetic regimes or mask sources need a translator: enable `train_translator` or set `translator_checkpoint`"
                    .into(),
            ));
        }
        if self.train_translator || self.translator_checkpoint.is_some() {
            if self.side < MIN_SIDE {
                return Err(Error::Config(format!("side {} is below the translator minimum {MIN_SIDE}", self.side)));
            }
            self.translator.validate()?;
        }
        self.segmenter.validate()?;
        for s in &self.mask_sources {
            match s {
                MaskSource::Geometric { shapes } if shapes.is_empty() => {
                    return Err(Error::Config("geometric mask source has no shapes".into()))
                }
                MaskSource::Elastic { count: 0, .. } | MaskSource::Pca { count: 0, .. } => {
                    return Err(Error::Config("mask source count must be positive".into()))
                }
                MaskSource::Pca { components: 0, .. } => {
                    return Err(Error::Config("PCA mask source needs at least one component".into()))
                }
                MaskSource::Pca { spread, .. } if !(0.0..=1.0).contains(spread) => {
                    return Err(Error::Config(format!("PCA spread {spread} outside [0, 1]")))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// [`check`](Self::check) plus existence of every input path.
    pub fn validate(&self) -> Result<()> {
        self.check()?;
        for split in ["train", "test"] {
            for sub in ["images", "masks"] {
                let p = self.dataset_root.join(split).join(sub);
                if !p.is_dir() {
                    return Err(Error::Config(format!("dataset directory {} does not exist", p.display())));
                }
            }
        }
        if let Some(p) = &self.translator_checkpoint {
            if !p.is_file() {
                return Err(Error::Config(format!("translator checkpoint {} does not exist", p.display())));
            }
        }
        for s in &self.mask_sources {
            if let MaskSource::Directory { path } = s {
                if !path.is_dir() {
                    return Err(Error::Config(format!("mask directory {} does not exist", path.display())));
                }
            }
        }
        Ok(())
    }
}

/// Read, resolve and validate an experiment file.
pub fn validate_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let cfg = ExperimentConfig::from_toml_str(&text, base)?;
    cfg.validate()?;
    Ok(cfg)
}
