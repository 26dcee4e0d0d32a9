use serde::{Deserialize, Serialize};

use super::Regime;
use crate::error::{Error, Result};
use crate::exec;
use crate::ingest::{classical_augment, AugmentOp, DatasetManifest, PairedSample, Provenance, Split};
use crate::translator::{synthesize, Checkpoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompositionOptions {
    /// Classically augmented copies per real sample.
    pub classical_multiplicity: usize,
    /// Synthetic images per real mask.
    pub synthetic_multiplicity: usize,
    pub augmentation_seed: u64,
    pub synthesis_seed: u64,
}

impl Default for CompositionOptions {
    fn default() -> Self {
        CompositionOptions {
            classical_multiplicity: 1,
            synthetic_multiplicity: 1,
            augmentation_seed: 0,
            synthesis_seed: 0,
        }
    }
}

/// Sample counts of a composed training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionLog {
    pub regime: Regime,
    pub real: usize,
    pub classical: usize,
    pub synthetic: usize,
    pub total: usize,
    /// Masks the translator could not use (reported, not fatal).
    pub skipped: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Composition {
    pub manifest: DatasetManifest,
    pub log: CompositionLog,
}

fn mix(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (i as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Assemble the training set for `regime`: real samples, then classical
/// copies, then synthetic pairs generated from the real masks.
pub fn compose_regime_dataset(
    real: &DatasetManifest,
    regime: Regime,
    checkpoint: Option<&Checkpoint>,
    opts: &CompositionOptions,
) -> Result<Composition> {
    if real.split == Split::Test {
        return Err(Error::Validation("refusing to augment a test split".into()));
    }
    if let Some(s) = real.samples.iter().find(|s| s.provenance != Provenance::Real) {
        return Err(Error::Validation(format!(
            "sample `{}` is not real; compose from the real manifest only",
            s.id
        )));
    }
    if regime.uses_synthetic() && checkpoint.is_none() {
        return Err(Error::Config(format!("regime {regime} needs a translator checkpoint")));
    }
    let mut samples: Vec<PairedSample> = real.samples.clone();

    let mut classical = 0;
    if regime.uses_classical() && opts.classical_multiplicity > 0 {
        let ops = vec![AugmentOp::Random; opts.classical_multiplicity];
        let indexed: Vec<(usize, &PairedSample)> = real.samples.iter().enumerate().collect();
        let copies = exec::map_slice(&indexed, |&(i, s)| classical_augment(s, &ops, mix(opts.augmentation_seed, i)));
        for c in copies {
            let c = c?;
            classical += c.len();
            samples.extend(c);
        }
    }

    let mut synthetic = 0;
    let mut skipped = Vec::new();
    if regime.uses_synthetic() && opts.synthetic_multiplicity > 0 {
        let ck = checkpoint.expect("checked above");
        let m = opts.synthetic_multiplicity;
        let masks: Vec<(String, _)> = (0..m)
            .flat_map(|j| {
                real.samples.iter().map(move |s| {
                    let id = if m == 1 { s.id.clone() } else { format!("{}-s{j}", s.id) };
                    (id, s.mask.clone())
                })
            })
            .collect();
        for (r, (id, _)) in synthesize(ck, &masks, opts.synthesis_seed).into_iter().zip(&masks) {
            match r {
                Ok(p) => {
                    samples.push(p);
                    synthetic += 1;
                }
                Err(Error::Degenerate(msg)) => {
                    log::warn!("skipping synthetic pair for `{id}`: {msg}");
                    skipped.push(id.clone());
                }
                Err(e) => return Err(e),
            }
        }
    }

    let log = CompositionLog {
        regime,
        real: real.samples.len(),
        classical,
        synthetic,
        total: samples.len(),
        skipped,
    };
    let manifest = DatasetManifest::new(samples, real.split, real.seed, real.source_path.clone())?;
    Ok(Composition { manifest, log })
}
