//! Declarative end-to-end experiment: ingest, translator, synthesis,
//! per-regime segmenters, evaluation and report, resumable by content hash.

mod config;
mod manifest;
mod run;

pub use config::{validate_config, CompositionConfig, ExperimentConfig, MaskSource, Seeds, SCHEMA_VERSION};
pub use manifest::{
    verify_manifest, ArtifactRecord, ExperimentManifest, HistoryEvent, StageAction, StageRecord, StageStatus, MANIFEST_FILE,
};
pub use run::run_experiment;

#[cfg(test)]
mod tests;
