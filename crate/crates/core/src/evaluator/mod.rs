//! Segmentation metrics, aggregation, density estimates, regime comparison
//! and report figures.

mod compare;
mod figures;
mod kde;

pub use compare::{compare_regimes, ComparisonTable, Improvement, TableCell};
pub use figures::{density_series, emit_figures, FigureFailure, FigureManifest, KdeSeries, FALLBACK_BANDWIDTH, GRID_COLUMNS};
pub use kde::{kde_estimate, kde_estimate_with, silverman_bandwidth, Boundary, DensityCurve, KdeOptions, KDE_GRID_POINTS};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::ingest::BinaryMask;
use crate::segmenter::Regime;

/// Dice when both prediction and ground truth are empty.
pub const DICE_BOTH_EMPTY: f64 = 1.0;
/// Sensitivity when the ground truth has no positives (`tp + fn = 0`).
pub const SENSITIVITY_NO_POSITIVES: f64 = 1.0;
/// Specificity when the ground truth has no negatives (`tn + fp = 0`).
pub const SPECIFICITY_NO_NEGATIVES: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Dice,
    Sensitivity,
    Specificity,
    Accuracy,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Dice, Metric::Sensitivity, Metric::Specificity, Metric::Accuracy];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Dice => "dice",
            Metric::Sensitivity => "sensitivity",
            Metric::Specificity => "specificity",
            Metric::Accuracy => "accuracy",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Metric::Dice => "Dice",
            Metric::Sensitivity => "Sensitivity",
            Metric::Specificity => "Specificity",
            Metric::Accuracy => "Accuracy",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-image confusion counts and the metrics derived from them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub id: String,
    pub dice: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

fn ratio(num: u64, den: u64, fallback: f64, what: &str, id: &str) -> f64 {
    if den == 0 {
        log::debug!("{id}: {what} has a zero denominator, using {fallback}");
        fallback
    } else {
        num as f64 / den as f64
    }
}

impl MetricRecord {
    /// Derive all four metrics from counts.
    pub fn from_counts(id: impl Into<String>, tp: u64, fp: u64, tn: u64, fn_: u64) -> Result<Self> {
        let id = id.into();
        let total = tp + fp + tn + fn_;
        if total == 0 {
            return Err(Error::Argument(format!("{id}: no pixels")));
        }
        let dice = ratio(2 * tp, 2 * tp + fp + fn_, DICE_BOTH_EMPTY, "dice", &id);
        let sensitivity = ratio(tp, tp + fn_, SENSITIVITY_NO_POSITIVES, "sensitivity", &id);
        let specificity = ratio(tn, tn + fp, SPECIFICITY_NO_NEGATIVES, "specificity", &id);
        let accuracy = (tp + tn) as f64 / total as f64;
        Ok(MetricRecord {
            id,
            dice,
            sensitivity,
            specificity,
            accuracy,
            tp,
            fp,
            tn,
            fn_,
        })
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Dice => self.dice,
            Metric::Sensitivity => self.sensitivity,
            Metric::Specificity => self.specificity,
            Metric::Accuracy => self.accuracy,
        }
    }

    /// Check stored metrics against the counts (for records read from disk).
    pub fn validate(&self) -> Result<()> {
        let fresh = Self::from_counts(self.id.clone(), self.tp, self.fp, self.tn, self.fn_)?;
        for m in Metric::ALL {
            if (fresh.get(m) - self.get(m)).abs() > 1e-12 {
                return Err(Error::Validation(format!(
                    "{}: stored {m} {} disagrees with counts ({})",
                    self.id,
                    self.get(m),
                    fresh.get(m)
                )));
            }
        }
        Ok(())
    }
}

pub fn confusion_metrics(id: &str, pred: &BinaryMask, gt: &BinaryMask) -> Result<MetricRecord> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::Argument(format!(
            "{id}: prediction is {}x{}, ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut c = [0u64; 4];
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        c[((p << 1) | g) as usize] += 1;
    }
    // index = pred*2 + gt: 0 tn, 1 fn, 2 fp, 3 tp
    MetricRecord::from_counts(id, c[3], c[2], c[0], c[1])
}

/// Metrics for many `(id, prediction, ground truth)` triples, in input order.
pub fn batch_metrics(items: &[(String, BinaryMask, BinaryMask)]) -> Result<Vec<MetricRecord>> {
    exec::map_slice(items, |(id, p, g)| confusion_metrics(id, p, g))
        .into_iter()
        .collect()
}

/// One value per metric.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub dice: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
}

impl MetricSet {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Dice => self.dice,
            Metric::Sensitivity => self.sensitivity,
            Metric::Specificity => self.specificity,
            Metric::Accuracy => self.accuracy,
        }
    }

    fn set(&mut self, metric: Metric, v: f64) {
        match metric {
            Metric::Dice => self.dice = v,
            Metric::Sensitivity => self.sensitivity = v,
            Metric::Specificity => self.specificity = v,
            Metric::Accuracy => self.accuracy = v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub regime: Regime,
    pub n: usize,
    pub mean: MetricSet,
    pub standard_error: MetricSet,
    pub per_image: Vec<MetricRecord>,
}

impl RegimeReport {
    /// `mean ± standard error` with four decimals.
    pub fn cell(&self, metric: Metric) -> String {
        format_mean_se(self.mean.get(metric), self.standard_error.get(metric))
    }

    pub fn values(&self, metric: Metric) -> Vec<f64> {
        self.per_image.iter().map(|r| r.get(metric)).collect()
    }
}

pub fn format_mean_se(mean: f64, se: f64) -> String {
    format!("{mean:.4} ± {se:.4}")
}

/// Mean and sample standard error (ddof 1). Values are summed in sorted
/// order, so the result does not depend on record order.
pub fn mean_and_standard_error(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let mut dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    dev.sort_by(f64::total_cmp);
    let var = dev.iter().sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn aggregate_metrics(records: &[MetricRecord], regime: Regime) -> Result<RegimeReport> {
    if records.is_empty() {
        return Err(Error::Argument(format!("no metric records for {regime}")));
    }
    if records.len() == 1 {
        log::warn!("{regime}: a single record, standard error reported as 0");
    }
    let mut mean = MetricSet::default();
    let mut se = MetricSet::default();
    for m in Metric::ALL {
        let vals: Vec<f64> = records.iter().map(|r| r.get(m)).collect();
        let (mu, s) = mean_and_standard_error(&vals);
        mean.set(m, mu);
        se.set(m, s);
    }
    Ok(RegimeReport {
        regime,
        n: records.len(),
        mean,
        standard_error: se,
        per_image: records.to_vec(),
    })
}

#[cfg(test)]
mod tests;
