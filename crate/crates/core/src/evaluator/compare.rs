use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{format_mean_se, Metric, RegimeReport};
use crate::error::{Error, Result};
use crate::segmenter::Regime;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    pub mean: f64,
    pub standard_error: f64,
    /// Best regime for this metric: highest mean, ties broken by the
    /// smaller standard error.
    pub best: bool,
}

/// AllAug over ClassicAug for one metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub metric: Metric,
    /// `(all − classic) / classic`, as a fraction.
    pub relative: f64,
    /// `all − classic`.
    pub absolute: f64,
}

/// Regimes × metrics grid of `mean ± standard error`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub regimes: Vec<Regime>,
    pub metrics: Vec<Metric>,
    /// `cells[regime][metric]`.
    pub cells: Vec<Vec<TableCell>>,
    pub n: Vec<usize>,
    /// Present when both AllAug and ClassicAug were compared.
    pub improvement: Option<Vec<Improvement>>,
}

impl ComparisonTable {
    pub fn cell(&self, regime: Regime, metric: Metric) -> Option<&TableCell> {
        let r = self.regimes.iter().position(|&x| x == regime)?;
        let m = self.metrics.iter().position(|&x| x == metric)?;
        Some(&self.cells[r][m])
    }

    /// The flagged regime for `metric`.
    pub fn best(&self, metric: Metric) -> Option<Regime> {
        let m = self.metrics.iter().position(|&x| x == metric)?;
        self.cells.iter().position(|row| row[m].best).map(|r| self.regimes[r])
    }

    pub fn improvement(&self, metric: Metric) -> Option<Improvement> {
        self.improvement.as_ref()?.iter().find(|i| i.metric == metric).copied()
    }

    /// Fixed-width text rendering; best cells carry a trailing `*`.
    pub fn render_text(&self) -> String {
        let mut widths = vec![self.regimes.iter().map(|r| r.label().len()).max().unwrap_or(0).max(6)];
        let body: Vec<Vec<String>> = self
            .cells
            .iter()
            .map(|row| {
                row.iter()
                    .map(|c| format!("{}{}", format_mean_se(c.mean, c.standard_error), if c.best { "*" } else { " " }))
                    .collect()
            })
            .collect();
        for (j, m) in self.metrics.iter().enumerate() {
            let w = body.iter().map(|r| r[j].chars().count()).max().unwrap_or(0).max(m.label().len());
            widths.push(w);
        }
        let mut out = String::new();
        let _ = write!(out, "{:<w$}", "Regime", w = widths[0]);
        for (j, m) in self.metrics.iter().enumerate() {
            let _ = write!(out, "  {:<w$}", m.label(), w = widths[j + 1]);
        }
        out.push('\n');
        for (i, r) in self.regimes.iter().enumerate() {
            let _ = write!(out, "{:<w$}", r.label(), w = widths[0]);
            for (j, cell) in body[i].iter().enumerate() {
                let pad = widths[j + 1] - cell.chars().count();
                let _ = write!(out, "  {cell}{}", " ".repeat(pad));
            }
            out.push('\n');
        }
        if let Some(imp) = &self.improvement {
            out.push_str("\nAllAug vs ClassicAug:\n");
            for i in imp {
                let _ = writeln!(
                    out,
                    "  {:<12} relative {:+.2}%  absolute {:+.4}",
                    i.metric.label(),
                    100.0 * i.relative,
                    i.absolute
                );
            }
        }
        out
    }
}

pub fn compare_regimes(reports: &[RegimeReport]) -> Result<ComparisonTable> {
    if reports.len() < 2 {
        return Err(Error::Argument(format!("need at least 2 regime reports, got {}", reports.len())));
    }
    for (i, r) in reports.iter().enumerate() {
        if reports[..i].iter().any(|o| o.regime == r.regime) {
            return Err(Error::Argument(format!("regime {} reported twice", r.regime)));
        }
    }
    let metrics = Metric::ALL.to_vec();
    let mut cells: Vec<Vec<TableCell>> = reports
        .iter()
        .map(|r| {
            metrics
                .iter()
                .map(|&m| TableCell {
                    mean: r.mean.get(m),
                    standard_error: r.standard_error.get(m),
                    best: false,
                })
                .collect()
        })
        .collect();
    for j in 0..metrics.len() {
        let best = (0..cells.len())
            .min_by(|&a, &b| {
                let (x, y) = (&cells[a][j], &cells[b][j]);
                y.mean
                    .total_cmp(&x.mean)
                    .then(x.standard_error.total_cmp(&y.standard_error))
            })
            .expect("at least two rows");
        cells[best][j].best = true;
    }
    let find = |g: Regime| reports.iter().find(|r| r.regime == g);
    let improvement = match (find(Regime::AllAug), find(Regime::ClassicAug)) {
        (Some(all), Some(classic)) => Some(
            metrics
                .iter()
                .map(|&m| {
                    let (a, c) = (all.mean.get(m), classic.mean.get(m));
                    Improvement {
                        metric: m,
                        relative: if c == 0.0 { f64::NAN } else { (a - c) / c },
                        absolute: a - c,
                    }
                })
                .collect(),
        ),
        _ => None,
    };
    Ok(ComparisonTable {
        regimes: reports.iter().map(|r| r.regime).collect(),
        metrics,
        cells,
        n: reports.iter().map(|r| r.n).collect(),
        improvement,
    })
}
