use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;

pub const KDE_GRID_POINTS: usize = 512;

/// How kernel mass falling outside the clip range is handled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// Drop it and renormalize over the range.
    #[default]
    Truncate,
    /// Mirror it back across the nearest bound.
    Reflect,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KdeOptions {
    pub bandwidth: Option<f64>,
    pub boundary: Boundary,
}

/// Gaussian kernel density on an evenly spaced grid, integrating to 1 over
/// `clip_range` under the trapezoidal rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
    pub clip_range: (f64, f64),
    pub boundary: Boundary,
    samples: Vec<f64>,
    normalizer: f64,
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl DensityCurve {
    fn raw(&self, x: f64) -> f64 {
        raw_density(&self.samples, self.bandwidth, self.clip_range, self.boundary, x)
    }

    /// Renormalized density at any `x` inside the clip range (0 outside).
    pub fn density_at(&self, x: f64) -> f64 {
        let (lo, hi) = self.clip_range;
        if x < lo || x > hi {
            return 0.0;
        }
        self.raw(x) / self.normalizer
    }

    /// Trapezoidal integral of the curve over its grid.
    pub fn integral(&self) -> f64 {
        trapezoid(&self.grid, &self.density)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }
}

fn raw_density(samples: &[f64], h: f64, (lo, hi): (f64, f64), boundary: Boundary, x: f64) -> f64 {
    let k = |c: f64| {
        let z = (x - c) / h;
        INV_SQRT_2PI * (-0.5 * z * z).exp()
    };
    let s: f64 = samples
        .iter()
        .map(|&c| match boundary {
            Boundary::Truncate => k(c),
            Boundary::Reflect => k(c) + k(2.0 * lo - c) + k(2.0 * hi - c),
        })
        .sum();
    s / (samples.len() as f64 * h)
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1]))
        .sum()
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// `0.9 · min(σ, IQR / 1.34) · n^(−1/5)`, falling back to σ when the IQR is 0.
pub fn silverman_bandwidth(values: &[f64]) -> Result<f64> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Estimation(format!("need at least 2 values, got {n}")));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    if !(spread > 0.0) {
        return Err(Error::Estimation("values have zero spread; pass an explicit bandwidth".into()));
    }
    Ok(0.9 * spread * (n as f64).powf(-0.2))
}

pub fn kde_estimate(values: &[f64], clip: (f64, f64), bandwidth: Option<f64>) -> Result<DensityCurve> {
    kde_estimate_with(
        values,
        clip,
        KdeOptions {
            bandwidth,
            boundary: Boundary::Truncate,
        },
    )
}

pub fn kde_estimate_with(values: &[f64], clip: (f64, f64), opts: KdeOptions) -> Result<DensityCurve> {
    let (lo, hi) = clip;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Argument(format!("invalid clip range [{lo}, {hi}]")));
    }
    if values.len() < 2 {
        return Err(Error::Estimation(format!("need at least 2 values, got {}", values.len())));
    }
    if let Some(v) = values.iter().find(|v| !(lo..=hi).contains(*v)) {
        return Err(Error::Argument(format!("value {v} outside clip range [{lo}, {hi}]")));
    }
    let bandwidth = match opts.bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::Argument(format!("bandwidth must be positive, got {h}"))),
        None => silverman_bandwidth(values)?,
    };
    let step = (hi - lo) / (KDE_GRID_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..KDE_GRID_POINTS)
        .map(|i| if i == KDE_GRID_POINTS - 1 { hi } else { lo + i as f64 * step })
        .collect();
    let raw: Vec<f64> = exec::map_slice(&grid, |&x| raw_density(values, bandwidth, clip, opts.boundary, x));
    let normalizer = trapezoid(&grid, &raw);
    if !(normalizer > 0.0) {
        return Err(Error::Estimation("kernel mass inside the clip range is zero".into()));
    }
    let density = raw.iter().map(|r| r / normalizer).collect();
    Ok(DensityCurve {
        grid,
        density,
        bandwidth,
        clip_range: clip,
        boundary: opts.boundary,
        samples: values.to_vec(),
        normalizer,
    })
}
