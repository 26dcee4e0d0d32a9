use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;
use serde::Serialize;

use super::{compare_regimes, kde_estimate_with, Boundary, DensityCurve, KdeOptions, Metric, RegimeReport};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::imageio::{image_to_rgb, mask_to_gray};
use crate::ingest::PairedSample;
use crate::segmenter::Regime;

/// Pairs per synthesis grid image.
pub const GRID_COLUMNS: usize = 8;

/// Metrics that get a density panel.
const KDE_METRICS: [Metric; 3] = [Metric::Dice, Metric::Sensitivity, Metric::Specificity];

#[derive(Clone, Debug)]
pub struct KdeSeries {
    pub metric: Metric,
    pub regime: Regime,
    pub curve: DensityCurve,
}

/// Width used when a metric has no spread across images.
pub const FALLBACK_BANDWIDTH: f64 = 0.05;

/// Density curves for the panels. When both ClassicAug and AllAug are
/// present only those two are drawn, otherwise every regime is.
pub fn density_series(reports: &[RegimeReport], boundary: Boundary) -> Vec<KdeSeries> {
    let pair = [Regime::ClassicAug, Regime::AllAug];
    let chosen: Vec<&RegimeReport> = if pair.iter().all(|r| reports.iter().any(|x| x.regime == *r)) {
        reports.iter().filter(|x| pair.contains(&x.regime)).collect()
    } else {
        reports.iter().collect()
    };
    let mut out = Vec::new();
    for m in KDE_METRICS {
        for r in &chosen {
            let vals = r.values(m);
            let opts = KdeOptions { bandwidth: None, boundary };
            let curve = kde_estimate_with(&vals, (0.0, 1.0), opts).or_else(|e| match e {
                Error::Estimation(_) if vals.len() >= 2 => {
                    log::warn!("{} {m}: {e}; using bandwidth {FALLBACK_BANDWIDTH}", r.regime);
                    kde_estimate_with(&vals, (0.0, 1.0), KdeOptions { bandwidth: Some(FALLBACK_BANDWIDTH), boundary })
                }
                other => Err(other),
            });
            match curve {
                Ok(curve) => out.push(KdeSeries { metric: m, regime: r.regime, curve }),
                Err(e) => log::warn!("no density for {} {m}: {e}", r.regime),
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FigureFailure {
    pub figure: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FigureManifest {
    pub written: Vec<PathBuf>,
    pub failures: Vec<FigureFailure>,
}

impl FigureManifest {
    fn record(&mut self, figure: &str, r: Result<Vec<PathBuf>>) {
        match r {
            Ok(paths) => self.written.extend(paths),
            Err(e) => {
                log::warn!("figure {figure} not written: {e}");
                self.failures.push(FigureFailure {
                    figure: figure.to_string(),
                    message: e.to_string(),
                })
            }
        }
    }
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::io(path, e))?;
    write_atomic(path, &bytes)
}

fn save_json(value: &impl Serialize, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

/// Mask row above generated-image row, one column per pair.
fn synthesis_grids(pairs: &[PairedSample], out: &Path) -> Result<Vec<PathBuf>> {
    if pairs.is_empty() {
        return Err(Error::Argument("no synthetic pairs to show".into()));
    }
    let (h, w) = (pairs[0].mask.height() as u32, pairs[0].mask.width() as u32);
    if pairs.iter().any(|p| p.mask.height() as u32 != h || p.mask.width() as u32 != w) {
        return Err(Error::Argument("synthetic pairs differ in size".into()));
    }
    let mut written = Vec::new();
    for (g, chunk) in pairs.chunks(GRID_COLUMNS).enumerate() {
        let mut canvas = RgbImage::from_pixel(w * chunk.len() as u32, 2 * h, Rgb([255, 255, 255]));
        for (i, p) in chunk.iter().enumerate() {
            let x0 = i as u32 * w;
            let mask = mask_to_gray(&p.mask);
            let img = image_to_rgb(&p.image);
            for y in 0..h {
                for x in 0..w {
                    let v = mask.get_pixel(x, y)[0];
                    canvas.put_pixel(x0 + x, y, Rgb([v, v, v]));
                    canvas.put_pixel(x0 + x, h + y, *img.get_pixel(x, y));
                }
            }
        }
        let path = out.join(format!("synthesis_grid_{g:02}.png"));
        save_png(&canvas, &path)?;
        written.push(path);
    }
    Ok(written)
}

const PALETTE: [[u8; 3]; 4] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40]];

fn regime_color(r: Regime) -> Rgb<u8> {
    Rgb(PALETTE[match r {
        Regime::ClassicAug => 0,
        Regime::AllAug => 1,
        Regime::NoAug => 2,
        Regime::Mask2LesionAug => 3,
    }])
}

#[derive(Serialize)]
struct KdeSidecar<'a> {
    metric: Metric,
    series: Vec<SidecarSeries<'a>>,
}

#[derive(Serialize)]
struct SidecarSeries<'a> {
    regime: Regime,
    bandwidth: f64,
    clip_range: (f64, f64),
    boundary: super::Boundary,
    grid: &'a [f64],
    density: &'a [f64],
}

fn kde_plot(metric: Metric, series: &[&KdeSeries], out: &Path) -> Result<Vec<PathBuf>> {
    if series.is_empty() {
        return Err(Error::Argument(format!("no density curves for {metric}")));
    }
    let (wd, ht, margin) = (480u32, 320u32, 30f32);
    let mut img = RgbImage::from_pixel(wd, ht, Rgb([255, 255, 255]));
    let black = Rgb([0, 0, 0]);
    let (x_end, y_base) = (wd as f32 - 10.0, ht as f32 - margin);
    draw_line_segment_mut(&mut img, (margin, y_base), (x_end, y_base), black);
    draw_line_segment_mut(&mut img, (margin, 10.0), (margin, y_base), black);
    let lo = series.iter().map(|s| s.curve.clip_range.0).fold(f64::INFINITY, f64::min);
    let hi = series.iter().map(|s| s.curve.clip_range.1).fold(f64::NEG_INFINITY, f64::max);
    let peak = series
        .iter()
        .flat_map(|s| s.curve.density.iter().copied())
        .fold(0.0, f64::max)
        .max(1e-12);
    let px = |x: f64| margin + ((x - lo) / (hi - lo)) as f32 * (x_end - margin);
    let py = |d: f64| y_base - (d / peak) as f32 * (y_base - 20.0);
    for (k, s) in series.iter().enumerate() {
        let color = regime_color(s.regime);
        let c = &s.curve;
        for i in 1..c.grid.len() {
            draw_line_segment_mut(
                &mut img,
                (px(c.grid[i - 1]), py(c.density[i - 1])),
                (px(c.grid[i]), py(c.density[i])),
                color,
            );
        }
        // legend swatch, top right, in series order
        draw_filled_rect_mut(&mut img, Rect::at(wd as i32 - 24, 12 + 14 * k as i32).of_size(10, 10), color);
    }
    let png = out.join(format!("kde_{}.png", metric.name()));
    save_png(&img, &png)?;
    let json = out.join(format!("kde_{}.json", metric.name()));
    let sidecar = KdeSidecar {
        metric,
        series: series
            .iter()
            .map(|s| SidecarSeries {
                regime: s.regime,
                bandwidth: s.curve.bandwidth,
                clip_range: s.curve.clip_range,
                boundary: s.curve.boundary,
                grid: &s.curve.grid,
                density: &s.curve.density,
            })
            .collect(),
    };
    save_json(&sidecar, &json)?;
    Ok(vec![png, json])
}

fn comparison_files(reports: &[RegimeReport], out: &Path) -> Result<Vec<PathBuf>> {
    let table = compare_regimes(reports)?;
    let json = out.join("comparison.json");
    save_json(&table, &json)?;
    let txt = out.join("comparison.txt");
    write_atomic(&txt, table.render_text().as_bytes())?;
    Ok(vec![json, txt])
}

/// Write synthesis grids, density panels (dice, sensitivity, specificity)
/// and the comparison table. A figure whose input is missing is listed in
/// `failures`; the others are still written.
pub fn emit_figures(
    reports: &[RegimeReport],
    curves: &[KdeSeries],
    synth_pairs: &[PairedSample],
    out_dir: &Path,
) -> Result<FigureManifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = FigureManifest::default();
    manifest.record("synthesis_grid", synthesis_grids(synth_pairs, out_dir));
    for m in KDE_METRICS {
        let series: Vec<&KdeSeries> = curves.iter().filter(|s| s.metric == m).collect();
        manifest.record(&format!("kde_{}", m.name()), kde_plot(m, &series, out_dir));
    }
    manifest.record("comparison", comparison_files(reports, out_dir));
    Ok(manifest)
}
