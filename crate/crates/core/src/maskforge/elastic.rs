use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::BinaryMask;

/// Random control-grid displacement field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformationField {
    /// Control nodes per axis (spanning the frame corner to corner).
    pub grid: usize,
    /// Control displacements are uniform in `[-amplitude, amplitude]` pixels.
    pub amplitude: f64,
    /// Gaussian smoothing of the dense field, in pixels.
    pub smoothing_sigma: f64,
    pub seed: u64,
}

/// Control nodes per axis used when a caller does not choose one.
pub const DEFAULT_GRID: usize = 8;

impl DeformationField {
    pub fn new(amplitude: f64, smoothing_sigma: f64, seed: u64) -> Self {
        DeformationField {
            grid: DEFAULT_GRID,
            amplitude,
            smoothing_sigma,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 {
            return Err(Error::Argument(format!("control grid must be at least 2×2, got {}", self.grid)));
        }
        if !(self.amplitude >= 0.0) || !self.amplitude.is_finite() {
            return Err(Error::Argument(format!("amplitude {} must be finite and ≥ 0", self.amplitude)));
        }
        if !(self.smoothing_sigma >= 0.0) || !self.smoothing_sigma.is_finite() {
            return Err(Error::Argument(format!("smoothing sigma {} must be finite and ≥ 0", self.smoothing_sigma)));
        }
        Ok(())
    }

    /// Dense `(dy, dx)` displacement per pixel, row-major.
    pub fn dense(&self, height: usize, width: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        self.validate()?;
        let g = self.grid;
        if self.amplitude == 0.0 {
            return Ok((vec![0.0; height * width], vec![0.0; height * width]));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let a = self.amplitude;
        let mut ctrl = vec![(0.0, 0.0); g * g];
        for c in &mut ctrl {
            *c = (rng.random_range(-a..=a), rng.random_range(-a..=a));
        }
        let mut dy = vec![0.0; height * width];
        let mut dx = vec![0.0; height * width];
        let scale_y = (g - 1) as f64 / (height.max(2) - 1) as f64;
        let scale_x = (g - 1) as f64 / (width.max(2) - 1) as f64;
        for y in 0..height {
            let gy = y as f64 * scale_y;
            let i0 = (gy.floor() as usize).min(g - 2);
            let ty = gy - i0 as f64;
            for x in 0..width {
                let gx = x as f64 * scale_x;
                let j0 = (gx.floor() as usize).min(g - 2);
                let tx = gx - j0 as f64;
                let at = |i: usize, j: usize| ctrl[i * g + j];
                let lerp = |p: (f64, f64), q: (f64, f64), t: f64| (p.0 + (q.0 - p.0) * t, p.1 + (q.1 - p.1) * t);
                let top = lerp(at(i0, j0), at(i0, j0 + 1), tx);
                let bot = lerp(at(i0 + 1, j0), at(i0 + 1, j0 + 1), tx);
                let (vy, vx) = lerp(top, bot, ty);
                dy[y * width + x] = vy;
                dx[y * width + x] = vx;
            }
        }
        if self.smoothing_sigma > 0.0 {
            gaussian_smooth(&mut dy, height, width, self.smoothing_sigma);
            gaussian_smooth(&mut dx, height, width, self.smoothing_sigma);
        }
        Ok((dy, dx))
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with edge clamping.
fn gaussian_smooth(field: &mut [f64], height: usize, width: usize, sigma: f64) {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; field.len()];
    for y in 0..height {
        for x in 0..width {
            tmp[y * width + x] = k
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    let xx = (x as isize + i as isize - r).clamp(0, width as isize - 1) as usize;
                    w * field[y * width + xx]
                })
                .sum();
        }
    }
    for y in 0..height {
        for x in 0..width {
            field[y * width + x] = k
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    let yy = (y as isize + i as isize - r).clamp(0, height as isize - 1) as usize;
                    w * tmp[yy * width + x]
                })
                .sum();
        }
    }
}

/// Warp `mask` by backward mapping through the dense field with
/// nearest-neighbour sampling; samples outside the frame are background.
pub fn elastic_deform(mask: &BinaryMask, field: &DeformationField) -> Result<BinaryMask> {
    if mask.is_empty() {
        return Err(Error::Argument("elastic deformation needs a non-empty mask".into()));
    }
    let (h, w) = (mask.height(), mask.width());
    let (dy, dx) = field.dense(h, w)?;
    let out = BinaryMask::from_fn(h, w, |y, x| {
        let sy = (y as f64 + dy[y * w + x]).round();
        let sx = (x as f64 + dx[y * w + x]).round();
        sy >= 0.0 && sx >= 0.0 && (sy as usize) < h && (sx as usize) < w && mask.get(sy as usize, sx as usize) == 1
    });
    if out.is_empty() {
        return Err(Error::Degenerate(format!(
            "elastic deformation with seed {} produced an empty mask",
            field.seed
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn disk(side: usize, r: f64) -> BinaryMask {
        let c = side as f64 / 2.0;
        BinaryMask::from_fn(side, side, |y, x| (y as f64 + 0.5 - c).powi(2) + (x as f64 + 0.5 - c).powi(2) <= r * r)
    }

    fn field(amplitude: f64, seed: u64) -> DeformationField {
        DeformationField {
            grid: 5,
            amplitude,
            smoothing_sigma: 4.0,
            seed,
        }
    }

    #[test]
    fn zero_amplitude_is_identity() {
        let m = disk(64, 20.0);
        assert_eq!(elastic_deform(&m, &field(0.0, 3)).unwrap(), m);
    }

    #[test]
    fn same_seed_same_output() {
        let m = disk(64, 20.0);
        let a = elastic_deform(&m, &field(6.0, 11)).unwrap();
        let b = elastic_deform(&m, &field(6.0, 11)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, m);
    }

    #[test]
    fn area_drift_bounded_over_seeds() {
        let m = disk(128, 30.0);
        let base = m.foreground_count() as f64;
        let mut worst: f64 = 0.0;
        for seed in 0..100 {
            let out = elastic_deform(&m, &DeformationField::new(8.0, 4.0, seed)).unwrap();
            worst = worst.max((out.foreground_count() as f64 - base).abs() / base);
        }
        assert!(worst < 0.25, "worst relative area drift {worst}");
    }

    #[test]
    fn invalid_fields_and_inputs() {
        let m = disk(32, 8.0);
        assert!(elastic_deform(&m, &DeformationField { grid: 1, ..field(1.0, 0) }).is_err());
        assert!(elastic_deform(&m, &field(-1.0, 0)).is_err());
        assert!(elastic_deform(&BinaryMask::zeros(32, 32), &field(1.0, 0)).is_err());
        // a huge displacement pushes the single pixel out of frame
        let dot = BinaryMask::from_fn(8, 8, |y, x| y == 3 && x == 3);
        let res = (0..20).map(|s| elastic_deform(&dot, &DeformationField { grid: 2, amplitude: 50.0, smoothing_sigma: 0.0, seed: s }));
        assert!(res.into_iter().any(|r| matches!(r, Err(Error::Degenerate(_)))));
    }

    proptest! {
        #[test]
        fn output_always_binary(seed in any::<u64>(), amp in 0.0f64..10.0, sigma in 0.0f64..5.0, grid in 2usize..8, r in 3.0f64..14.0) {
            let m = disk(32, r);
            match elastic_deform(&m, &DeformationField { grid, amplitude: amp, smoothing_sigma: sigma, seed }) {
                Ok(out) => prop_assert!(out.values().iter().all(|&v| v <= 1)),
                Err(e) => prop_assert!(matches!(e, Error::Degenerate(_))),
            }
        }
    }
}
