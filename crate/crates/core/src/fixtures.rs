//! Synthetic dermoscopy-like fixtures: irregular lesion masks rendered as
//! darker pigmented blobs on textured skin. Used by tests, benches and the
//! `fixtures` CLI command.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio;
use crate::ingest::{BinaryMask, ImageTensor, PairedSample, Provenance};
use crate::maskforge::{elastic_deform, make_geometric_mask, DeformationField, ShapeSpec};

/// Random ellipse, elastically deformed; retried until non-empty.
pub fn lesion_mask(side: usize, rng: &mut impl Rng) -> BinaryMask {
    let s = side as f64;
    loop {
        let spec = ShapeSpec::Ellipse {
            cx: s * rng.random_range(0.4..0.6),
            cy: s * rng.random_range(0.4..0.6),
            rx: s * rng.random_range(0.15..0.3),
            ry: s * rng.random_range(0.15..0.3),
            angle_deg: rng.random_range(0.0..180.0),
        };
        let Ok(base) = make_geometric_mask(&spec, side) else { continue };
        let field = DeformationField::new(s * 0.04, s * 0.06, rng.random());
        if let Ok(m) = elastic_deform(&base, &field) {
            return m;
        }
    }
}

/// Render a lesion image for `mask`.
pub fn render_lesion(mask: &BinaryMask, rng: &mut impl Rng) -> ImageTensor {
    let (h, w) = (mask.height(), mask.width());
    let skin = [0.86, 0.66, 0.56];
    let lesion = [0.42, 0.26, 0.18];
    let tint: f64 = rng.random_range(-0.05..0.05);
    let phase: (f64, f64) = (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3));
    let (cy, cx, area) = centroid(mask);
    let radius = (area / std::f64::consts::PI).sqrt().max(1.0);
    let mut values = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64 / h as f64, x as f64 / w as f64);
            let shade = 0.04 * ((fx * 7.0 + phase.0).sin() + (fy * 5.0 + phase.1).cos());
            let inside = mask.get(y, x) == 1;
            let d = (((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt() / radius).min(1.0);
            for c in 0..3 {
                let noise = rng.random_range(-0.03..0.03);
                let v = if inside {
                    lesion[c] * (0.75 + 0.25 * d) + tint + noise
                } else {
                    skin[c] + shade + tint + noise
                };
                values[(c * h + y) * w + x] = (v.clamp(0.0, 1.0) * 2.0 - 1.0) as f32;
            }
        }
    }
    ImageTensor::new(h, w, 3, values).expect("values in range")
}

fn centroid(mask: &BinaryMask) -> (f64, f64, f64) {
    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) == 1 {
                sy += y as f64;
                sx += x as f64;
                n += 1.0;
            }
        }
    }
    if n == 0.0 {
        return (mask.height() as f64 / 2.0, mask.width() as f64 / 2.0, 0.0);
    }
    (sy / n, sx / n, n)
}

/// `n` rendered pairs with ids `{prefix}{index:04}`.
pub fn synthetic_pairs(n: usize, side: usize, seed: u64, prefix: &str) -> Vec<PairedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mask = lesion_mask(side, &mut rng);
            let image = render_lesion(&mask, &mut rng);
            PairedSample::new(format!("{prefix}{i:04}"), image, mask, Provenance::Real).expect("matching sizes")
        })
        .collect()
}

/// Write train and test splits in `<root>/<split>/{images,masks}` layout.
pub fn write_dataset(root: &Path, side: usize, n_train: usize, n_test: usize, seed: u64) -> Result<()> {
    if n_train == 0 {
        return Err(Error::Argument("fixture dataset needs at least one training pair".into()));
    }
    for (split, n, s, prefix) in [("train", n_train, seed, "ISIC_0"), ("test", n_test, seed ^ 0xA5A5, "ISIC_1")] {
        if n == 0 {
            continue;
        }
        let images = root.join(split).join("images");
        let masks = root.join(split).join("masks");
        for dir in [&images, &masks] {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        for p in synthetic_pairs(n, side, s, prefix) {
            imageio::write_image(&p.image, &images.join(format!("{}.png", p.id)))?;
            imageio::write_mask(&p.mask, &masks.join(format!("{}_segmentation.png", p.id)))?;
        }
    }
    Ok(())
}
