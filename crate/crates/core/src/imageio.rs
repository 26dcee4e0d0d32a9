//! PNG/JPEG conversion between files and [`ImageTensor`] / [`BinaryMask`].

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::ingest::{denormalize_value, normalize_value, BinaryMask, ImageTensor};

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::io(path, e))
}

/// Decode an RGB (or grayscale, replicated) image into `[-1, 1]`.
pub fn read_image(path: &Path) -> Result<ImageTensor> {
    let rgb = open(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut values = vec![0.0f32; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            values[(c * h + y as usize) * w + x as usize] = normalize_value(px.0[c]);
        }
    }
    ImageTensor::new(h, w, 3, values)
}

/// Decode a mask and binarize at 128. Colour files are accepted only when
/// all three channels agree; alpha is ignored.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = open(path)?;
    let gray: GrayImage = match &img {
        DynamicImage::ImageLuma8(g) => g.clone(),
        DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => img.to_luma8(),
        _ => {
            let rgb = img.to_rgb8();
            if rgb.pixels().any(|p| p.0[0] != p.0[1] || p.0[1] != p.0[2]) {
                return Err(Error::io(path, "mask has distinct colour channels; expected a single-channel image"));
            }
            img.to_luma8()
        }
    };
    BinaryMask::from_gray(gray.height() as usize, gray.width() as usize, gray.as_raw())
}

pub fn image_to_rgb(img: &ImageTensor) -> RgbImage {
    let (h, w) = (img.height(), img.width());
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let ch = |c: usize| denormalize_value(img.get(c.min(img.channels() - 1), y as usize, x as usize));
        Rgb([ch(0), ch(1), ch(2)])
    })
}

pub fn mask_to_gray(mask: &BinaryMask) -> GrayImage {
    GrayImage::from_raw(
        mask.width() as u32,
        mask.height() as u32,
        mask.values().iter().map(|&v| v * 255).collect(),
    )
    .expect("dimensions match")
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

pub fn write_image(img: &ImageTensor, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    image_to_rgb(img).save(path).map_err(|e| Error::io(path, e))
}

/// Single-channel 8-bit PNG, foreground = 255.
pub fn write_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    mask_to_gray(mask).save(path).map_err(|e| Error::io(path, e))
}
