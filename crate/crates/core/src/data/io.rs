//! PNG ingestion and export.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, Luma, Rgb, RgbImage};

use super::{DataError, Result, Sample};

/// Mask colors by class id (background, then classes 1..4).
pub const PALETTE: [[u8; 3]; 5] = [[0, 0, 0], [230, 159, 0], [86, 180, 233], [0, 158, 115], [240, 228, 66]];

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| DataError::Ingestion(format!("{}: {e}", dir.display())))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| DataError::Ingestion(e.to_string()))?.path();
        let is_png = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if let (true, Some(stem)) = (is_png, path.file_stem().and_then(|s| s.to_str())) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| DataError::Ingestion(format!("{}: {e}", path.display())))
}

/// Loads `images_dir/<stem>.png` with `masks_dir/<stem>.png`, resized to
/// `size x size` (bilinear for images, nearest for masks).
///
/// Masks are single-channel class ids. A mask containing only 0 and 255 is
/// read as binary `{0, 1}`.
pub fn load_image_mask_dir(images_dir: &Path, masks_dir: &Path, num_classes: usize, size: usize) -> Result<Vec<Sample>> {
    let images = png_stems(images_dir)?;
    let masks = png_stems(masks_dir)?;
    let missing: Vec<&str> = images.keys().filter(|k| !masks.contains_key(*k)).map(String::as_str).collect();
    if !missing.is_empty() {
        return Err(DataError::Ingestion(format!("no mask for image(s): {}", missing.join(", "))));
    }
    let s = size as u32;
    let mut out = Vec::with_capacity(images.len());
    for (stem, path) in &images {
        let rgb = imageops::resize(&open(path)?.to_rgb8(), s, s, FilterType::Triangle);
        let gray = imageops::resize(&open(&masks[stem])?.to_luma8(), s, s, FilterType::Nearest);
        let mut mask: Vec<u8> = gray.into_raw();
        if mask.iter().any(|&v| v == 255) && mask.iter().all(|&v| v == 0 || v == 255) {
            mask.iter_mut().for_each(|v| *v = (*v == 255) as u8);
        }
        let hw = size * size;
        let mut image = vec![0.0f32; 3 * hw];
        for (p, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                image[c * hw + p] = px.0[c] as f32 / 255.0;
            }
        }
        let sample = Sample::new(stem.clone(), 3, size, size, image, mask)?;
        sample.check_classes(num_classes)?;
        out.push(sample);
    }
    Ok(out)
}

fn save_err(path: &Path, e: impl std::fmt::Display) -> DataError {
    DataError::Ingestion(format!("writing {}: {e}", path.display()))
}

/// Writes class ids as palette colors.
pub fn save_mask_png(path: &Path, mask: &[u8], width: usize, height: usize) -> Result<()> {
    let img = RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let c = mask[y as usize * width + x as usize] as usize;
        Rgb(PALETTE[c.min(PALETTE.len() - 1)])
    });
    img.save(path).map_err(|e| save_err(path, e))
}

/// Writes a `3 x H x W` image with values in `[0, 1]`.
pub fn save_rgb_png(path: &Path, sample: &Sample) -> Result<()> {
    let hw = sample.height * sample.width;
    let img = RgbImage::from_fn(sample.width as u32, sample.height as u32, |x, y| {
        let p = y as usize * sample.width + x as usize;
        let ch = |c: usize| (sample.image[c.min(sample.channels - 1) * hw + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([ch(0), ch(1), ch(2)])
    });
    img.save(path).map_err(|e| save_err(path, e))
}

/// Writes `images/<id>.png` and `masks/<id>.png` (raw class ids) under `dir`.
pub fn write_dataset_dir(dir: &Path, samples: &[Sample]) -> Result<()> {
    let (images, masks) = (dir.join("images"), dir.join("masks"));
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(|e| save_err(d, e))?;
    }
    for s in samples {
        save_rgb_png(&images.join(format!("{}.png", s.id)), s)?;
        let path = masks.join(format!("{}.png", s.id));
        let gray = GrayImage::from_fn(s.width as u32, s.height as u32, |x, y| Luma([s.mask[y as usize * s.width + x as usize]]));
        gray.save(&path).map_err(|e| save_err(&path, e))?;
    }
    Ok(())
}
