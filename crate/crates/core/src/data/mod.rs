//! Labelled image datasets: loading, resizing, augmentation and splitting.

mod augment;
mod io;
mod split;
mod synthetic;

pub use augment::{
    augment_dataset, augment_one, AugmentOptions, AugmentParams, ShearAxis, ROUNDS_MAX,
};
pub use io::{
    load_dataset, load_image, read_raw, save_image, write_raw, Dataset, ImageFormat, AUG_SUFFIX,
    RAW_MAGIC,
};
pub use split::{holdout_split, split_groups, DatasetSplit};
pub use synthetic::synthetic_dataset;

use std::path::PathBuf;

use image::RgbImage;
use rsfme_tensor::Tensor;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Original,
    Augmented,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub image: RgbImage,
    pub label: usize,
    pub source: PathBuf,
    pub provenance: Provenance,
    /// Identifies the original image a sample derives from; augmented copies
    /// share their source's group.
    pub group: String,
}

impl LabeledSample {
    pub fn new(image: RgbImage, label: usize, group: impl Into<String>) -> Self {
        Self {
            image,
            label,
            source: PathBuf::new(),
            provenance: Provenance::Original,
            group: group.into(),
        }
    }
}

/// Bilinear resize with half-pixel centres; a same-size resize returns the
/// image unchanged.
pub fn resize(sample: &LabeledSample, width: u32, height: u32) -> Result<LabeledSample> {
    let src = &sample.image;
    let (sw, sh) = src.dimensions();
    if sw == 0 || sh == 0 || width == 0 || height == 0 {
        return Err(Error::Data(format!(
            "cannot resize {sw}x{sh} to {width}x{height}"
        )));
    }
    let mut out = sample.clone();
    if (sw, sh) == (width, height) {
        return Ok(out);
    }
    let sx = sw as f64 / width as f64;
    let sy = sh as f64 / height as f64;
    out.image = RgbImage::from_fn(width, height, |x, y| {
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f64);
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f64);
        image::Rgb(bilinear(src, fx, fy))
    });
    Ok(out)
}

/// Bilinear sample at a real coordinate, replicating edge pixels outside the image.
pub(crate) fn bilinear(img: &RgbImage, x: f64, y: f64) -> [u8; 3] {
    let (w, h) = img.dimensions();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as u32;
    let y0 = y.floor() as u32;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (ax, ay) = (x - x0 as f64, y - y0 as f64);
    let p = |xx: u32, yy: u32, c: usize| img.get_pixel(xx, yy).0[c] as f64;
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let top = p(x0, y0, c) * (1.0 - ax) + p(x1, y0, c) * ax;
        let bottom = p(x0, y1, c) * (1.0 - ax) + p(x1, y1, c) * ax;
        *o = (top * (1.0 - ay) + bottom * ay).round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Stacks equally sized images into an `[N, 3, H, W]` tensor scaled to `[0, 1]`.
pub fn to_tensor<'a>(images: impl IntoIterator<Item = &'a RgbImage>) -> Result<Tensor> {
    let images: Vec<&RgbImage> = images.into_iter().collect();
    let first = images
        .first()
        .ok_or_else(|| Error::Data("empty image batch".into()))?;
    let (w, h) = first.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0; images.len() * 3 * h * w];
    for (n, img) in images.iter().enumerate() {
        if img.dimensions() != first.dimensions() {
            return Err(Error::Data(format!(
                "image sizes differ in batch: {:?} vs {:?}",
                img.dimensions(),
                first.dimensions()
            )));
        }
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[(n * 3 + c) * h * w + i] = px.0[c] as f64 / 255.0;
            }
        }
    }
    Ok(Tensor::new(&[images.len(), 3, h, w], data)?)
}
