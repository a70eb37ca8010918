use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;

use super::{LabeledSample, Provenance};
use crate::error::{Error, Result};

pub const RAW_MAGIC: &[u8; 4] = b"RRGB";

/// Directory suffix for augmented copies of a class.
pub const AUG_SUFFIX: &str = "_aug";

/// Separator between a source file name and the round tag in augmented file names.
pub(crate) const ROUND_TAG: &str = "__r";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Jpg,
    Png,
    Raw,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Jpg => "jpg",
            ImageFormat::Png => "png",
            ImageFormat::Raw => "raw",
        }
    }
}

impl FromStr for ImageFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jpg" | "jpeg" => Ok(ImageFormat::Jpg),
            "png" => Ok(ImageFormat::Png),
            "raw" => Ok(ImageFormat::Raw),
            _ => Err(Error::Config(format!(
                "unknown image format {s:?} (expected jpg, png or raw)"
            ))),
        }
    }
}

/// Headered raw RGB: magic `RRGB`, little-endian u32 width and height, then
/// `width * height * 3` bytes in row-major RGB order.
pub fn write_raw(img: &RgbImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + img.as_raw().len());
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&img.width().to_le_bytes());
    out.extend_from_slice(&img.height().to_le_bytes());
    out.extend_from_slice(img.as_raw());
    out
}

pub fn read_raw(bytes: &[u8]) -> Result<RgbImage> {
    if bytes.len() < 12 || &bytes[..4] != RAW_MAGIC {
        return Err(Error::Data("not a raw RGB image".into()));
    }
    let w = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    let h = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    let expected = (w as usize)
        .checked_mul(h as usize)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::Data(format!("raw image {w}x{h} is too large")))?;
    if w == 0 || h == 0 || bytes.len() - 12 != expected {
        return Err(Error::Data(format!(
            "raw image {w}x{h} needs {expected} pixel bytes, found {}",
            bytes.len() - 12
        )));
    }
    RgbImage::from_raw(w, h, bytes[12..].to_vec())
        .ok_or_else(|| Error::Data("raw image size mismatch".into()))
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    let is_raw = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("raw"));
    if is_raw {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        return read_raw(&bytes);
    }
    let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(img.to_rgb8())
}

pub fn save_image(img: &RgbImage, path: &Path, format: ImageFormat) -> Result<()> {
    match format {
        ImageFormat::Raw => fs::write(path, write_raw(img)).map_err(|e| Error::io(path, e)),
        ImageFormat::Png => img
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display()))),
        ImageFormat::Jpg => img
            .save_with_format(path, image::ImageFormat::Jpeg)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display()))),
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
    /// Class names in label order.
    pub classes: Vec<String>,
    /// Files that could not be decoded, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.retain(|p| {
        !p.file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with('.'))
    });
    out.sort();
    Ok(out)
}

/// Reads `root/<class>/<files>`. Class names sort lexicographically into
/// labels; a `<class>_aug` directory holds augmented copies of `<class>`.
/// Undecodable files are skipped with a warning.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let dirs: Vec<PathBuf> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    let mut classes: Vec<String> = dirs
        .iter()
        .filter_map(|d| d.file_name().and_then(|n| n.to_str()))
        .map(|n| n.strip_suffix(AUG_SUFFIX).unwrap_or(n).to_string())
        .collect();
    classes.sort();
    classes.dedup();
    if classes.is_empty() {
        return Err(Error::Data(format!(
            "no class directories under {}",
            root.display()
        )));
    }
    let mut ds = Dataset {
        classes,
        ..Dataset::default()
    };
    let mut counts = vec![0usize; ds.classes.len()];
    for dir in &dirs {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let (class, provenance) = match name.strip_suffix(AUG_SUFFIX) {
            Some(base) => (base, Provenance::Augmented),
            None => (name, Provenance::Original),
        };
        let label = ds
            .classes
            .iter()
            .position(|c| c == class)
            .expect("class collected above");
        for file in sorted_entries(dir)?.into_iter().filter(|p| p.is_file()) {
            match load_image(&file) {
                Ok(image) => {
                    let file_name = file
                        .file_name()
                        .and_then(|n| n.to_str())
                        .unwrap_or_default();
                    let key = match provenance {
                        Provenance::Original => file_name,
                        Provenance::Augmented => super::augment::source_key(file_name),
                    };
                    ds.samples.push(LabeledSample {
                        image,
                        label,
                        group: format!("{class}/{key}"),
                        source: file,
                        provenance,
                    });
                    counts[label] += 1;
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", file.display());
                    ds.skipped.push((file, e.to_string()));
                }
            }
        }
    }
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!(
            "class directory {:?} has no readable images",
            ds.classes[i]
        )));
    }
    Ok(ds)
}
