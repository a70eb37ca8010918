use std::collections::HashSet;
use std::fs;
use std::path::PathBuf;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::io::{save_image, ImageFormat, AUG_SUFFIX, ROUND_TAG};
use super::{bilinear, LabeledSample, Provenance};
use crate::error::{Error, Result};
use crate::params::derive_seed;

pub const ROUNDS_MAX: usize = 20;

/// Number of images generated per emitted batch.
pub const BATCH: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShearAxis {
    X,
    Y,
}

/// One affine augmentation. Angles are in degrees, translation in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub rotation: f64,
    pub shear: f64,
    pub shear_axis: ShearAxis,
    pub scale: f64,
    pub translate: (f64, f64),
    /// `-1` mirrors the axis, `+1` leaves it.
    pub reflect: (i8, i8),
}

impl AugmentParams {
    pub const ROTATION: (f64, f64) = (-30.0, 30.0);
    pub const SHEAR: (f64, f64) = (0.0, 30.0);
    pub const SCALE: (f64, f64) = (1.0, 1.5);
    pub const TRANSLATE: (f64, f64) = (-5.0, 5.0);

    pub fn identity() -> Self {
        Self {
            rotation: 0.0,
            shear: 0.0,
            shear_axis: ShearAxis::X,
            scale: 1.0,
            translate: (0.0, 0.0),
            reflect: (1, 1),
        }
    }

    /// Uniform draw from the allowed ranges; reflections are fair coin flips.
    pub fn sample<R: Rng>(rng: &mut R, shear_axis: ShearAxis) -> Self {
        let mut u = |(lo, hi): (f64, f64)| rng.random_range(lo..=hi);
        let rotation = u(Self::ROTATION);
        let shear = u(Self::SHEAR);
        let scale = u(Self::SCALE);
        let translate = (u(Self::TRANSLATE), u(Self::TRANSLATE));
        let mut flip = || if rng.random::<bool>() { -1 } else { 1 };
        let reflect = (flip(), flip());
        Self {
            rotation,
            shear,
            shear_axis,
            scale,
            translate,
            reflect,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let within = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
        let ok = within(self.rotation, Self::ROTATION)
            && within(self.shear, Self::SHEAR)
            && within(self.scale, Self::SCALE)
            && within(self.translate.0, Self::TRANSLATE)
            && within(self.translate.1, Self::TRANSLATE)
            && [self.reflect.0, self.reflect.1]
                .iter()
                .all(|r| r.abs() == 1);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "augmentation parameters out of range: {self:?}"
            )))
        }
    }

    /// Linear part of the forward map: shear · rotation · scale · reflection.
    pub fn matrix(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation.to_radians().sin_cos();
        let k = self.shear.to_radians().tan();
        let (fx, fy) = (
            self.reflect.0 as f64 * self.scale,
            self.reflect.1 as f64 * self.scale,
        );
        let rs = [[c * fx, -s * fy], [s * fx, c * fy]];
        match self.shear_axis {
            ShearAxis::X => [[rs[0][0] + k * rs[1][0], rs[0][1] + k * rs[1][1]], rs[1]],
            ShearAxis::Y => [rs[0], [rs[1][0] + k * rs[0][0], rs[1][1] + k * rs[0][1]]],
        }
    }
}

/// Applies the transform about the image centre by inverse mapping with
/// bilinear sampling and edge replication.
pub fn augment_one(sample: &LabeledSample, params: &AugmentParams) -> Result<LabeledSample> {
    params.validate()?;
    let src = &sample.image;
    let (w, h) = src.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::Data("cannot augment an empty image".into()));
    }
    let [[a, b], [c, d]] = params.matrix();
    let det = a * d - b * c;
    let inv = [[d / det, -b / det], [-c / det, a / det]];
    let (cx, cy) = ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
    let (tx, ty) = params.translate;
    let image = RgbImage::from_fn(w, h, |x, y| {
        let qx = x as f64 - cx - tx;
        let qy = y as f64 - cy - ty;
        let px = inv[0][0] * qx + inv[0][1] * qy + cx;
        let py = inv[1][0] * qx + inv[1][1] * qy + cy;
        image::Rgb(bilinear(src, px, py))
    });
    Ok(LabeledSample {
        image,
        label: sample.label,
        source: sample.source.clone(),
        provenance: Provenance::Augmented,
        group: sample.group.clone(),
    })
}

#[derive(Clone, Debug)]
pub struct AugmentOptions {
    pub rounds: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub format: ImageFormat,
    pub shear_axis: ShearAxis,
}

/// Strips trailing `__rNN.ext` round tags, leaving the original file name.
pub(crate) fn source_key(file_name: &str) -> &str {
    let mut name = file_name;
    while let Some((head, tail)) = name.rsplit_once(ROUND_TAG) {
        let tagged = tail.split_once('.').is_some_and(|(n, ext)| {
            !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()) && !ext.is_empty()
        });
        if !tagged || head.is_empty() {
            break;
        }
        name = head;
    }
    name
}

/// Generates `rounds` augmented copies of every sample, drawing fresh
/// parameters per sample and round from a seed derived from
/// `(seed, sample index, round)`, and writes them under
/// `out_dir/<class>_aug/<file>__rNN.<ext>`. Returns the new samples in
/// round-major order.
pub fn augment_dataset(
    samples: &[LabeledSample],
    classes: &[String],
    opts: &AugmentOptions,
) -> Result<Vec<LabeledSample>> {
    if !(1..=ROUNDS_MAX).contains(&opts.rounds) {
        return Err(Error::Config(format!(
            "rounds must lie in 1..={ROUNDS_MAX}, got {}",
            opts.rounds
        )));
    }
    let class_dirs: Vec<PathBuf> = classes
        .iter()
        .map(|c| opts.out_dir.join(format!("{c}{AUG_SUFFIX}")))
        .collect();
    for (i, dir) in class_dirs.iter().enumerate() {
        if samples.iter().any(|s| s.label == i) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let names: Vec<String> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let file = s
                .source
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default();
            if file.is_empty() {
                format!("{i:06}")
            } else {
                source_key(file).to_string()
            }
        })
        .collect();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(samples.len() * opts.rounds);
    for round in 1..=opts.rounds {
        let indices: Vec<usize> = (0..samples.len()).collect();
        for batch in indices.chunks(BATCH) {
            let made: Vec<(LabeledSample, PathBuf)> = batch
                .par_iter()
                .map(|&i| {
                    let s = &samples[i];
                    let dir = class_dirs.get(s.label).ok_or_else(|| {
                        Error::Data(format!("label {} has no class name", s.label))
                    })?;
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
                        opts.seed,
                        i as u64,
                        round as u64,
                    ]));
                    let params = AugmentParams::sample(&mut rng, opts.shear_axis);
                    let mut aug = augment_one(s, &params)?;
                    let path = dir.join(format!(
                        "{}{ROUND_TAG}{round:02}.{}",
                        names[i],
                        opts.format.extension()
                    ));
                    aug.source = path.clone();
                    Ok((aug, path))
                })
                .collect::<Result<_>>()?;
            for (aug, path) in made {
                if !seen.insert(path.clone()) {
                    return Err(Error::Data(format!(
                        "two sources map to the same output {}",
                        path.display()
                    )));
                }
                save_image(&aug.image, &path, opts.format)?;
                out.push(aug);
            }
        }
    }
    Ok(out)
}
