use std::f64::consts::PI;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::LabeledSample;
use crate::error::{Error, Result};

/// Procedural stand-in for a real image tree. Class `k` of `classes` draws a
/// sinusoidal grating at orientation `k·π/classes` with a class tint; each
/// image gets its own phase and pixel noise. Groups are `synthetic/<k>/<i>`.
pub fn synthetic_dataset(
    classes: usize,
    per_class: usize,
    size: u32,
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    if classes == 0 || per_class == 0 || size == 0 {
        return Err(Error::Config(format!(
            "synthetic set needs positive sizes, got {classes} classes x {per_class} images of {size}px"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(classes * per_class);
    for k in 0..classes {
        let angle = k as f64 * PI / classes as f64;
        let (dy, dx) = angle.sin_cos();
        let tint = [
            (k * 53 % 97) as f64,
            (k * 31 % 89) as f64,
            (k * 71 % 83) as f64,
        ];
        for i in 0..per_class {
            let phase = rng.random_range(0.0..2.0 * PI);
            let freq = 2.0 * PI * 2.0 / size as f64;
            let mut img = RgbImage::new(size, size);
            for (x, y, px) in img.enumerate_pixels_mut() {
                let wave = (freq * (x as f64 * dx + y as f64 * dy) + phase).sin();
                let mut c = [0u8; 3];
                for (ch, v) in c.iter_mut().enumerate() {
                    let noise = rng.random_range(-12.0..12.0);
                    *v = (110.0 + 70.0 * wave + tint[ch] * 0.5 + noise)
                        .round()
                        .clamp(0.0, 255.0) as u8;
                }
                *px = Rgb(c);
            }
            out.push(LabeledSample::new(img, k, format!("synthetic/{k}/{i}")));
        }
    }
    Ok(out)
}
