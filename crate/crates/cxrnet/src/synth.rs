//! Procedural three-class texture corpus laid out like a real dataset.
//!
//! * `covid`: a few large soft bright patches.
//! * `normal`: near-horizontal bands with a 18..28 px period.
//! * `infection`: a fine crossed lattice with a 5..8 px period.
//!
//! Every image also gets a random brightness offset and pixel noise.

use std::f32::consts::TAU;
use std::fs;
use std::path::Path;

use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::CLASS_DIRS;
use crate::error::{Error, Result};

fn patches(rng: &mut ChaCha8Rng, side: usize) -> impl Fn(f32, f32) -> f32 {
    let s = side as f32;
    let blobs: Vec<(f32, f32, f32)> = (0..rng.random_range(2..5))
        .map(|_| {
            (
                rng.random_range(0.2..0.8) * s,
                rng.random_range(0.2..0.8) * s,
                rng.random_range(0.08..0.16) * s,
            )
        })
        .collect();
    move |x, y| {
        let v: f32 = blobs
            .iter()
            .map(|&(cx, cy, r)| (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * r * r)).exp())
            .sum();
        v.min(1.0) * 2.0 - 1.0
    }
}

fn bands(rng: &mut ChaCha8Rng) -> impl Fn(f32, f32) -> f32 {
    let period = rng.random_range(18.0..28.0);
    let phase = rng.random_range(0.0..TAU);
    let tilt = rng.random_range(-0.15f32..0.15);
    move |x, y| ((y + tilt * x) * TAU / period + phase).sin()
}

fn lattice(rng: &mut ChaCha8Rng) -> impl Fn(f32, f32) -> f32 {
    let period = rng.random_range(5.0..8.0);
    let (px, py) = (rng.random_range(0.0..TAU), rng.random_range(0.0..TAU));
    move |x, y| (x * TAU / period + px).sin() * (y * TAU / period + py).sin()
}

/// One grey image of class `label`.
pub fn texture(label: usize, side: usize, rng: &mut ChaCha8Rng) -> GrayImage {
    let pattern: Box<dyn Fn(f32, f32) -> f32> = match label {
        0 => Box::new(patches(rng, side)),
        1 => Box::new(bands(rng)),
        _ => Box::new(lattice(rng)),
    };
    let base = rng.random_range(90.0..150.0);
    let contrast = rng.random_range(35.0..60.0);
    let mut img = GrayImage::new(side as u32, side as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let noise = rng.random_range(-12.0..12.0);
        let v = base + contrast * pattern(x as f32, y as f32) + noise;
        px.0 = [v.round().clamp(0.0, 255.0) as u8];
    }
    img
}

/// Writes `counts[c]` PNGs of `side × side` pixels under `root/<class>/`.
pub fn generate(root: impl AsRef<Path>, counts: [usize; 3], side: usize, seed: u64) -> Result<usize> {
    let root = root.as_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut written = 0;
    for (label, (&class, &n)) in CLASS_DIRS.iter().zip(&counts).enumerate() {
        let dir = root.join(class);
        fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        for i in 0..n {
            let path = dir.join(format!("{class}_{i:04}.png"));
            texture(label, side, &mut rng)
                .save(&path)
                .map_err(|source| Error::Image { path, source })?;
            written += 1;
        }
    }
    Ok(written)
}
