//! Procedural fine-grained toy dataset and the two bundled occluder
//! textures.
//!
//! Class `c` of `C` is a vertical sinusoidal stripe pattern with hue
//! `360 * c / C` degrees and `c + 2` cycles across the image, with a random
//! phase per image and uniform pixel noise of +-8 intensity levels.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::TAU;

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{Image, LabeledImage, Rgb};
use crate::seed::{item_seed, rng, stage_seed};
use crate::synth::{perlin_field, PerlinParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyParams {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for ToyParams {
    fn default() -> Self {
        Self {
            classes: 8,
            per_class: 40,
            size: 128,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

pub fn class_label(c: usize) -> alloc::string::String {
    format!("class_{c:02}")
}

/// HSV with `h` in degrees, `s`, `v` in `[0, 1]`.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = ((h % 360.0) + 360.0) % 360.0 / 60.0;
    let c = v * s;
    let x = c * (1.0 - libm::fabs(h % 2.0 - 1.0));
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn to_u8(v: f64) -> u8 {
    libm::round(v.clamp(0.0, 255.0)) as u8
}

fn render_toy(class: usize, classes: usize, size: usize, seed: u64) -> Image {
    let mut r = rng(seed);
    let phase: f64 = r.gen();
    let hue = 360.0 * class as f64 / classes as f64;
    let cycles = (class + 2) as f64;
    let mut pixels: Vec<Rgb> = Vec::with_capacity(size * size);
    for _y in 0..size {
        for x in 0..size {
            let s = 0.5 + 0.5 * libm::sin(TAU * (cycles * (x as f64 + 0.5) / size as f64 + phase));
            let rgb = hsv_to_rgb(hue, 0.8, 0.35 + 0.55 * s);
            let mut px = [0u8; 3];
            for ch in 0..3 {
                let noise = f64::from(r.gen_range(-8i32..=8));
                px[ch] = to_u8(rgb[ch] * 255.0 + noise);
            }
            pixels.push(px);
        }
    }
    Image::new(size, size, pixels).expect("toy dimensions are non-zero")
}

/// Generates the toy set with a 75/25 train/test split by index within each
/// class.
pub fn gen_toy_dataset(params: &ToyParams) -> Result<ToyDataset> {
    if params.classes < 2 {
        return Err(Error::TooFewClasses(params.classes));
    }
    if params.per_class < 4 {
        return Err(Error::InvalidParameter("per_class must be >= 4".into()));
    }
    if params.size < 16 {
        return Err(Error::InvalidParameter("toy images must be >= 16 px".into()));
    }
    let stage = stage_seed(params.seed, "toy");
    let n_train = params.per_class * 3 / 4;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..params.classes {
        for i in 0..params.per_class {
            let seed = item_seed(stage, (c * params.per_class + i) as u64);
            let item = LabeledImage {
                name: format!("c{c:02}_{i:03}"),
                label: class_label(c),
                image: render_toy(c, params.classes, params.size, seed),
            };
            if i < n_train {
                train.push(item);
            } else {
                test.push(item);
            }
        }
    }
    Ok(ToyDataset { train, test })
}

/// Leaf-like occluder: small, densely packed leaves in varying greens with
/// near-black gaps, so most patches contain sharp edges.
pub fn texture_leaves(size: usize, seed: u64) -> Result<Image> {
    let blobs = perlin_field(
        size,
        size,
        &PerlinParams {
            seed: stage_seed(seed, "leaves/blobs"),
            octaves: 2,
            persistence: 0.5,
            base_frequency: 28.0,
        },
    )?;
    let tint = perlin_field(
        size,
        size,
        &PerlinParams {
            seed: stage_seed(seed, "leaves/tint"),
            octaves: 2,
            persistence: 0.5,
            base_frequency: 6.0,
        },
    )?;
    let pixels = blobs
        .values
        .iter()
        .zip(&tint.values)
        .map(|(&b, &t)| {
            if b > 0.5 {
                let v = 0.5 + b;
                [to_u8((30.0 + 120.0 * t) * v), to_u8((110.0 + 60.0 * t) * v), to_u8(25.0 * v)]
            } else {
                [to_u8(12.0 + 20.0 * b), to_u8(18.0 + 25.0 * b), to_u8(8.0)]
            }
        })
        .collect();
    Image::new(size, size, pixels)
}

/// Smoke-like occluder: smooth, pale, low-contrast gradient noise.
pub fn texture_smoke(size: usize, seed: u64) -> Result<Image> {
    let field = perlin_field(
        size,
        size,
        &PerlinParams {
            seed: stage_seed(seed, "smoke"),
            octaves: 5,
            persistence: 0.55,
            base_frequency: 3.0,
        },
    )?;
    let pixels = field
        .values
        .iter()
        .map(|&v| {
            let g = 150.0 + 90.0 * v;
            [to_u8(g), to_u8(g), to_u8(g + 10.0)]
        })
        .collect();
    Image::new(size, size, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_is_deterministic_with_exact_split() {
        let p = ToyParams {
            classes: 3,
            per_class: 40,
            size: 32,
            seed: 5,
        };
        let a = gen_toy_dataset(&p).unwrap();
        let b = gen_toy_dataset(&p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 90);
        assert_eq!(a.test.len(), 30);
        for c in 0..3 {
            let l = class_label(c);
            assert_eq!(a.train.iter().filter(|i| i.label == l).count(), 30);
            assert_eq!(a.test.iter().filter(|i| i.label == l).count(), 10);
        }
    }

    #[test]
    fn toy_rejects_bad_sizes() {
        let bad = |classes, per_class, size| {
            gen_toy_dataset(&ToyParams {
                classes,
                per_class,
                size,
                seed: 0,
            })
            .is_err()
        };
        assert!(bad(1, 40, 64));
        assert!(bad(8, 3, 64));
        assert!(bad(8, 40, 8));
    }

    #[test]
    fn hsv_primaries() {
        let close = |a: [f64; 3], b: [f64; 3]| a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]));
        assert!(close(hsv_to_rgb(120.0, 1.0, 1.0), [0.0, 1.0, 0.0]));
        assert!(close(hsv_to_rgb(240.0, 1.0, 1.0), [0.0, 0.0, 1.0]));
        assert!(close(hsv_to_rgb(77.0, 0.0, 0.5), [0.5, 0.5, 0.5]));
    }

    #[test]
    fn textures_render() {
        let a = texture_leaves(64, 1).unwrap();
        let b = texture_smoke(64, 1).unwrap();
        assert_eq!(a.dims(), (64, 64));
        assert_ne!(a, b);
        assert_eq!(a, texture_leaves(64, 1).unwrap());
    }
}
