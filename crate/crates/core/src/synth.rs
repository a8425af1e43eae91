//! Synthetic occlusions: fractal Perlin fields, exact-coverage masks cut from
//! them, gray or textured fills, and whole occluded datasets `D_[0,p]`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::TAU;

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{Image, LabeledImage, OcclusionMask};
use crate::seed::{item_seed, rng, splitmix64};

/// Mid-level gray used for both synthetic gray occluders and test-time masking.
pub const DEFAULT_GRAY: u8 = 127;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerlinParams {
    pub seed: u64,
    pub octaves: u32,
    pub persistence: f64,
    /// Lattice cycles across the longer image edge for the first octave.
    pub base_frequency: f64,
}

impl Default for PerlinParams {
    fn default() -> Self {
        Self {
            seed: 0,
            octaves: 4,
            persistence: 0.5,
            base_frequency: 4.0,
        }
    }
}

impl PerlinParams {
    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.octaves == 0 {
            return Err(Error::InvalidParameter("octaves must be >= 1".into()));
        }
        if !(self.persistence > 0.0 && self.persistence <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "persistence must be in (0, 1], got {}",
                self.persistence
            )));
        }
        if !(self.base_frequency > 0.0 && self.base_frequency.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "base_frequency must be > 0, got {}",
                self.base_frequency
            )));
        }
        Ok(())
    }
}

/// Real-valued field over an image grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

#[inline]
fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Unit gradient attached to lattice point `(ix, iy)` of one octave.
#[inline]
fn gradient(seed: u64, ix: i64, iy: i64) -> (f64, f64) {
    let h = item_seed(item_seed(seed, ix as u64), iy as u64);
    let angle = (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64) * TAU;
    (libm::cos(angle), libm::sin(angle))
}

fn gradient_noise(seed: u64, x: f64, y: f64) -> f64 {
    let x0 = libm::floor(x);
    let y0 = libm::floor(y);
    let (ix, iy) = (x0 as i64, y0 as i64);
    let (fx, fy) = (x - x0, y - y0);
    let corner = |cx: i64, cy: i64, dx: f64, dy: f64| {
        let (gx, gy) = gradient(seed, cx, cy);
        gx * dx + gy * dy
    };
    let n00 = corner(ix, iy, fx, fy);
    let n10 = corner(ix + 1, iy, fx - 1.0, fy);
    let n01 = corner(ix, iy + 1, fx, fy - 1.0);
    let n11 = corner(ix + 1, iy + 1, fx - 1.0, fy - 1.0);
    let (u, v) = (fade(fx), fade(fy));
    lerp(lerp(n00, n10, u), lerp(n01, n11, u), v)
}

/// Fractal Perlin noise, min-max normalised to `[0, 1]`. A constant field
/// normalises to all zeros.
pub fn perlin_field(width: usize, height: usize, params: &PerlinParams) -> Result<ScalarField> {
    if width == 0 || height == 0 {
        return Err(Error::ZeroDimension { width, height });
    }
    params.validate()?;
    let scale = 1.0 / width.max(height) as f64;
    let octave_seeds: Vec<u64> = (0..params.octaves)
        .map(|k| item_seed(params.seed, u64::from(k)))
        .collect();

    let mut values = Vec::with_capacity(width * height);
    for py in 0..height {
        for px in 0..width {
            let (ux, uy) = ((px as f64 + 0.5) * scale, (py as f64 + 0.5) * scale);
            let mut freq = params.base_frequency;
            let mut amp = 1.0;
            let mut sum = 0.0;
            for &s in &octave_seeds {
                sum += amp * gradient_noise(s, ux * freq, uy * freq);
                freq *= 2.0;
                amp *= params.persistence;
            }
            values.push(sum);
        }
    }

    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    for v in values.iter_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
    Ok(ScalarField {
        width,
        height,
        values,
    })
}

/// Number of pixels occluded at `coverage` over `n` pixels, `floor(coverage * n)`.
pub fn occluded_count(coverage: f64, n: usize) -> usize {
    // Guard against products like 0.29 * 100 = 28.999999999999996.
    let k = libm::floor(coverage * n as f64 + 1e-9) as usize;
    k.min(n)
}

/// Occludes exactly `floor(coverage * H * W)` pixels: the highest field
/// values first, ties resolved in ascending row-major order.
pub fn mask_from_field(field: &ScalarField, coverage: f64) -> Result<OcclusionMask> {
    if !(0.0..=1.0).contains(&coverage) {
        return Err(Error::OutOfRange { value: coverage });
    }
    let n = field.values.len();
    let k = occluded_count(coverage, n);
    let mut bits = alloc::vec![false; n];
    if k == n {
        bits.fill(true);
    } else if k > 0 {
        let mut order: Vec<usize> = (0..n).collect();
        let values = &field.values;
        let cmp = |a: &usize, b: &usize| values[*b].total_cmp(&values[*a]).then(a.cmp(b));
        order.select_nth_unstable_by(k - 1, cmp);
        for &i in &order[..k] {
            bits[i] = true;
        }
    }
    OcclusionMask::new(field.width, field.height, bits)
}

/// How occluded pixels are filled.
#[derive(Debug, Clone, PartialEq)]
pub enum FillSpec {
    Gray(u8),
    /// Tile `source` from a random offset drawn once per image from `offset_seed`.
    Texture { source: Image, offset_seed: u64 },
}

impl Default for FillSpec {
    fn default() -> Self {
        FillSpec::Gray(DEFAULT_GRAY)
    }
}

impl FillSpec {
    /// The same fill with a new per-image offset seed (no-op for gray).
    pub fn reseeded(&self, seed: u64) -> Self {
        match self {
            FillSpec::Gray(g) => FillSpec::Gray(*g),
            FillSpec::Texture { source, .. } => FillSpec::Texture {
                source: source.clone(),
                offset_seed: seed,
            },
        }
    }

    /// Texture offset `(dx, dy)` for this fill's seed.
    pub fn texture_offset(&self) -> Option<(usize, usize)> {
        match self {
            FillSpec::Gray(_) => None,
            FillSpec::Texture {
                source,
                offset_seed,
            } => {
                let mut r = rng(*offset_seed);
                let dx = r.gen_range(0..source.width());
                let dy = r.gen_range(0..source.height());
                Some((dx, dy))
            }
        }
    }
}

/// Replaces every occluded pixel according to `fill`; visible pixels are
/// copied unchanged.
pub fn apply_occlusion(image: &Image, mask: &OcclusionMask, fill: &FillSpec) -> Result<Image> {
    if image.dims() != mask.dims() {
        return Err(Error::DimensionMismatch {
            expected: image.dims(),
            actual: mask.dims(),
        });
    }
    let mut out = image.clone();
    let width = image.width();
    match fill {
        FillSpec::Gray(g) => {
            for (px, &occ) in out.pixels_mut().iter_mut().zip(mask.bits()) {
                if occ {
                    *px = [*g; 3];
                }
            }
        }
        FillSpec::Texture { source, .. } => {
            let (dx, dy) = fill.texture_offset().unwrap_or((0, 0));
            let (tw, th) = source.dims();
            for (idx, (px, &occ)) in out.pixels_mut().iter_mut().zip(mask.bits()).enumerate() {
                if occ {
                    let (x, y) = (idx % width, idx / width);
                    *px = source.get((x + dx) % tw, (y + dy) % th);
                }
            }
        }
    }
    Ok(out)
}

/// An occluded image and its ground-truth mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Occluded {
    pub image: Image,
    pub mask: OcclusionMask,
}

/// Occludes `image` at exactly `coverage` using one seed for both the Perlin
/// field and the texture offset.
pub fn occlude(
    image: &Image,
    coverage: f64,
    params: &PerlinParams,
    fill: &FillSpec,
    seed: u64,
) -> Result<Occluded> {
    let field = perlin_field(image.width(), image.height(), &params.with_seed(splitmix64(seed)))?;
    let mask = mask_from_field(&field, coverage)?;
    let image = apply_occlusion(image, &mask, &fill.reseeded(item_seed(seed, 2)))?;
    Ok(Occluded { image, mask })
}

/// One entry of a synthesised occluded dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct OccludedSample {
    pub name: String,
    pub label: String,
    pub image: Image,
    pub mask: OcclusionMask,
    /// Realised fraction of occluded pixels.
    pub coverage: f64,
    pub seed: u64,
}

/// Builds `D_[0,p_max]`: every image is occluded at a coverage drawn from
/// `U(0, p_max)` with a per-image seed `item_seed(seed, index)`.
pub fn synth_dataset(
    images: &[LabeledImage],
    p_max: f64,
    params: &PerlinParams,
    fill: &FillSpec,
    seed: u64,
) -> Result<Vec<OccludedSample>> {
    if images.is_empty() {
        return Err(Error::Empty("synthesis input set"));
    }
    if !(0.0..=1.0).contains(&p_max) {
        return Err(Error::OutOfRange { value: p_max });
    }
    params.validate()?;
    images
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let s = item_seed(seed, i as u64);
            let target = p_max * rng(s).gen::<f64>();
            let occ = occlude(&item.image, target, params, fill, s)?;
            Ok(OccludedSample {
                name: item.name.clone(),
                label: item.label.clone(),
                coverage: occ.mask.coverage(),
                image: occ.image,
                mask: occ.mask,
                seed: s,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;
    use rand::RngCore;

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut r = rng(seed);
        let px = (0..w * h)
            .map(|_| {
                let v = r.next_u32().to_le_bytes();
                [v[0], v[1], v[2]]
            })
            .collect();
        Image::new(w, h, px).unwrap()
    }

    #[test]
    fn perlin_is_deterministic_and_normalised() {
        let p = PerlinParams::default().with_seed(11);
        let a = perlin_field(64, 40, &p).unwrap();
        let b = perlin_field(64, 40, &p).unwrap();
        assert_eq!(a, b);
        let lo = a.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = a.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (0.0, 1.0));
        assert_ne!(a, perlin_field(64, 40, &p.with_seed(12)).unwrap());
    }

    #[test]
    fn perlin_is_smooth() {
        let f = perlin_field(256, 256, &PerlinParams::default().with_seed(3)).unwrap();
        let mut total = 0.0;
        let mut n = 0usize;
        for y in 0..256 {
            for x in 0..255 {
                total += (f.values[y * 256 + x + 1] - f.values[y * 256 + x]).abs();
                n += 1;
            }
        }
        assert!(total / (n as f64) < 0.05, "mean adjacent diff {}", total / n as f64);
    }

    #[test]
    fn perlin_rejects_bad_params() {
        assert!(perlin_field(0, 4, &PerlinParams::default()).is_err());
        let bad = PerlinParams {
            octaves: 0,
            ..Default::default()
        };
        assert!(perlin_field(4, 4, &bad).is_err());
        let bad = PerlinParams {
            persistence: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = PerlinParams {
            base_frequency: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn coverage_extremes_and_exact_count() {
        let f = perlin_field(100, 100, &PerlinParams::default().with_seed(5)).unwrap();
        assert_eq!(mask_from_field(&f, 0.0).unwrap().count_occluded(), 0);
        assert_eq!(mask_from_field(&f, 1.0).unwrap().count_occluded(), 10_000);
        assert_eq!(mask_from_field(&f, 0.4).unwrap().count_occluded(), 4000);
        assert!(mask_from_field(&f, 1.2).is_err());
    }

    #[test]
    fn ties_resolve_in_row_major_order() {
        let f = ScalarField {
            width: 3,
            height: 2,
            values: vec![0.5, 0.5, 0.9, 0.5, 0.1, 0.5],
        };
        // 0.9 first, then the earliest two of the four tied 0.5s.
        let m = mask_from_field(&f, 0.5).unwrap();
        assert_eq!(m.bits(), &[true, true, true, false, false, false]);
    }

    #[test]
    fn higher_values_are_occluded_first() {
        let f = perlin_field(50, 30, &PerlinParams::default().with_seed(9)).unwrap();
        let m = mask_from_field(&f, 0.3).unwrap();
        let min_in = f
            .values
            .iter()
            .zip(m.bits())
            .filter(|(_, &b)| b)
            .map(|(v, _)| *v)
            .fold(f64::INFINITY, f64::min);
        let max_out = f
            .values
            .iter()
            .zip(m.bits())
            .filter(|(_, &b)| !b)
            .map(|(v, _)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(min_in >= max_out);
    }

    fn components_4(mask: &OcclusionMask) -> usize {
        let (w, h) = mask.dims();
        let mut seen = vec![false; w * h];
        let mut count = 0;
        let mut stack = Vec::new();
        for start in 0..w * h {
            if !mask.bits()[start] || seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            stack.push(start);
            while let Some(i) = stack.pop() {
                let (x, y) = (i % w, i / w);
                let mut push = |j: usize| {
                    if mask.bits()[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    push(i - 1);
                }
                if x + 1 < w {
                    push(i + 1);
                }
                if y > 0 {
                    push(i - w);
                }
                if y + 1 < h {
                    push(i + w);
                }
            }
        }
        count
    }

    #[test]
    fn half_coverage_masks_are_coherent_blobs() {
        for seed in 0..3 {
            let f = perlin_field(256, 256, &PerlinParams::default().with_seed(seed)).unwrap();
            let m = mask_from_field(&f, 0.5).unwrap();
            assert!(components_4(&m) < 256 * 256 / 8);
        }
    }

    #[test]
    fn empty_mask_is_identity_and_full_gray_is_uniform() {
        let img = random_image(9, 7, 1);
        let empty = OcclusionMask::empty(9, 7).unwrap();
        assert_eq!(apply_occlusion(&img, &empty, &FillSpec::default()).unwrap(), img);
        let full = OcclusionMask::full(9, 7).unwrap();
        let gray = apply_occlusion(&img, &full, &FillSpec::Gray(127)).unwrap();
        assert!(gray.pixels().iter().all(|p| *p == [127, 127, 127]));
        let small = OcclusionMask::empty(3, 3).unwrap();
        assert!(apply_occlusion(&img, &small, &FillSpec::default()).is_err());
    }

    #[test]
    fn texture_fill_matches_independent_tiling() {
        let img = random_image(20, 10, 2);
        let tex = random_image(7, 5, 3);
        let bits: Vec<bool> = (0..200).map(|i| i % 20 < 10).collect();
        let mask = OcclusionMask::new(20, 10, bits).unwrap();
        let fill = FillSpec::Texture {
            source: tex.clone(),
            offset_seed: 77,
        };
        let out = apply_occlusion(&img, &mask, &fill).unwrap();
        let mut r = rng(77);
        let dx = r.gen_range(0..7usize);
        let dy = r.gen_range(0..5usize);
        for y in 0..10 {
            for x in 0..20 {
                let want = if x < 10 {
                    tex.pixels()[((y + dy) % 5) * 7 + (x + dx) % 7]
                } else {
                    img.pixels()[y * 20 + x]
                };
                assert_eq!(out.get(x, y), want, "pixel ({x},{y})");
            }
        }
    }

    fn labeled(n: usize, w: usize, h: usize) -> Vec<LabeledImage> {
        (0..n)
            .map(|i| LabeledImage {
                name: format!("img{i}"),
                label: format!("c{}", i % 3),
                image: random_image(w, h, i as u64),
            })
            .collect()
    }

    #[test]
    fn zero_p_max_is_identity() {
        let set = labeled(5, 12, 12);
        let out = synth_dataset(&set, 0.0, &PerlinParams::default(), &FillSpec::default(), 1).unwrap();
        for (a, b) in set.iter().zip(&out) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.label, b.label);
            assert_eq!(b.coverage, 0.0);
        }
    }

    #[test]
    fn coverages_are_uniform_on_zero_to_p_max() {
        let set = labeled(1000, 16, 16);
        let out = synth_dataset(&set, 0.8, &PerlinParams::default(), &FillSpec::default(), 42).unwrap();
        let mean = out.iter().map(|s| s.coverage).sum::<f64>() / out.len() as f64;
        assert!((0.36..=0.44).contains(&mean), "mean coverage {mean}");
        assert!(out.iter().all(|s| s.coverage <= 0.8));
        let again = synth_dataset(&set, 0.8, &PerlinParams::default(), &FillSpec::default(), 42).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn empty_synthesis_input_is_rejected() {
        assert!(synth_dataset(&[], 0.5, &PerlinParams::default(), &FillSpec::default(), 0).is_err());
    }
}
