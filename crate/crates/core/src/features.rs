//! Patch-level feature extraction.
//!
//! [`Handcrafted`] is the built-in extractor: per patch it emits mean RGB,
//! per-channel standard deviation and an 8-bin gradient-orientation
//! histogram of luminance, L2-normalised to 14 dimensions. Externally
//! computed embeddings enter through [`PatchEmbeddingGrid::new`].

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};
use crate::image::{Image, OcclusionMask};
use crate::stats::normalize;

pub const HANDCRAFTED_DIM: usize = 14;
pub const DEFAULT_PATCH_SIZE: usize = 16;
const ORIENTATION_BINS: usize = 8;

/// Tolerance on `|v| = 1` accepted when loading grids from outside.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

/// Identifies the feature space a grid, bank or classifier lives in.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FeatureDescriptor {
    pub name: String,
    pub dim: usize,
    pub patch_size: usize,
}

impl FeatureDescriptor {
    /// Two descriptors are compatible when their vectors can be compared.
    pub fn compatible(&self, other: &FeatureDescriptor) -> bool {
        self.dim == other.dim && self.patch_size == other.patch_size
    }
}

/// `grid_h x grid_w` unit-norm (or exactly zero) patch vectors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbeddingGrid {
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    patch_size: usize,
    vectors: Vec<f32>,
}

impl PatchEmbeddingGrid {
    /// Validates shape and that every vector is unit norm within
    /// [`UNIT_NORM_TOLERANCE`] or exactly zero.
    pub fn new(
        grid_h: usize,
        grid_w: usize,
        dim: usize,
        patch_size: usize,
        vectors: Vec<f32>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("feature dim must be > 0".into()));
        }
        if grid_h == 0 || grid_w == 0 {
            return Err(Error::ZeroDimension {
                width: grid_w,
                height: grid_h,
            });
        }
        if patch_size == 0 {
            return Err(Error::InvalidParameter("patch size must be > 0".into()));
        }
        let expected = grid_h * grid_w * dim;
        if vectors.len() != expected {
            return Err(Error::BufferLength {
                width: grid_w,
                height: grid_h,
                actual: vectors.len() / dim,
            });
        }
        for v in vectors.chunks_exact(dim) {
            let sq: f64 = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum();
            if !sq.is_finite() {
                return Err(Error::InvalidParameter("non-finite feature value".into()));
            }
            if sq != 0.0 && (libm::sqrt(sq) - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::InvalidParameter(alloc::format!(
                    "patch vector norm {} is not 1",
                    libm::sqrt(sq)
                )));
            }
        }
        Ok(Self {
            grid_h,
            grid_w,
            dim,
            patch_size,
            vectors,
        })
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.vectors
    }

    pub fn vector(&self, row: usize, col: usize) -> &[f32] {
        let i = (row * self.grid_w + col) * self.dim;
        &self.vectors[i..i + self.dim]
    }

    pub fn iter(&self) -> core::slice::ChunksExact<'_, f32> {
        self.vectors.chunks_exact(self.dim)
    }

    /// Mean of the patch vectors, re-normalised; zero stays zero.
    pub fn pooled(&self) -> Vec<f32> {
        let mut acc = vec![0.0f64; self.dim];
        for v in self.iter() {
            for (a, &x) in acc.iter_mut().zip(v) {
                *a += f64::from(x);
            }
        }
        let n = self.len() as f64;
        let mut out: Vec<f32> = acc.iter().map(|&a| (a / n) as f32).collect();
        normalize(&mut out);
        out
    }

    /// Copy with every patch that is at least half covered by `mask` zeroed.
    /// Used when embeddings are precomputed and the masked image cannot be
    /// re-embedded.
    pub fn with_masked_patches_zeroed(&self, mask: &OcclusionMask) -> Self {
        let mut out = self.clone();
        let ps = self.patch_size;
        for r in 0..self.grid_h {
            for c in 0..self.grid_w {
                let mut covered = 0usize;
                let mut total = 0usize;
                for y in r * ps..((r + 1) * ps).min(mask.height()) {
                    for x in c * ps..((c + 1) * ps).min(mask.width()) {
                        total += 1;
                        covered += usize::from(mask.get(x, y));
                    }
                }
                if total > 0 && 2 * covered >= total {
                    let i = (r * self.grid_w + c) * self.dim;
                    out.vectors[i..i + self.dim].fill(0.0);
                }
            }
        }
        out
    }
}

/// Source of patch embeddings for images.
pub trait FeatureExtractor {
    fn descriptor(&self) -> FeatureDescriptor;

    fn extract(&self, image: &Image) -> Result<PatchEmbeddingGrid>;

    /// Embedding of a gray-masked image. `original` is the unmasked input;
    /// extractors that can embed arbitrary pixels just embed `masked`.
    fn extract_masked(
        &self,
        _original: &Image,
        masked: &Image,
        _mask: &OcclusionMask,
    ) -> Result<PatchEmbeddingGrid> {
        self.extract(masked)
    }
}

impl<T: FeatureExtractor + ?Sized> FeatureExtractor for &T {
    fn descriptor(&self) -> FeatureDescriptor {
        (**self).descriptor()
    }

    fn extract(&self, image: &Image) -> Result<PatchEmbeddingGrid> {
        (**self).extract(image)
    }

    fn extract_masked(
        &self,
        original: &Image,
        masked: &Image,
        mask: &OcclusionMask,
    ) -> Result<PatchEmbeddingGrid> {
        (**self).extract_masked(original, masked, mask)
    }
}

/// Built-in colour + texture statistics extractor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Handcrafted {
    pub patch_size: usize,
}

impl Default for Handcrafted {
    fn default() -> Self {
        Self {
            patch_size: DEFAULT_PATCH_SIZE,
        }
    }
}

impl FeatureExtractor for Handcrafted {
    fn descriptor(&self) -> FeatureDescriptor {
        FeatureDescriptor {
            name: "handcrafted".into(),
            dim: HANDCRAFTED_DIM,
            patch_size: self.patch_size,
        }
    }

    fn extract(&self, image: &Image) -> Result<PatchEmbeddingGrid> {
        extract_handcrafted(image, self.patch_size)
    }
}

fn luminance(image: &Image) -> Vec<f64> {
    image
        .pixels()
        .iter()
        .map(|p| (0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2])) / 255.0)
        .collect()
}

/// Orientation bin of a gradient, angles folded into `[0, pi)`.
fn orientation_bin(gx: f64, gy: f64) -> usize {
    let mut theta = libm::atan2(gy, gx);
    if theta < 0.0 {
        theta += PI;
    }
    if theta >= PI {
        theta -= PI;
    }
    let bin = libm::floor(theta / (PI / ORIENTATION_BINS as f64)) as usize;
    bin.min(ORIENTATION_BINS - 1)
}

/// Handcrafted 14-dim patch features; trailing partial patches are dropped.
pub fn extract_handcrafted(image: &Image, patch_size: usize) -> Result<PatchEmbeddingGrid> {
    let (w, h) = image.dims();
    if patch_size == 0 {
        return Err(Error::InvalidParameter("patch size must be > 0".into()));
    }
    if w < patch_size || h < patch_size {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            patch_size,
        });
    }
    let (grid_w, grid_h) = (w / patch_size, h / patch_size);
    let lum = luminance(image);
    let at = |x: usize, y: usize| lum[y * w + x];
    let n = (patch_size * patch_size) as f64;

    let mut vectors = Vec::with_capacity(grid_h * grid_w * HANDCRAFTED_DIM);
    for gr in 0..grid_h {
        for gc in 0..grid_w {
            let (x0, y0) = (gc * patch_size, gr * patch_size);
            let mut mean = [0.0f64; 3];
            for y in y0..y0 + patch_size {
                for x in x0..x0 + patch_size {
                    let p = image.get(x, y);
                    for ch in 0..3 {
                        mean[ch] += f64::from(p[ch]);
                    }
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);

            let mut var = [0.0f64; 3];
            let mut hist = [0.0f64; ORIENTATION_BINS];
            for y in y0..y0 + patch_size {
                for x in x0..x0 + patch_size {
                    let p = image.get(x, y);
                    for ch in 0..3 {
                        let d = f64::from(p[ch]) - mean[ch];
                        var[ch] += d * d;
                    }
                    let gx = (at((x + 1).min(w - 1), y) - at(x.saturating_sub(1), y)) / 2.0;
                    let gy = (at(x, (y + 1).min(h - 1)) - at(x, y.saturating_sub(1))) / 2.0;
                    let mag = libm::sqrt(gx * gx + gy * gy);
                    if mag > 0.0 {
                        hist[orientation_bin(gx, gy)] += mag;
                    }
                }
            }

            let mut v = [0.0f32; HANDCRAFTED_DIM];
            for ch in 0..3 {
                v[ch] = (mean[ch] / 255.0) as f32;
                v[3 + ch] = (libm::sqrt(var[ch] / n) / 255.0) as f32;
            }
            for (slot, &hv) in v[6..].iter_mut().zip(&hist) {
                *slot = (hv / n) as f32;
            }
            normalize(&mut v);
            vectors.extend_from_slice(&v);
        }
    }
    PatchEmbeddingGrid::new(grid_h, grid_w, HANDCRAFTED_DIM, patch_size, vectors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng;
    use rand::Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut r = rng(seed);
        let px = (0..w * h).map(|_| [r.gen(), r.gen(), r.gen()]).collect();
        Image::new(w, h, px).unwrap()
    }

    #[test]
    fn uniform_gray_has_only_mean_components() {
        let img = Image::filled(16, 16, [127; 3]).unwrap();
        let g = extract_handcrafted(&img, 16).unwrap();
        assert_eq!((g.grid_h(), g.grid_w(), g.dim()), (1, 1, 14));
        let v = g.vector(0, 0);
        assert!(v[3..].iter().all(|&x| x == 0.0));
        assert_eq!(v[0], v[1]);
        assert_eq!(v[1], v[2]);
        assert!((v[0] - 1.0 / 3f32.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn grid_shape_drops_partial_patches() {
        let g = extract_handcrafted(&random_image(64, 48, 1), 16).unwrap();
        assert_eq!((g.grid_h(), g.grid_w(), g.dim()), (3, 4, 14));
        let g = extract_handcrafted(&random_image(70, 50, 1), 16).unwrap();
        assert_eq!((g.grid_h(), g.grid_w()), (3, 4));
    }

    #[test]
    fn too_small_image_is_rejected() {
        assert!(matches!(
            extract_handcrafted(&random_image(15, 40, 0), 16),
            Err(Error::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn vertical_step_edge_votes_orientation_zero() {
        // Luminance 0 | 1 step between columns 7 and 8. Central differences
        // give gx = 0.5 at x = 7 and x = 8, gy = 0 everywhere: all gradient
        // mass (32 px * 0.5 / 256 px) lands in bin 0.
        let mut px = vec![[0u8; 3]; 256];
        for y in 0..16 {
            for x in 8..16 {
                px[y * 16 + x] = [255; 3];
            }
        }
        let g = extract_handcrafted(&Image::new(16, 16, px).unwrap(), 16).unwrap();
        let hist = &g.vector(0, 0)[6..];
        let best = (0..8).max_by(|&a, &b| hist[a].total_cmp(&hist[b])).unwrap();
        assert_eq!(best, 0);
        assert!(hist[1..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn orientation_bins_fold_to_half_circle() {
        assert_eq!(orientation_bin(1.0, 0.0), 0);
        assert_eq!(orientation_bin(-1.0, 0.0), 0);
        assert_eq!(orientation_bin(0.0, 1.0), 4);
        assert_eq!(orientation_bin(0.0, -1.0), 4);
        assert_eq!(orientation_bin(-1.0, 1e-9), 7);
    }

    #[test]
    fn vectors_are_unit_or_zero() {
        let g = extract_handcrafted(&random_image(48, 32, 4), 16).unwrap();
        for v in g.iter() {
            let n: f64 = v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let black = Image::filled(16, 16, [0; 3]).unwrap();
        let z = extract_handcrafted(&black, 16).unwrap();
        assert!(z.as_flat().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn shift_by_one_patch_shifts_grid() {
        let img = random_image(80, 64, 9);
        let shifted_px: Vec<_> = (0..64)
            .flat_map(|y| (0..80).map(move |x| (x, y)))
            .map(|(x, y)| img.get((x + 16) % 80, y))
            .collect();
        let shifted = Image::new(80, 64, shifted_px).unwrap();
        let a = extract_handcrafted(&img, 16).unwrap();
        let b = extract_handcrafted(&shifted, 16).unwrap();
        for r in 0..a.grid_h() {
            // interior cells only: the wrapped column and image borders differ
            for c in 1..a.grid_w() - 2 {
                assert_eq!(b.vector(r, c), a.vector(r, c + 1), "cell ({r},{c})");
            }
        }
    }

    #[test]
    fn pooled_cancels_to_zero() {
        let g = PatchEmbeddingGrid::new(1, 2, 2, 16, vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        assert_eq!(g.pooled(), vec![0.0, 0.0]);
        let single = PatchEmbeddingGrid::new(1, 1, 2, 16, vec![0.6, 0.8]).unwrap();
        assert_eq!(single.pooled(), vec![0.6, 0.8]);
    }

    #[test]
    fn grid_validation() {
        assert!(PatchEmbeddingGrid::new(1, 1, 0, 16, vec![]).is_err());
        assert!(PatchEmbeddingGrid::new(1, 1, 2, 16, vec![1.0]).is_err());
        assert!(PatchEmbeddingGrid::new(1, 1, 2, 16, vec![1.0, 1.0]).is_err());
        assert!(PatchEmbeddingGrid::new(1, 1, 2, 16, vec![0.0, 0.0]).is_ok());
    }

    #[test]
    fn masked_patches_are_zeroed() {
        let g = PatchEmbeddingGrid::new(1, 2, 1, 2, vec![1.0, 1.0]).unwrap();
        let mask = OcclusionMask::new(4, 2, vec![true, true, true, false, false, false, false, false]).unwrap();
        let z = g.with_masked_patches_zeroed(&mask);
        assert_eq!(z.as_flat(), &[0.0, 1.0]);
    }
}
