//! Reference patch memory bank and calibrated anomaly scoring.
//!
//! One reference image per class (the one nearest its class centroid in
//! pooled-embedding space) contributes all of its patch vectors. A test patch
//! scores `1 - max cos(v, m)` against the bank; a global two-point
//! calibration `(a_lo, a_hi)` maps raw distances to `[0, 1]`, and the patch
//! grid is bilinearly upsampled to pixels.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::features::{FeatureDescriptor, FeatureExtractor, PatchEmbeddingGrid};
use crate::image::{AnomalyMap, Image, LabeledImage, OcclusionMask};
use crate::stats::{dot, percentile};
use crate::synth::{occlude, FillSpec, PerlinParams, DEFAULT_GRAY};

/// Coverage of the gray occlusions used to calibrate a bank.
pub const CALIBRATION_COVERAGE: f64 = 0.5;
/// Percentile of clean patch distances mapped to anomaly 0.
pub const LOW_PERCENTILE: f64 = 50.0;
/// Percentile of occluded patch distances mapped to anomaly 1.
pub const HIGH_PERCENTILE: f64 = 95.0;

/// Raw-distance anchors: `a_lo` maps to anomaly 0, `a_hi` to anomaly 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub lo: f32,
    pub hi: f32,
}

impl Calibration {
    pub fn new(lo: f32, hi: f32) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
            return Err(Error::DegenerateCalibration {
                lo: f64::from(lo),
                hi: f64::from(hi),
            });
        }
        Ok(Self { lo, hi })
    }

    #[inline]
    pub fn normalize(&self, raw: f64) -> f64 {
        let (lo, hi) = (f64::from(self.lo), f64::from(self.hi));
        ((raw - lo) / (hi - lo)).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    descriptor: FeatureDescriptor,
    labels: Vec<String>,
    entry_labels: Vec<u32>,
    entries: Vec<f32>,
    calibration: Option<Calibration>,
}

impl MemoryBank {
    pub fn from_parts(
        descriptor: FeatureDescriptor,
        labels: Vec<String>,
        entry_labels: Vec<u32>,
        entries: Vec<f32>,
        calibration: Option<Calibration>,
    ) -> Result<Self> {
        let dim = descriptor.dim;
        if dim == 0 {
            return Err(Error::InvalidParameter("bank dim must be > 0".into()));
        }
        if entries.is_empty() {
            return Err(Error::Empty("memory bank"));
        }
        if !entries.len().is_multiple_of(dim) {
            return Err(Error::FeatureDim {
                expected: dim,
                actual: entries.len() % dim,
            });
        }
        if entries.len() / dim != entry_labels.len() {
            return Err(Error::LengthMismatch {
                left: entries.len() / dim,
                right: entry_labels.len(),
            });
        }
        if let Some(&bad) = entry_labels.iter().find(|&&l| l as usize >= labels.len()) {
            return Err(Error::InvalidParameter(alloc::format!(
                "entry label index {bad} out of range"
            )));
        }
        if let Some(c) = calibration {
            Calibration::new(c.lo, c.hi)?;
        }
        Ok(Self {
            descriptor,
            labels,
            entry_labels,
            entries,
            calibration,
        })
    }

    pub fn descriptor(&self) -> &FeatureDescriptor {
        &self.descriptor
    }

    pub fn dim(&self) -> usize {
        self.descriptor.dim
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn entry_labels(&self) -> &[u32] {
        &self.entry_labels
    }

    pub fn entries_flat(&self) -> &[f32] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entry_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entry_labels.is_empty()
    }

    pub fn entries(&self) -> core::slice::ChunksExact<'_, f32> {
        self.entries.chunks_exact(self.descriptor.dim)
    }

    pub fn calibration(&self) -> Option<Calibration> {
        self.calibration
    }

    pub fn with_calibration(mut self, calibration: Calibration) -> Self {
        self.calibration = Some(calibration);
        self
    }

    fn check_grid(&self, grid: &PatchEmbeddingGrid) -> Result<()> {
        if grid.dim() != self.dim() {
            return Err(Error::FeatureDim {
                expected: self.dim(),
                actual: grid.dim(),
            });
        }
        Ok(())
    }

    /// Nearest-neighbour distance `1 - max_m cos(v, m)` for one vector.
    pub fn nearest_distance(&self, v: &[f32]) -> f64 {
        let best = self
            .entries()
            .map(|m| dot(v, m))
            .fold(f64::NEG_INFINITY, f64::max);
        (1.0 - best).clamp(0.0, 2.0)
    }

    /// Per-patch raw distances, row-major over the grid.
    pub fn raw_score(&self, grid: &PatchEmbeddingGrid) -> Result<Vec<f64>> {
        self.check_grid(grid)?;
        Ok(grid.iter().map(|v| self.nearest_distance(v)).collect())
    }

    /// Calibrated anomaly map of an already-embedded `width x height` image.
    pub fn score_grid(
        &self,
        grid: &PatchEmbeddingGrid,
        width: usize,
        height: usize,
    ) -> Result<AnomalyMap> {
        let cal = self.calibration.ok_or(Error::Uncalibrated)?;
        let patch: Vec<f64> = self
            .raw_score(grid)?
            .into_iter()
            .map(|d| cal.normalize(d))
            .collect();
        upsample_bilinear(&patch, grid.grid_w(), grid.grid_h(), grid.patch_size(), width, height)
    }

    pub fn score_image<E: FeatureExtractor + ?Sized>(
        &self,
        image: &Image,
        extractor: &E,
    ) -> Result<AnomalyMap> {
        if self.calibration.is_none() {
            return Err(Error::Uncalibrated);
        }
        let grid = extractor.extract(image)?;
        self.score_grid(&grid, image.width(), image.height())
    }
}

/// Bilinear patch-to-pixel upsampling. Patch `(r, c)` is centred at pixel
/// `((c + 0.5) * ps, (r + 0.5) * ps)`; pixels outside the outermost centres
/// take the edge values.
pub fn upsample_bilinear(
    patch: &[f64],
    grid_w: usize,
    grid_h: usize,
    patch_size: usize,
    width: usize,
    height: usize,
) -> Result<AnomalyMap> {
    let coords = |n: usize, cells: usize| -> Vec<(usize, usize, f64)> {
        (0..n)
            .map(|p| {
                let g = ((p as f64 + 0.5) / patch_size as f64 - 0.5).clamp(0.0, (cells - 1) as f64);
                let i0 = libm::floor(g) as usize;
                let i1 = (i0 + 1).min(cells - 1);
                (i0, i1, g - i0 as f64)
            })
            .collect()
    };
    let xs = coords(width, grid_w);
    let ys = coords(height, grid_h);
    let at = |r: usize, c: usize| patch[r * grid_w + c];
    let mut values = Vec::with_capacity(width * height);
    for &(r0, r1, ty) in &ys {
        for &(c0, c1, tx) in &xs {
            let top = at(r0, c0) + (at(r0, c1) - at(r0, c0)) * tx;
            let bottom = at(r1, c0) + (at(r1, c1) - at(r1, c0)) * tx;
            values.push((top + (bottom - top) * ty).clamp(0.0, 1.0) as f32);
        }
    }
    AnomalyMap::new(width, height, values)
}

/// Per class, the index (into `pooled`) of the member whose pooled embedding
/// is most cosine-similar to the re-normalised class centroid. Ties go to the
/// lowest index. Classes are returned in sorted label order.
pub fn select_references(labels: &[&str], pooled: &[Vec<f32>]) -> Result<Vec<(String, usize)>> {
    if labels.len() != pooled.len() {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: pooled.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::Empty("bank training set"));
    }
    let mut classes: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        classes.entry(l).or_default().push(i);
    }
    let dim = pooled[0].len();
    let mut selected = Vec::with_capacity(classes.len());
    for (label, members) in classes {
        let mut centroid = alloc::vec![0.0f64; dim];
        for &i in &members {
            if pooled[i].len() != dim {
                return Err(Error::FeatureDim {
                    expected: dim,
                    actual: pooled[i].len(),
                });
            }
            for (c, &x) in centroid.iter_mut().zip(&pooled[i]) {
                *c += f64::from(x);
            }
        }
        let n = members.len() as f64;
        let mut centroid: Vec<f32> = centroid.iter().map(|&c| (c / n) as f32).collect();
        crate::stats::normalize(&mut centroid);
        let mut best = members[0];
        let mut best_sim = f64::NEG_INFINITY;
        for &i in &members {
            let sim = dot(&pooled[i], &centroid);
            if sim > best_sim {
                best_sim = sim;
                best = i;
            }
        }
        selected.push((String::from(label), best));
    }
    Ok(selected)
}

/// Builds an uncalibrated bank from pre-embedded images.
pub fn build_bank_from_grids(
    descriptor: FeatureDescriptor,
    labels: &[&str],
    grids: &[PatchEmbeddingGrid],
) -> Result<(MemoryBank, Vec<(String, usize)>)> {
    for g in grids {
        if g.dim() != descriptor.dim || g.patch_size() != descriptor.patch_size {
            return Err(Error::FeatureDim {
                expected: descriptor.dim,
                actual: g.dim(),
            });
        }
    }
    let pooled: Vec<Vec<f32>> = grids.iter().map(PatchEmbeddingGrid::pooled).collect();
    let selected = select_references(labels, &pooled)?;
    let mut names = Vec::with_capacity(selected.len());
    let mut entry_labels = Vec::new();
    let mut entries = Vec::new();
    for (li, (label, idx)) in selected.iter().enumerate() {
        names.push(label.clone());
        let g = &grids[*idx];
        entries.extend_from_slice(g.as_flat());
        entry_labels.extend(core::iter::repeat_n(li as u32, g.len()));
    }
    let bank = MemoryBank::from_parts(descriptor, names, entry_labels, entries, None)?;
    Ok((bank, selected))
}

/// Builds an uncalibrated bank with one reference image per class.
pub fn build_bank<E: FeatureExtractor + ?Sized>(
    images: &[LabeledImage],
    extractor: &E,
) -> Result<MemoryBank> {
    let grids = images
        .iter()
        .map(|li| extractor.extract(&li.image))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<&str> = images.iter().map(|li| li.label.as_str()).collect();
    Ok(build_bank_from_grids(extractor.descriptor(), &labels, &grids)?.0)
}

/// Whether the centre pixel of patch `(row, col)` is occluded.
pub fn patch_center_occluded(mask: &OcclusionMask, row: usize, col: usize, patch_size: usize) -> bool {
    let x = col * patch_size + patch_size / 2;
    let y = row * patch_size + patch_size / 2;
    x < mask.width() && y < mask.height() && mask.get(x, y)
}

/// Raw distances collected for calibration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationSample {
    pub clean: Vec<f64>,
    pub occluded: Vec<f64>,
}

impl CalibrationSample {
    pub fn add_clean(&mut self, bank: &MemoryBank, grid: &PatchEmbeddingGrid) -> Result<()> {
        self.clean.extend(bank.raw_score(grid)?);
        Ok(())
    }

    /// Adds the distances of the patches whose centre lies inside `mask`.
    pub fn add_occluded(
        &mut self,
        bank: &MemoryBank,
        grid: &PatchEmbeddingGrid,
        mask: &OcclusionMask,
    ) -> Result<()> {
        let raw = bank.raw_score(grid)?;
        for r in 0..grid.grid_h() {
            for c in 0..grid.grid_w() {
                if patch_center_occluded(mask, r, c, grid.patch_size()) {
                    self.occluded.push(raw[r * grid.grid_w() + c]);
                }
            }
        }
        Ok(())
    }

    /// `a_lo` = median clean distance, `a_hi` = 95th percentile of occluded
    /// patch distances.
    pub fn calibration(&self) -> Result<Calibration> {
        let lo = percentile(&self.clean, LOW_PERCENTILE).ok_or(Error::Empty("clean calibration set"))?;
        let hi = percentile(&self.occluded, HIGH_PERCENTILE)
            .ok_or(Error::Empty("occluded calibration patches"))?;
        if hi <= lo {
            return Err(Error::DegenerateCalibration { lo, hi });
        }
        Calibration::new(lo as f32, hi as f32)
    }
}

/// Calibrates from clean grids and gray-occluded grids with their masks.
pub fn calibrate(
    bank: MemoryBank,
    clean: &[PatchEmbeddingGrid],
    occluded: &[(PatchEmbeddingGrid, OcclusionMask)],
) -> Result<MemoryBank> {
    if clean.is_empty() {
        return Err(Error::Empty("clean calibration set"));
    }
    if occluded.is_empty() {
        return Err(Error::Empty("occluded calibration set"));
    }
    let mut sample = CalibrationSample::default();
    for g in clean {
        sample.add_clean(&bank, g)?;
    }
    for (g, m) in occluded {
        sample.add_occluded(&bank, g, m)?;
    }
    let cal = sample.calibration()?;
    Ok(bank.with_calibration(cal))
}

/// Calibrates from clean images, synthesising the gray-occluded set at
/// [`CALIBRATION_COVERAGE`] with per-image seeds derived from `seed`.
pub fn calibrate_with_images<E: FeatureExtractor + ?Sized>(
    bank: MemoryBank,
    clean: &[Image],
    extractor: &E,
    perlin: &PerlinParams,
    seed: u64,
) -> Result<MemoryBank> {
    let fill = FillSpec::Gray(DEFAULT_GRAY);
    let clean_grids = clean
        .iter()
        .map(|im| extractor.extract(im))
        .collect::<Result<Vec<_>>>()?;
    let occluded = clean
        .iter()
        .enumerate()
        .map(|(i, im)| {
            let occ = occlude(
                im,
                CALIBRATION_COVERAGE,
                perlin,
                &fill,
                crate::seed::item_seed(seed, i as u64),
            )?;
            Ok((extractor.extract(&occ.image)?, occ.mask))
        })
        .collect::<Result<Vec<_>>>()?;
    calibrate(bank, &clean_grids, &occluded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn desc(dim: usize) -> FeatureDescriptor {
        FeatureDescriptor {
            name: "test".into(),
            dim,
            patch_size: 16,
        }
    }

    fn grid(vectors: Vec<f32>, gh: usize, gw: usize, dim: usize) -> PatchEmbeddingGrid {
        PatchEmbeddingGrid::new(gh, gw, dim, 16, vectors).unwrap()
    }

    #[test]
    fn self_match_and_orthogonal_distances() {
        let g = grid(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0], 1, 2, 3);
        let (bank, _) = build_bank_from_grids(desc(3), &["a"], core::slice::from_ref(&g)).unwrap();
        assert_eq!(bank.raw_score(&g).unwrap(), vec![0.0, 0.0]);
        let ortho = grid(vec![0.0, 0.0, 1.0], 1, 1, 3);
        assert_eq!(bank.raw_score(&ortho).unwrap(), vec![1.0]);
        let wrong = grid(vec![1.0, 0.0], 1, 1, 2);
        assert!(matches!(bank.raw_score(&wrong), Err(Error::FeatureDim { .. })));
    }

    #[test]
    fn single_and_identical_members() {
        let a = grid(vec![1.0, 0.0], 1, 1, 2);
        let b = grid(vec![0.0, 1.0], 1, 1, 2);
        let (_, sel) = build_bank_from_grids(desc(2), &["x", "y", "y", "y"], &[a, b.clone(), b.clone(), b]).unwrap();
        assert_eq!(sel, vec![("x".into(), 0), ("y".into(), 1)]);
    }

    #[test]
    fn calibration_anchors() {
        let mut s = CalibrationSample::default();
        s.clean = vec![0.1; 10];
        s.occluded = vec![0.9; 10];
        let c = s.calibration().unwrap();
        assert_eq!((c.lo, c.hi), (0.1, 0.9));
        s.occluded = vec![0.1; 10];
        assert!(matches!(s.calibration(), Err(Error::DegenerateCalibration { .. })));
    }

    #[test]
    fn scoring_requires_calibration() {
        let g = grid(vec![1.0, 0.0], 1, 1, 2);
        let (bank, _) = build_bank_from_grids(desc(2), &["a"], core::slice::from_ref(&g)).unwrap();
        assert_eq!(bank.score_grid(&g, 16, 16), Err(Error::Uncalibrated));
    }

    #[test]
    fn distance_at_a_hi_saturates() {
        let g = grid(vec![1.0, 0.0], 1, 1, 2);
        let (bank, _) = build_bank_from_grids(desc(2), &["a"], &[g]).unwrap();
        let bank = bank.with_calibration(Calibration::new(0.0, 1.0).unwrap());
        let test = grid(vec![0.0, 1.0], 1, 1, 2);
        let map = bank.score_grid(&test, 16, 16).unwrap();
        assert!(map.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn two_patch_row_interpolates_linearly() {
        // Patch centres at x = 7.5 and 23.5 (pixel-centre coordinates).
        let map = upsample_bilinear(&[0.0, 1.0], 2, 1, 16, 32, 1).unwrap();
        for x in 0..32 {
            let centre = x as f64 + 0.5;
            let want = ((centre - 8.0) / 16.0).clamp(0.0, 1.0);
            assert!((f64::from(map.get(x, 0)) - want).abs() < 1e-6, "x={x}");
        }
    }

    #[test]
    fn from_parts_validation() {
        assert!(MemoryBank::from_parts(desc(2), vec!["a".into()], vec![], vec![], None).is_err());
        assert!(MemoryBank::from_parts(desc(2), vec!["a".into()], vec![1], vec![1.0, 0.0], None).is_err());
        assert!(MemoryBank::from_parts(
            desc(2),
            vec!["a".into()],
            vec![0],
            vec![1.0, 0.0],
            Some(Calibration { lo: 0.5, hi: 0.5 })
        )
        .is_err());
    }
}
