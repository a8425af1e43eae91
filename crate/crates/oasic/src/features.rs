//! Where patch embeddings come from: the built-in extractor or a directory
//! of precomputed `.oemb` grids named after the image stem.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use oasic_core::features::{
    FeatureDescriptor, FeatureExtractor, Handcrafted, PatchEmbeddingGrid, DEFAULT_PATCH_SIZE,
};
use oasic_core::{Image, OcclusionMask};

use crate::error::{Error, Result};
use crate::formats::oemb;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FeatureSource {
    Handcrafted { patch_size: usize },
    Oemb(PathBuf),
}

impl Default for FeatureSource {
    fn default() -> Self {
        FeatureSource::Handcrafted {
            patch_size: DEFAULT_PATCH_SIZE,
        }
    }
}

impl FromStr for FeatureSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "handcrafted" {
            return Ok(Self::default());
        }
        match s.strip_prefix("oemb:") {
            Some(dir) if !dir.is_empty() => Ok(FeatureSource::Oemb(dir.into())),
            _ => Err(Error::Config(format!(
                "bad feature source {s:?}, expected handcrafted or oemb:<dir>"
            ))),
        }
    }
}

impl FeatureSource {
    pub fn with_patch_size(self, patch_size: usize) -> Self {
        match self {
            FeatureSource::Handcrafted { .. } => FeatureSource::Handcrafted { patch_size },
            other => other,
        }
    }

    /// Extractor for the image called `name` (the stem of its file).
    pub fn extractor(&self, name: &str) -> Result<Box<dyn FeatureExtractor + Send + Sync>> {
        match self {
            FeatureSource::Handcrafted { patch_size } => Ok(Box::new(Handcrafted {
                patch_size: *patch_size,
            })),
            FeatureSource::Oemb(dir) => Ok(Box::new(Precomputed::load(dir, name)?)),
        }
    }

    /// Whether new pixels can be embedded on the fly.
    pub fn embeds_pixels(&self) -> bool {
        matches!(self, FeatureSource::Handcrafted { .. })
    }
}

/// Stem of an image path, used to find its `.oemb`.
pub fn image_stem(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| Error::format(path, "file name is not UTF-8"))
}

/// A single precomputed grid standing in for an extractor. Masked
/// extraction zeroes the patches that are at least half covered.
#[derive(Debug, Clone, PartialEq)]
pub struct Precomputed {
    grid: PatchEmbeddingGrid,
    path: PathBuf,
}

impl Precomputed {
    pub fn new(grid: PatchEmbeddingGrid, path: PathBuf) -> Self {
        Self { grid, path }
    }

    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let path = dir.join(format!("{name}.oemb"));
        Ok(Self::new(oemb::read(&path)?, path))
    }

    pub fn grid(&self) -> &PatchEmbeddingGrid {
        &self.grid
    }

    fn check(&self, image: &Image) -> oasic_core::Result<()> {
        let ps = self.grid.patch_size();
        let expected = (image.width() / ps, image.height() / ps);
        if expected != (self.grid.grid_w(), self.grid.grid_h()) {
            return Err(oasic_core::Error::InvalidParameter(format!(
                "{}: {}x{} grid does not cover a {}x{} image at patch size {ps}",
                self.path.display(),
                self.grid.grid_w(),
                self.grid.grid_h(),
                image.width(),
                image.height()
            )));
        }
        Ok(())
    }
}

impl FeatureExtractor for Precomputed {
    fn descriptor(&self) -> FeatureDescriptor {
        FeatureDescriptor {
            name: "oemb".into(),
            dim: self.grid.dim(),
            patch_size: self.grid.patch_size(),
        }
    }

    fn extract(&self, image: &Image) -> oasic_core::Result<PatchEmbeddingGrid> {
        self.check(image)?;
        Ok(self.grid.clone())
    }

    fn extract_masked(
        &self,
        original: &Image,
        _masked: &Image,
        mask: &OcclusionMask,
    ) -> oasic_core::Result<PatchEmbeddingGrid> {
        self.check(original)?;
        Ok(self.grid.with_masked_patches_zeroed(mask))
    }
}
