//! Gray masking of detected occluders and occlusion-severity estimation.

use crate::error::{Error, Result};
use crate::image::{AnomalyMap, Image, OcclusionMask};

/// Estimated occluded fraction of an image, in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Severity(f64);

impl Severity {
    pub fn new(value: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(Error::OutOfRange { value })
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Sets every occluded pixel to `(g, g, g)`; other pixels are untouched.
pub fn gray_mask(image: &Image, mask: &OcclusionMask, gray: u8) -> Result<Image> {
    if image.dims() != mask.dims() {
        return Err(Error::DimensionMismatch {
            expected: image.dims(),
            actual: mask.dims(),
        });
    }
    let mut out = image.clone();
    for (px, &occ) in out.pixels_mut().iter_mut().zip(mask.bits()) {
        if occ {
            *px = [gray; 3];
        }
    }
    Ok(out)
}

/// Mean of the continuous anomaly map.
pub fn estimate_severity(map: &AnomalyMap) -> Result<Severity> {
    let values = map.values();
    if values.is_empty() {
        return Err(Error::Empty("anomaly map"));
    }
    let mean = values.iter().map(|&v| f64::from(v)).sum::<f64>() / values.len() as f64;
    // Rounding can push a mean of values in [0, 1] an ulp outside.
    Severity::new(mean.clamp(0.0, 1.0))
}
