//! The full prediction path: score, threshold, gray-mask, estimate severity,
//! select a pool member and classify the masked image.

use alloc::string::String;
use alloc::vec::Vec;

use crate::bank::MemoryBank;
use crate::classifier::ModelPool;
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::image::{AnomalyMap, Image, OcclusionMask};
use crate::severity::{estimate_severity, gray_mask, Severity};
use crate::synth::DEFAULT_GRAY;
use crate::threshold::{threshold_fixed, ThresholdMode};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub threshold: ThresholdMode,
    pub gray: u8,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            threshold: ThresholdMode::Otsu,
            gray: DEFAULT_GRAY,
        }
    }
}

/// Every intermediate of one prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: String,
    pub class_index: usize,
    pub probabilities: Vec<f64>,
    pub severity: Severity,
    pub threshold: f64,
    pub selected_p: f64,
    pub anomaly: AnomalyMap,
    pub mask: OcclusionMask,
    pub masked: Image,
}

/// Segmentation-side intermediates, shared by the ablation configurations.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub anomaly: AnomalyMap,
    pub threshold: f64,
    pub mask: OcclusionMask,
    pub masked: Image,
    pub severity: Severity,
}

pub fn segment<E: FeatureExtractor + ?Sized>(
    bank: &MemoryBank,
    image: &Image,
    extractor: &E,
    config: &PipelineConfig,
) -> Result<Segmentation> {
    let anomaly = bank.score_image(image, extractor)?;
    let threshold = config.threshold.threshold(&anomaly)?;
    let mask = threshold_fixed(&anomaly, threshold)?;
    let masked = gray_mask(image, &mask, config.gray)?;
    let severity = estimate_severity(&anomaly)?;
    Ok(Segmentation {
        anomaly,
        threshold,
        mask,
        masked,
        severity,
    })
}

pub fn oasic_predict<E: FeatureExtractor + ?Sized>(
    pool: &ModelPool,
    bank: &MemoryBank,
    image: &Image,
    extractor: &E,
    config: &PipelineConfig,
) -> Result<Prediction> {
    let descriptor = extractor.descriptor();
    for d in [bank.descriptor(), pool.descriptor()] {
        if !d.compatible(&descriptor) {
            return Err(Error::FeatureDim {
                expected: d.dim,
                actual: descriptor.dim,
            });
        }
    }
    let seg = segment(bank, image, extractor, config)?;
    let chosen = pool.select(seg.severity);
    let feature = extractor.extract_masked(image, &seg.masked, &seg.mask)?.pooled();
    let probabilities = chosen.probabilities(&feature)?;
    let class_index = chosen.predict_index(&feature)?;
    Ok(Prediction {
        label: chosen.labels()[class_index].clone(),
        class_index,
        probabilities,
        severity: seg.severity,
        threshold: seg.threshold,
        selected_p: chosen.trained_p(),
        anomaly: seg.anomaly,
        mask: seg.mask,
        masked: seg.masked,
    })
}
