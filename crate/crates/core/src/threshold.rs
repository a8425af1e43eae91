//! Binarisation of anomaly maps: fixed threshold or Otsu's method.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::image::{AnomalyMap, OcclusionMask};

pub const DEFAULT_LEVELS: usize = 256;

/// `levels` uniform bins over `[0, 1]`; value 1.0 falls in the last bin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram {
    bins: Vec<u64>,
    total: u64,
}

impl Histogram {
    pub fn from_values(values: &[f32], levels: usize) -> Result<Self> {
        if levels < 2 {
            return Err(Error::InvalidParameter("histogram needs >= 2 levels".into()));
        }
        let mut bins = vec![0u64; levels];
        for &v in values {
            bins[bin_of(v, levels)] += 1;
        }
        Ok(Self {
            bins,
            total: values.len() as u64,
        })
    }

    pub fn bins(&self) -> &[u64] {
        &self.bins
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn levels(&self) -> usize {
        self.bins.len()
    }

    /// Between-class variance `w0 w1 (mu0 - mu1)^2` for every split
    /// `i <= t | i > t`, using bin indices as intensity levels. Entries where
    /// either class is empty are 0.
    pub fn between_class_variances(&self) -> Vec<f64> {
        let n = self.total;
        let weighted_total: u64 = self.bins.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();
        let mut count0 = 0u64;
        let mut weighted0 = 0u64;
        self.bins
            .iter()
            .enumerate()
            .map(|(t, &c)| {
                count0 += c;
                weighted0 += t as u64 * c;
                let count1 = n - count0;
                if count0 == 0 || count1 == 0 {
                    return 0.0;
                }
                let w0 = count0 as f64 / n as f64;
                let w1 = count1 as f64 / n as f64;
                let mu0 = weighted0 as f64 / count0 as f64;
                let mu1 = (weighted_total - weighted0) as f64 / count1 as f64;
                w0 * w1 * (mu0 - mu1) * (mu0 - mu1)
            })
            .collect()
    }
}

#[inline]
pub fn bin_of(v: f32, levels: usize) -> usize {
    let b = libm::floor(f64::from(v) * levels as f64);
    if b <= 0.0 {
        0
    } else {
        (b as usize).min(levels - 1)
    }
}

/// Outcome of an Otsu sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Otsu {
    /// Upper edge of the argmax bin, `(t + 1) / L`.
    pub threshold: f64,
    pub bin: usize,
    pub variance: f64,
    pub variances: Vec<f64>,
}

/// Otsu sweep over a map. Ties go to the smallest split; when every split
/// has zero variance (a single occupied bin) the threshold is the upper
/// edge of that bin.
pub fn otsu(map: &AnomalyMap, levels: usize) -> Result<Otsu> {
    let hist = Histogram::from_values(map.values(), levels)?;
    Ok(otsu_from_histogram(&hist))
}

pub fn otsu_from_histogram(hist: &Histogram) -> Otsu {
    let variances = hist.between_class_variances();
    let mut bin = 0;
    let mut best = variances[0];
    for (t, &v) in variances.iter().enumerate().skip(1) {
        if v > best {
            best = v;
            bin = t;
        }
    }
    if best <= 0.0 {
        bin = hist.bins.iter().position(|&c| c > 0).unwrap_or(0);
    }
    Otsu {
        threshold: (bin + 1) as f64 / hist.levels() as f64,
        bin,
        variance: best,
        variances,
    }
}

/// Otsu threshold `tau*` with `L = 256`.
pub fn otsu_threshold(map: &AnomalyMap) -> f64 {
    otsu(map, DEFAULT_LEVELS)
        .map(|o| o.threshold)
        .expect("256 levels is a valid histogram")
}

/// `O[i,j] = 1` iff `A[i,j] >= tau`.
pub fn threshold_fixed(map: &AnomalyMap, tau: f64) -> Result<OcclusionMask> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::OutOfRange { value: tau });
    }
    let bits = map.values().iter().map(|&v| f64::from(v) >= tau).collect();
    OcclusionMask::new(map.width(), map.height(), bits)
}

/// How an anomaly map is turned into a mask.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum ThresholdMode {
    #[default]
    Otsu,
    Fixed(f64),
}

impl ThresholdMode {
    pub fn threshold(&self, map: &AnomalyMap) -> Result<f64> {
        match *self {
            ThresholdMode::Otsu => Ok(otsu_threshold(map)),
            ThresholdMode::Fixed(t) if (0.0..=1.0).contains(&t) => Ok(t),
            ThresholdMode::Fixed(t) => Err(Error::OutOfRange { value: t }),
        }
    }
}

impl FromStr for ThresholdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "otsu" {
            return Ok(ThresholdMode::Otsu);
        }
        let value = s
            .strip_prefix("fixed:")
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| Error::InvalidParameter(alloc::format!("bad threshold mode {s:?}")))?;
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::OutOfRange { value });
        }
        Ok(ThresholdMode::Fixed(value))
    }
}

impl fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdMode::Otsu => f.write_str("otsu"),
            ThresholdMode::Fixed(t) => write!(f, "fixed:{t}"),
        }
    }
}
