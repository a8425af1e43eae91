//! Occlusion-specialised classifiers and severity-informed selection.
//!
//! Each pool member `f_[0,p]` is a multinomial logistic regression over the
//! pooled patch embedding of an image, trained on a copy of the training set
//! carrying gray occlusions with coverage drawn from `U(0, p)`.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::features::{FeatureDescriptor, FeatureExtractor};
use crate::image::{Image, LabeledImage};
use crate::seed::{rng, stage_seed};
use crate::severity::Severity;
use crate::synth::{synth_dataset, FillSpec, OccludedSample, PerlinParams};

/// Pool keys `{0.0, 0.1, ..., 0.9}`.
pub fn default_pool_keys() -> Vec<f64> {
    (0..10).map(|i| i as f64 / 10.0).collect()
}

/// Distances closer than this are treated as an exact tie in selection.
const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainParams {
    pub epochs: usize,
    pub step: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: 200,
            step: 0.1,
            batch: 32,
            seed: 0,
        }
    }
}

/// Pooled, re-normalised patch embedding used as the classification input.
pub fn image_feature<E: FeatureExtractor + ?Sized>(image: &Image, extractor: &E) -> Result<Vec<f32>> {
    Ok(extractor.extract(image)?.pooled())
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| libm::exp(z - max)).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Dense multinomial logistic-regression parameters in `f64`, used while
/// training.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub classes: usize,
    pub dim: usize,
    /// `classes x dim`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LogisticModel {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            weights: vec![0.0; classes * dim],
            bias: vec![0.0; classes],
        }
    }

    pub fn logits(&self, x: &[f32]) -> Vec<f64> {
        (0..self.classes)
            .map(|c| {
                let row = &self.weights[c * self.dim..(c + 1) * self.dim];
                self.bias[c] + row.iter().zip(x).map(|(&w, &v)| w * f64::from(v)).sum::<f64>()
            })
            .collect()
    }

    /// Mean cross-entropy over `(xs[i], ys[i])` and its gradient with
    /// respect to `(weights, bias)`.
    pub fn loss_and_gradient(&self, xs: &[&[f32]], ys: &[usize]) -> (f64, LogisticModel) {
        let mut grad = LogisticModel::zeros(self.classes, self.dim);
        let mut loss = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let p = softmax(&self.logits(x));
            loss -= libm::log(p[y]);
            for c in 0..self.classes {
                let dz = p[c] - if c == y { 1.0 } else { 0.0 };
                grad.bias[c] += dz;
                for (g, &v) in grad.weights[c * self.dim..(c + 1) * self.dim].iter_mut().zip(x.iter()) {
                    *g += dz * f64::from(v);
                }
            }
        }
        let n = xs.len() as f64;
        grad.weights.iter_mut().for_each(|g| *g /= n);
        grad.bias.iter_mut().for_each(|g| *g /= n);
        (loss / n, grad)
    }
}

/// Mini-batch gradient descent on cross-entropy, zero-initialised and
/// deterministic for a fixed seed.
pub fn fit_logistic(
    features: &[Vec<f32>],
    targets: &[usize],
    classes: usize,
    params: &TrainParams,
) -> Result<LogisticModel> {
    if features.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if features.len() != targets.len() {
        return Err(Error::LengthMismatch {
            left: features.len(),
            right: targets.len(),
        });
    }
    if params.batch == 0 || !(params.step > 0.0) {
        return Err(Error::InvalidParameter("batch and step must be positive".into()));
    }
    let dim = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != dim) {
        return Err(Error::FeatureDim {
            expected: dim,
            actual: bad.len(),
        });
    }
    let (mean, scale) = standardizer(features);
    let features: Vec<Vec<f32>> = features
        .iter()
        .map(|f| {
            f.iter()
                .enumerate()
                .map(|(j, &v)| ((f64::from(v) - mean[j]) / scale[j]) as f32)
                .collect()
        })
        .collect();
    let mut model = LogisticModel::zeros(classes, dim);
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut r = rng(params.seed);
    for _ in 0..params.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(params.batch) {
            let xs: Vec<&[f32]> = chunk.iter().map(|&i| features[i].as_slice()).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
            let (_, grad) = model.loss_and_gradient(&xs, &ys);
            for (w, g) in model.weights.iter_mut().zip(&grad.weights) {
                *w -= params.step * g;
            }
            for (b, g) in model.bias.iter_mut().zip(&grad.bias) {
                *b -= params.step * g;
            }
        }
    }
    for c in 0..classes {
        let row = &mut model.weights[c * dim..(c + 1) * dim];
        for j in 0..dim {
            row[j] /= scale[j];
            model.bias[c] -= row[j] * mean[j];
        }
    }
    Ok(model)
}

/// Per-dimension mean and standard deviation of the training features.
/// Descent runs in these coordinates and the result is mapped back onto the
/// raw features, so the returned model applies to unstandardized inputs.
fn standardizer(features: &[Vec<f32>]) -> (Vec<f64>, Vec<f64>) {
    let dim = features[0].len();
    let n = features.len() as f64;
    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, &v) in mean.iter_mut().zip(f) {
            *m += f64::from(v) / n;
        }
    }
    let mut var = vec![0.0; dim];
    for f in features {
        for ((s, &v), m) in var.iter_mut().zip(f).zip(&mean) {
            *s += (f64::from(v) - m) * (f64::from(v) - m) / n;
        }
    }
    let scale = var
        .into_iter()
        .map(|v| {
            let sd = libm::sqrt(v);
            if sd > 1e-8 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

/// A trained classifier `f_[0,p]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    labels: Vec<String>,
    descriptor: FeatureDescriptor,
    weights: Vec<f32>,
    bias: Vec<f32>,
    trained_p: f64,
}

impl Classifier {
    pub fn from_parts(
        labels: Vec<String>,
        descriptor: FeatureDescriptor,
        weights: Vec<f32>,
        bias: Vec<f32>,
        trained_p: f64,
    ) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::TooFewClasses(labels.len()));
        }
        if bias.len() != labels.len() {
            return Err(Error::LengthMismatch {
                left: bias.len(),
                right: labels.len(),
            });
        }
        if weights.len() != labels.len() * descriptor.dim {
            return Err(Error::FeatureDim {
                expected: labels.len() * descriptor.dim,
                actual: weights.len(),
            });
        }
        if !(0.0..=1.0).contains(&trained_p) {
            return Err(Error::OutOfRange { value: trained_p });
        }
        Ok(Self {
            labels,
            descriptor,
            weights,
            bias,
            trained_p,
        })
    }

    fn from_model(model: &LogisticModel, labels: Vec<String>, descriptor: FeatureDescriptor, trained_p: f64) -> Result<Self> {
        Self::from_parts(
            labels,
            descriptor,
            model.weights.iter().map(|&w| w as f32).collect(),
            model.bias.iter().map(|&b| b as f32).collect(),
            trained_p,
        )
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn descriptor(&self) -> &FeatureDescriptor {
        &self.descriptor
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn classes(&self) -> usize {
        self.labels.len()
    }

    pub fn trained_p(&self) -> f64 {
        self.trained_p
    }

    pub fn logits(&self, feature: &[f32]) -> Result<Vec<f64>> {
        let dim = self.descriptor.dim;
        if feature.len() != dim {
            return Err(Error::FeatureDim {
                expected: dim,
                actual: feature.len(),
            });
        }
        Ok((0..self.classes())
            .map(|c| {
                let row = &self.weights[c * dim..(c + 1) * dim];
                f64::from(self.bias[c])
                    + row.iter().zip(feature).map(|(&w, &v)| f64::from(w) * f64::from(v)).sum::<f64>()
            })
            .collect())
    }

    pub fn probabilities(&self, feature: &[f32]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(feature)?))
    }

    /// Index of the most probable class; ties go to the lowest index.
    pub fn predict_index(&self, feature: &[f32]) -> Result<usize> {
        let logits = self.logits(feature)?;
        let mut best = 0;
        for (i, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = i;
            }
        }
        Ok(best)
    }

    pub fn predict(&self, feature: &[f32]) -> Result<&str> {
        Ok(&self.labels[self.predict_index(feature)?])
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// Sorted unique labels of a dataset.
pub fn label_table<'a>(labels: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    labels
        .into_iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(String::from)
        .collect()
}

/// Trains on precomputed features.
pub fn train_on_features(
    features: &[Vec<f32>],
    labels: &[&str],
    label_table: Vec<String>,
    descriptor: FeatureDescriptor,
    trained_p: f64,
    params: &TrainParams,
) -> Result<Classifier> {
    if features.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if label_table.len() < 2 {
        return Err(Error::TooFewClasses(label_table.len()));
    }
    let targets = labels
        .iter()
        .map(|l| {
            label_table
                .iter()
                .position(|t| t == l)
                .ok_or_else(|| Error::UnknownLabel(String::from(*l)))
        })
        .collect::<Result<Vec<_>>>()?;
    let model = fit_logistic(features, &targets, label_table.len(), params)?;
    Classifier::from_model(&model, label_table, descriptor, trained_p)
}

/// Trains `f_[0,p]` on a (pre-occluded) labelled set.
pub fn train_classifier<E: FeatureExtractor + ?Sized>(
    set: &[LabeledImage],
    p: f64,
    extractor: &E,
    params: &TrainParams,
) -> Result<Classifier> {
    if set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let table = label_table(set.iter().map(|s| s.label.as_str()));
    let features = set
        .iter()
        .map(|s| image_feature(&s.image, extractor))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<&str> = set.iter().map(|s| s.label.as_str()).collect();
    train_on_features(&features, &labels, table, extractor.descriptor(), p, params)
}

impl From<OccludedSample> for LabeledImage {
    fn from(s: OccludedSample) -> Self {
        LabeledImage {
            name: s.name,
            label: s.label,
            image: s.image,
        }
    }
}

/// Pool of classifiers keyed by the maximum training occlusion `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPool {
    members: Vec<Classifier>,
}

impl ModelPool {
    pub fn new(mut members: Vec<Classifier>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Empty("model pool"));
        }
        members.sort_by(|a, b| a.trained_p.total_cmp(&b.trained_p));
        if members.windows(2).any(|w| w[0].trained_p == w[1].trained_p) {
            return Err(Error::InvalidParameter("pool keys must be distinct".into()));
        }
        let first = &members[0];
        for m in &members[1..] {
            if m.labels != first.labels || !m.descriptor.compatible(&first.descriptor) {
                return Err(Error::InvalidParameter(
                    "pool members must share labels and features".into(),
                ));
            }
        }
        Ok(Self { members })
    }

    pub fn keys(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.trained_p).collect()
    }

    pub fn members(&self) -> &[Classifier] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.members[0].labels
    }

    pub fn descriptor(&self) -> &FeatureDescriptor {
        &self.members[0].descriptor
    }

    pub fn get(&self, p: f64) -> Option<&Classifier> {
        self.members.iter().find(|m| (m.trained_p - p).abs() <= TIE_EPS)
    }

    /// `f_[0,p*]` with `p* = argmin_p |s - p|`; ties go to the larger `p`.
    pub fn select(&self, severity: Severity) -> &Classifier {
        let s = severity.value();
        let mut best = &self.members[0];
        for m in &self.members[1..] {
            // Members are sorted by p, so `<=` resolves ties toward larger p.
            if (s - m.trained_p).abs() <= (s - best.trained_p).abs() + TIE_EPS {
                best = m;
            }
        }
        best
    }
}

/// A trained pool with the manifests of its synthetic training sets.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolTraining {
    pub pool: ModelPool,
    /// Per member (in key order): `(name, label, coverage, seed)` rows.
    pub manifests: Vec<Vec<(String, String, f64, u64)>>,
    pub seeds: Vec<u64>,
}

/// Synthesises `D_[0,p]` with gray fill for every key and trains `f_[0,p]`.
pub fn train_pool<E: FeatureExtractor + ?Sized>(
    clean: &[LabeledImage],
    keys: &[f64],
    extractor: &E,
    perlin: &PerlinParams,
    gray: u8,
    params: &TrainParams,
    seed: u64,
) -> Result<PoolTraining> {
    let mut members = Vec::with_capacity(keys.len());
    let mut manifests = Vec::with_capacity(keys.len());
    let mut seeds = Vec::with_capacity(keys.len());
    let mut sorted = keys.to_vec();
    sorted.sort_by(f64::total_cmp);
    for &p in &sorted {
        let member_seed = stage_seed(seed, &format!("pool/p={p}"));
        let set = synth_dataset(clean, p, perlin, &FillSpec::Gray(gray), member_seed)?;
        manifests.push(
            set.iter()
                .map(|s| (s.name.clone(), s.label.clone(), s.coverage, s.seed))
                .collect(),
        );
        let set: Vec<LabeledImage> = set.into_iter().map(Into::into).collect();
        let train = TrainParams {
            seed: stage_seed(member_seed, "train"),
            ..*params
        };
        members.push(train_classifier(&set, p, extractor, &train)?);
        seeds.push(member_seed);
    }
    Ok(PoolTraining {
        pool: ModelPool::new(members)?,
        manifests,
        seeds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desc(dim: usize) -> FeatureDescriptor {
        FeatureDescriptor {
            name: "t".into(),
            dim,
            patch_size: 16,
        }
    }

    fn member(p: f64) -> Classifier {
        Classifier::from_parts(
            vec!["a".into(), "b".into()],
            desc(2),
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.0, 0.0],
            p,
        )
        .unwrap()
    }

    fn default_pool() -> ModelPool {
        ModelPool::new(default_pool_keys().into_iter().map(member).collect()).unwrap()
    }

    #[test]
    fn nearest_key_selection() {
        let pool = default_pool();
        let pick = |s: f64| pool.select(Severity::new(s).unwrap()).trained_p();
        assert_eq!(pick(0.43), 0.4);
        assert_eq!(pick(0.45), 0.5);
        assert_eq!(pick(0.0), 0.0);
        assert_eq!(pick(1.0), 0.9);
    }

    #[test]
    fn pool_validation() {
        assert!(ModelPool::new(vec![]).is_err());
        assert!(ModelPool::new(vec![member(0.1), member(0.1)]).is_err());
        let single = ModelPool::new(vec![member(0.0)]).unwrap();
        assert_eq!(single.keys(), vec![0.0]);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1.0, 2.0, 3.0, -500.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[2] > p[1] && p[1] > p[0]);
    }

    #[test]
    fn classifier_validation() {
        assert!(matches!(
            Classifier::from_parts(vec!["a".into()], desc(2), vec![0.0; 2], vec![0.0], 0.0),
            Err(Error::TooFewClasses(1))
        ));
        assert!(Classifier::from_parts(vec!["a".into(), "b".into()], desc(2), vec![0.0; 3], vec![0.0; 2], 0.0).is_err());
        assert!(Classifier::from_parts(vec!["a".into(), "b".into()], desc(2), vec![0.0; 4], vec![0.0; 2], 1.5).is_err());
    }

    #[test]
    fn single_class_training_is_rejected() {
        let f = vec![vec![1.0f32, 0.0]];
        let r = train_on_features(&f, &["a"], vec!["a".into()], desc(2), 0.0, &TrainParams::default());
        assert!(matches!(r, Err(Error::TooFewClasses(1))));
    }
}
