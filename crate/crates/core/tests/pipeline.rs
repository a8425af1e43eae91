//! Training, pool construction and the end-to-end prediction path on the
//! seeded toy set.

use oasic_core::bank::{build_bank, build_bank_from_grids, calibrate_with_images, MemoryBank};
use oasic_core::classifier::{
    default_pool_keys, image_feature, train_classifier, train_on_features, train_pool, TrainParams,
};
use oasic_core::features::{FeatureDescriptor, FeatureExtractor, Handcrafted};
use oasic_core::predict::{oasic_predict, segment, PipelineConfig};
use oasic_core::seed::rng;
use oasic_core::severity::{estimate_severity, gray_mask};
use oasic_core::synth::PerlinParams;
use oasic_core::threshold::{otsu_threshold, threshold_fixed};
use oasic_core::toy::{gen_toy_dataset, ToyDataset, ToyParams};
use oasic_core::{Image, LabeledImage};
use rand::Rng;

fn toy(classes: usize, seed: u64) -> ToyDataset {
    gen_toy_dataset(&ToyParams {
        classes,
        per_class: 12,
        size: 64,
        seed,
    })
    .unwrap()
}

fn accuracy(c: &oasic_core::classifier::Classifier, set: &[LabeledImage], ex: &Handcrafted) -> f64 {
    let hits = set
        .iter()
        .filter(|s| c.predict(&image_feature(&s.image, ex).unwrap()).unwrap() == s.label)
        .count();
    hits as f64 / set.len() as f64
}

#[test]
fn separable_hues_are_fit() {
    let mut r = rng(31);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for i in 0..60 {
        let (label, base) = if i % 2 == 0 { ("red", [0.9f32, 0.1, 0.1]) } else { ("blue", [0.1f32, 0.1, 0.9]) };
        let mut v: Vec<f32> = base.iter().map(|&b| b + r.gen_range(-0.05f32..0.05)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        features.push(v);
        labels.push(label);
    }
    let descriptor = FeatureDescriptor {
        name: "rgb".into(),
        dim: 3,
        patch_size: 1,
    };
    let table = vec!["blue".to_string(), "red".to_string()];
    let c = train_on_features(&features, &labels, table.clone(), descriptor.clone(), 0.0, &TrainParams::default()).unwrap();
    let hits = features
        .iter()
        .zip(&labels)
        .filter(|(f, l)| c.predict(f).unwrap() == **l)
        .count();
    assert!(hits as f64 / 60.0 >= 0.99);

    let again = train_on_features(&features, &labels, table, descriptor, 0.0, &TrainParams::default()).unwrap();
    assert_eq!(c.weights(), again.weights());
    assert_eq!(c.bias(), again.bias());
    for f in &features {
        let p = c.probabilities(f).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn two_toy_classes_are_separated() {
    let data = toy(2, 32);
    let ex = Handcrafted::default();
    let c = train_classifier(&data.train, 0.0, &ex, &TrainParams::default()).unwrap();
    assert!(accuracy(&c, &data.test, &ex) >= 0.95);
}

#[test]
fn pool_members_follow_keys_and_manifests_respect_p() {
    let data = toy(3, 33);
    let ex = Handcrafted::default();
    let perlin = PerlinParams::default();
    let single = train_pool(&data.train, &[0.0], &ex, &perlin, 127, &TrainParams::default(), 1).unwrap();
    assert_eq!(single.pool.len(), 1);

    let keys = default_pool_keys();
    let full = train_pool(&data.train, &keys, &ex, &perlin, 127, &TrainParams::default(), 1).unwrap();
    assert_eq!(full.pool.len(), 10);
    assert_eq!(full.pool.keys(), keys);
    for (m, (p, rows)) in full.pool.members().iter().zip(keys.iter().zip(&full.manifests)) {
        assert_eq!(m.trained_p(), *p);
        assert_eq!(rows.len(), data.train.len());
        assert!(rows.iter().all(|r| r.2 <= *p + 1e-12), "p = {p}");
    }
}

struct Fixture {
    data: ToyDataset,
    bank: MemoryBank,
    pool: oasic_core::classifier::ModelPool,
    ex: Handcrafted,
}

fn fixture() -> Fixture {
    let data = toy(3, 34);
    let ex = Handcrafted::default();
    let perlin = PerlinParams::default();
    let bank = build_bank(&data.train, &ex).unwrap();
    let clean: Vec<Image> = data.train.iter().map(|t| t.image.clone()).collect();
    let bank = calibrate_with_images(bank, &clean, &ex, &perlin, 5).unwrap();
    let pool = train_pool(&data.train, &default_pool_keys(), &ex, &perlin, 127, &TrainParams::default(), 2)
        .unwrap()
        .pool;
    Fixture { data, bank, pool, ex }
}

#[test]
fn prediction_path_end_to_end() {
    let f = fixture();
    let config = PipelineConfig::default();

    // A training image contains the bank reference patches or close kin.
    let clean = &f.data.train[0].image;
    let p = oasic_predict(&f.pool, &f.bank, clean, &f.ex, &config).unwrap();
    assert!(p.severity.value() < 0.1, "{:?}", p.severity);
    assert!(p.selected_p <= 0.1);
    assert!(p.mask.coverage() < 0.2);

    let gray = Image::filled(64, 64, [127; 3]).unwrap();
    let p = oasic_predict(&f.pool, &f.bank, &gray, &f.ex, &config).unwrap();
    assert!(p.severity.value() > 0.85, "{:?}", p.severity);
    assert_eq!(p.selected_p, 0.9);

    // The path is the composition of its stages.
    for item in &f.data.test {
        let p = oasic_predict(&f.pool, &f.bank, &item.image, &f.ex, &config).unwrap();
        let a = f.bank.score_image(&item.image, &f.ex).unwrap();
        let tau = otsu_threshold(&a);
        let o = threshold_fixed(&a, tau).unwrap();
        let masked = gray_mask(&item.image, &o, 127).unwrap();
        let s = estimate_severity(&a).unwrap();
        let chosen = f.pool.select(s);
        let label = chosen.predict(&image_feature(&masked, &f.ex).unwrap()).unwrap();
        assert_eq!(p.label, label);
        assert_eq!(p.threshold, tau);
        assert_eq!(p.mask, o);
        assert_eq!(p.masked, masked);
        assert_eq!(p.severity, s);
        assert_eq!(segment(&f.bank, &item.image, &f.ex, &config).unwrap().mask, o);
    }
}

#[test]
fn bank_references_score_lowest() {
    let data = toy(3, 35);
    let ex = Handcrafted::default();
    let grids: Vec<_> = data.train.iter().map(|t| ex.extract(&t.image).unwrap()).collect();
    let labels: Vec<&str> = data.train.iter().map(|t| t.label.as_str()).collect();
    let (bank, selected) = build_bank_from_grids(ex.descriptor(), &labels, &grids).unwrap();
    let clean: Vec<Image> = data.train.iter().map(|t| t.image.clone()).collect();
    let bank = calibrate_with_images(bank, &clean, &ex, &PerlinParams::default(), 6).unwrap();
    let mean = |im: &Image| estimate_severity(&bank.score_image(im, &ex).unwrap()).unwrap().value();
    let others: Vec<f64> = data.train.iter().chain(&data.test).map(|t| mean(&t.image)).collect();
    for (_, idx) in selected {
        let own = mean(&data.train[idx].image);
        assert!(others.iter().all(|&o| own <= o));
    }
}
