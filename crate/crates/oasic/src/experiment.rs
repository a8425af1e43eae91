//! The ablation experiment: five classifier configurations evaluated on
//! identically synthesised occluded test sets, plus segmentation quality,
//! severity error and a per-member accuracy matrix.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use oasic_core::bank::{build_bank, calibrate_with_images, MemoryBank};
use oasic_core::classifier::{
    default_pool_keys, train_classifier, train_pool, Classifier, ModelPool, TrainParams,
};
use oasic_core::features::{FeatureExtractor, Handcrafted};
use oasic_core::metrics::{auc_occ, auroc, average_precision, EvalCurve};
use oasic_core::predict::{segment, PipelineConfig};
use oasic_core::seed::{item_seed, stage_seed};
use oasic_core::synth::{occlude, synth_dataset, FillSpec, PerlinParams, DEFAULT_GRAY};
use oasic_core::threshold::ThresholdMode;
use oasic_core::toy::{gen_toy_dataset, texture_leaves, texture_smoke, ToyParams};
use oasic_core::{Image, LabeledImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSource;
use crate::formats::{amap, dataset, png};

pub const THREADS_ENV: &str = "OASIC_THREADS";
pub const TEXTURE_SIZE: usize = 256;
/// Patch size of the toy experiment: a 16x16 grid on 128 px images.
pub const EXPERIMENT_PATCH_SIZE: usize = 8;

pub const CONFIG_FULL: &str = "oasic_full";
pub const CONFIG_MASK_ONLY: &str = "mask_only";
pub const CONFIG_SELECTION_ONLY: &str = "selection_only";
pub const CONFIG_OCCLUSION_TRAINED: &str = "occlusion_trained";
pub const CONFIG_CLEAN: &str = "clean_trained";
pub const CONFIGURATIONS: [&str; 5] = [
    CONFIG_FULL,
    CONFIG_MASK_ONLY,
    CONFIG_SELECTION_ONLY,
    CONFIG_OCCLUSION_TRAINED,
    CONFIG_CLEAN,
];

/// Pool key of the model used by the mask-only configuration.
pub const MASK_ONLY_P: f64 = 0.9;
/// Coverage range of the texture-occluded baseline training set.
pub const BASELINE_P: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetSpec {
    Toy { classes: usize, per_class: usize, size: usize },
    /// `<dir>/<label>/<name>.png`, split 75/25 by sorted name within a class.
    Dir(PathBuf),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        let t = ToyParams::default();
        DatasetSpec::Toy {
            classes: t.classes,
            per_class: t.per_class,
            size: t.size,
        }
    }
}

/// Kind of occluder used when synthesising test or baseline images.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum OcclusionType {
    Gray,
    /// Bundled leaf-like texture.
    TextureA,
    /// Bundled smoke-like texture.
    TextureB,
    File(PathBuf),
}

impl fmt::Display for OcclusionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OcclusionType::Gray => f.write_str("gray"),
            OcclusionType::TextureA => f.write_str("texture-a"),
            OcclusionType::TextureB => f.write_str("texture-b"),
            OcclusionType::File(p) => write!(f, "texture:{}", p.display()),
        }
    }
}

impl FromStr for OcclusionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gray" => Ok(OcclusionType::Gray),
            "texture-a" => Ok(OcclusionType::TextureA),
            "texture-b" => Ok(OcclusionType::TextureB),
            _ => match s.strip_prefix("texture:") {
                Some(p) if !p.is_empty() => Ok(OcclusionType::File(p.into())),
                _ => Err(Error::Config(format!("unknown occlusion type {s:?}"))),
            },
        }
    }
}

impl OcclusionType {
    /// Fill used for this occluder; textures get their offsets reseeded per
    /// image by the synthesiser.
    pub fn fill(&self, gray: u8, seed: u64) -> Result<FillSpec> {
        let source = match self {
            OcclusionType::Gray => return Ok(FillSpec::Gray(gray)),
            OcclusionType::TextureA => texture_leaves(TEXTURE_SIZE, stage_seed(seed, "texture-a"))?,
            OcclusionType::TextureB => texture_smoke(TEXTURE_SIZE, stage_seed(seed, "texture-b"))?,
            OcclusionType::File(p) => png::read_image(p)?,
        };
        Ok(FillSpec::Texture {
            source,
            offset_seed: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub features: FeatureSource,
    pub pool_keys: Vec<f64>,
    pub threshold: ThresholdMode,
    pub gray: u8,
    pub perlin: PerlinParams,
    pub test_types: Vec<OcclusionType>,
    pub baseline_type: OcclusionType,
    pub levels: Vec<f64>,
    /// Occlusion draws per test image and level.
    pub repeats: usize,
    pub train: TrainParams,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub dump_intermediates: bool,
    pub threads: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            features: FeatureSource::Handcrafted {
                patch_size: EXPERIMENT_PATCH_SIZE,
            },
            pool_keys: default_pool_keys(),
            threshold: ThresholdMode::Otsu,
            gray: DEFAULT_GRAY,
            perlin: PerlinParams::default(),
            test_types: vec![OcclusionType::Gray, OcclusionType::TextureA, OcclusionType::TextureB],
            baseline_type: OcclusionType::TextureA,
            levels: (0..10).map(|i| i as f64 / 10.0).collect(),
            repeats: 2,
            train: TrainParams::default(),
            seed: 0,
            out: None,
            dump_intermediates: false,
            threads: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Sets one key; the keys are the long flag names of `evaluate`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let toy = |ds: &mut DatasetSpec| -> Result<(usize, usize, usize)> {
            match ds {
                DatasetSpec::Toy {
                    classes,
                    per_class,
                    size,
                } => Ok((*classes, *per_class, *size)),
                DatasetSpec::Dir(_) => Err(Error::Config(format!("{key} only applies to the toy dataset"))),
            }
        };
        match key {
            "dataset" => {
                self.dataset = if value == "toy" {
                    match self.dataset {
                        DatasetSpec::Toy { .. } => self.dataset.clone(),
                        DatasetSpec::Dir(_) => DatasetSpec::default(),
                    }
                } else {
                    DatasetSpec::Dir(value.into())
                }
            }
            "classes" | "per-class" | "size" => {
                let (mut c, mut n, mut s) = toy(&mut self.dataset)?;
                let v = parse(key, value)?;
                match key {
                    "classes" => c = v,
                    "per-class" => n = v,
                    _ => s = v,
                }
                self.dataset = DatasetSpec::Toy {
                    classes: c,
                    per_class: n,
                    size: s,
                };
            }
            "features" => {
                let ps = self.patch_size();
                self.features = value.parse::<FeatureSource>()?.with_patch_size(ps);
            }
            "patch-size" => {
                self.features = self.features.clone().with_patch_size(parse(key, value)?);
            }
            "pool" => self.pool_keys = parse_list(key, value)?,
            "threshold" => self.threshold = value.parse()?,
            "gray" => self.gray = parse(key, value)?,
            "octaves" => self.perlin.octaves = parse(key, value)?,
            "persistence" => self.perlin.persistence = parse(key, value)?,
            "base-frequency" => self.perlin.base_frequency = parse(key, value)?,
            "test-types" => {
                self.test_types = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "baseline-type" => self.baseline_type = value.parse()?,
            "levels" => self.levels = parse_list(key, value)?,
            "repeats" => self.repeats = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "step" => self.train.step = parse(key, value)?,
            "batch" => self.train.batch = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "out" => self.out = Some(value.into()),
            "dump-intermediates" => self.dump_intermediates = parse(key, value)?,
            "threads" => self.threads = Some(parse(key, value)?),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn patch_size(&self) -> usize {
        match self.features {
            FeatureSource::Handcrafted { patch_size } => patch_size,
            FeatureSource::Oemb(_) => oasic_core::features::DEFAULT_PATCH_SIZE,
        }
    }

    /// Settings that determine the results, as key/value pairs. Output
    /// location and thread count are left out.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        match &self.dataset {
            DatasetSpec::Toy {
                classes,
                per_class,
                size,
            } => {
                put("dataset", "toy".into());
                put("classes", classes.to_string());
                put("per-class", per_class.to_string());
                put("size", size.to_string());
            }
            DatasetSpec::Dir(p) => put("dataset", p.display().to_string()),
        }
        match &self.features {
            FeatureSource::Handcrafted { patch_size } => {
                put("features", "handcrafted".into());
                put("patch-size", patch_size.to_string());
            }
            FeatureSource::Oemb(p) => put("features", format!("oemb:{}", p.display())),
        }
        put("pool", join(&self.pool_keys));
        put("threshold", self.threshold.to_string());
        put("gray", self.gray.to_string());
        put("octaves", self.perlin.octaves.to_string());
        put("persistence", self.perlin.persistence.to_string());
        put("base-frequency", self.perlin.base_frequency.to_string());
        put("test-types", join(&self.test_types));
        put("baseline-type", self.baseline_type.to_string());
        put("levels", join(&self.levels));
        put("repeats", self.repeats.to_string());
        put("epochs", self.train.epochs.to_string());
        put("step", self.train.step.to_string());
        put("batch", self.train.batch.to_string());
        put("seed", self.seed.to_string());
        m
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("levels must not be empty".into()));
        }
        if self.levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("levels must be strictly increasing".into()));
        }
        if let Some(&l) = self.levels.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(Error::Config(format!("level {l} outside [0, 1]")));
        }
        if self.pool_keys.is_empty() {
            return Err(Error::Config("pool must have at least one key".into()));
        }
        if let Some(&p) = self.pool_keys.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Config(format!("pool key {p} outside [0, 1]")));
        }
        if self.test_types.is_empty() {
            return Err(Error::Config("test-types must not be empty".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be >= 1".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        if !self.features.embeds_pixels() {
            return Err(Error::Config(
                "evaluate synthesises new images and needs features computed from pixels".into(),
            ));
        }
        if let DatasetSpec::Dir(p) = &self.dataset {
            if !p.is_dir() {
                return Err(Error::Config(format!("dataset {} is not a directory", p.display())));
            }
        }
        for t in self.test_types.iter().chain([&self.baseline_type]) {
            if let OcclusionType::File(p) = t {
                if !p.is_file() {
                    return Err(Error::Config(format!("texture {} does not exist", p.display())));
                }
            }
        }
        self.perlin.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankSummary {
    pub entries: usize,
    pub a_lo: f32,
    pub a_hi: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigCurve {
    pub name: String,
    pub accuracy: Vec<f64>,
    /// `None` when the level grid has a single point.
    pub auc_occ: Option<f64>,
}

/// Accuracy of one configuration on one occluder type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeCurve {
    pub name: String,
    pub occlusion: String,
    pub accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityRow {
    pub occlusion: String,
    pub level: f64,
    pub mean_estimate: f64,
    pub mean_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationRow {
    pub occlusion: String,
    pub level: f64,
    /// Mean per-image pixel AUROC.
    pub mauroc: f64,
    /// Mean per-image pixel average precision.
    pub map: f64,
    pub images: usize,
}

/// Accuracy of one pool member on gray-occluded, unmasked test images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecialistRow {
    pub level: f64,
    pub trained_p: f64,
    pub accuracy: f64,
    pub mean_true_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: BTreeMap<String, String>,
    pub levels: Vec<f64>,
    pub test_types: Vec<String>,
    pub test_images: usize,
    pub bank: BankSummary,
    pub configurations: Vec<ConfigCurve>,
    pub by_occlusion: Vec<TypeCurve>,
    pub severity: Vec<SeverityRow>,
    pub segmentation: Vec<SegmentationRow>,
    pub specialists: Vec<SpecialistRow>,
}

impl Report {
    pub fn curve(&self, name: &str) -> Option<&ConfigCurve> {
        self.configurations.iter().find(|c| c.name == name)
    }

    /// The pool member with the highest accuracy at `level`; ties go to the
    /// higher mean true-class probability, then the smaller key.
    pub fn best_specialist(&self, level: f64) -> Option<&SpecialistRow> {
        self.specialists
            .iter()
            .filter(|r| (r.level - level).abs() < 1e-9)
            .fold(None, |best: Option<&SpecialistRow>, r| match best {
                Some(b)
                    if (b.accuracy, b.mean_true_prob) >= (r.accuracy, r.mean_true_prob) =>
                {
                    Some(b)
                }
                _ => Some(r),
            })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// `config,level,accuracy` rows.
    pub fn curves_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["config", "level", "accuracy"])?;
        for c in &self.configurations {
            for (l, a) in self.levels.iter().zip(&c.accuracy) {
                w.write_record([c.name.clone(), l.to_string(), a.to_string()])?;
            }
        }
        csv_string(w)
    }

    pub fn segmentation_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["occlusion", "level", "mauroc", "map", "images"])?;
        for r in &self.segmentation {
            w.write_record([
                r.occlusion.clone(),
                r.level.to_string(),
                r.mauroc.to_string(),
                r.map.to_string(),
                r.images.to_string(),
            ])?;
        }
        csv_string(w)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("report.json", self.to_json()?),
            ("curves.csv", self.curves_csv()?),
            ("segmentation.csv", self.segmentation_csv()?),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Config(format!("csv: {}", e.error())))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Loads the dataset and splits it into train and test.
pub fn load_dataset(spec: &DatasetSpec, seed: u64) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    match spec {
        DatasetSpec::Toy {
            classes,
            per_class,
            size,
        } => {
            let ds = gen_toy_dataset(&ToyParams {
                classes: *classes,
                per_class: *per_class,
                size: *size,
                seed,
            })?;
            Ok((ds.train, ds.test))
        }
        DatasetSpec::Dir(dir) => {
            let all = dataset::read_labeled_dir(dir)?;
            let mut by_class: BTreeMap<String, Vec<LabeledImage>> = BTreeMap::new();
            for item in all {
                by_class.entry(item.label.clone()).or_default().push(item);
            }
            let (mut train, mut test) = (Vec::new(), Vec::new());
            for (label, items) in by_class {
                let n_train = items.len() * 3 / 4;
                if n_train == 0 || n_train == items.len() {
                    return Err(Error::Config(format!(
                        "class {label:?} needs at least 2 images for a train/test split"
                    )));
                }
                for (i, item) in items.into_iter().enumerate() {
                    if i < n_train {
                        train.push(item);
                    } else {
                        test.push(item);
                    }
                }
            }
            Ok((train, test))
        }
    }
}

/// Everything trained before evaluation.
pub struct Trained {
    pub bank: MemoryBank,
    pub pool: ModelPool,
    pub mask_only: Classifier,
    pub occlusion_trained: Classifier,
    pub clean: Classifier,
}

fn pool_member(
    pool: &ModelPool,
    p: f64,
    train: &[LabeledImage],
    extractor: &Handcrafted,
    cfg: &ExperimentConfig,
    pool_seed: u64,
) -> Result<Classifier> {
    if let Some(m) = pool.get(p) {
        return Ok(m.clone());
    }
    let t = train_pool(train, &[p], extractor, &cfg.perlin, cfg.gray, &cfg.train, pool_seed)?;
    Ok(t.pool.members()[0].clone())
}

pub fn train_all(cfg: &ExperimentConfig, train: &[LabeledImage]) -> Result<Trained> {
    let extractor = Handcrafted {
        patch_size: cfg.patch_size(),
    };
    let bank = build_bank(train, &extractor)?;
    let clean_images: Vec<Image> = train.iter().map(|t| t.image.clone()).collect();
    let bank = calibrate_with_images(
        bank,
        &clean_images,
        &extractor,
        &cfg.perlin,
        stage_seed(cfg.seed, "calibrate"),
    )?;

    // Members depend only on (seed, p), so they train independently.
    let pool_seed = stage_seed(cfg.seed, "pool");
    let members = cfg
        .pool_keys
        .par_iter()
        .map(|&p| {
            let t = train_pool(train, &[p], &extractor, &cfg.perlin, cfg.gray, &cfg.train, pool_seed)?;
            Ok(t.pool.members()[0].clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let pool = ModelPool::new(members)?;

    let mask_only = pool_member(&pool, MASK_ONLY_P, train, &extractor, cfg, pool_seed)?;
    let clean = pool_member(&pool, 0.0, train, &extractor, cfg, pool_seed)?;

    let baseline_seed = stage_seed(cfg.seed, "baseline");
    let fill = cfg.baseline_type.fill(cfg.gray, cfg.seed)?;
    let set = synth_dataset(train, BASELINE_P, &cfg.perlin, &fill, baseline_seed)?;
    let set: Vec<LabeledImage> = set.into_iter().map(Into::into).collect();
    let params = TrainParams {
        seed: stage_seed(baseline_seed, "train"),
        ..cfg.train
    };
    let occlusion_trained = train_classifier(&set, BASELINE_P, &extractor, &params)?;

    Ok(Trained {
        bank,
        pool,
        mask_only,
        occlusion_trained,
        clean,
    })
}

/// Outcome for one occluded test image.
#[derive(Debug, Clone)]
struct Sample {
    correct: [bool; 5],
    severity: f64,
    coverage: f64,
    /// `(auroc, ap)` when the ground-truth mask has both classes.
    ranking: Option<(f64, f64)>,
    /// Per pool member: `(correct, true-class probability)`; gray only.
    members: Vec<(bool, f64)>,
}

struct Job<'a> {
    kind: usize,
    level: usize,
    repeat: usize,
    item: &'a LabeledImage,
    index: usize,
}

fn test_seed(master: u64, kind: &OcclusionType, level: f64) -> u64 {
    stage_seed(master, &format!("test/{kind}/{level}"))
}

fn classify(model: &Classifier, feature: &[f32], label: &str) -> Result<(bool, f64)> {
    let probs = model.probabilities(feature)?;
    let pred = model.predict_index(feature)?;
    let truth = model.label_index(label);
    Ok((Some(pred) == truth, truth.map_or(0.0, |t| probs[t])))
}

fn evaluate_one(
    cfg: &ExperimentConfig,
    trained: &Trained,
    fills: &[FillSpec],
    job: &Job<'_>,
    n_test: usize,
) -> Result<Sample> {
    let extractor = Handcrafted {
        patch_size: cfg.patch_size(),
    };
    let kind = &cfg.test_types[job.kind];
    let level = cfg.levels[job.level];
    let seed = item_seed(
        test_seed(cfg.seed, kind, level),
        (job.repeat * n_test + job.index) as u64,
    );
    let occ = occlude(&job.item.image, level, &cfg.perlin, &fills[job.kind], seed)?;
    let pipeline = PipelineConfig {
        threshold: cfg.threshold,
        gray: cfg.gray,
    };
    let seg = segment(&trained.bank, &occ.image, &extractor, &pipeline)?;
    let raw = extractor.extract(&occ.image)?.pooled();
    let masked = extractor.extract(&seg.masked)?.pooled();
    let selected = trained.pool.select(seg.severity);
    let label = job.item.label.as_str();
    let correct = [
        classify(selected, &masked, label)?.0,
        classify(&trained.mask_only, &masked, label)?.0,
        classify(selected, &raw, label)?.0,
        classify(&trained.occlusion_trained, &raw, label)?.0,
        classify(&trained.clean, &raw, label)?.0,
    ];
    let members = if *kind == OcclusionType::Gray {
        trained
            .pool
            .members()
            .iter()
            .map(|m| classify(m, &raw, label))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let n_occ = occ.mask.count_occluded();
    let ranking = if n_occ > 0 && n_occ < occ.mask.bits().len() {
        let scores: Vec<f64> = seg.anomaly.values().iter().map(|&v| f64::from(v)).collect();
        Some((
            auroc(&scores, occ.mask.bits())?,
            average_precision(&scores, occ.mask.bits())?,
        ))
    } else {
        None
    };
    if cfg.dump_intermediates && job.repeat == 0 {
        if let Some(out) = &cfg.out {
            let dir = out
                .join("intermediates")
                .join(kind.to_string().replace([':', '/'], "_"))
                .join(format!("{level}"));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let name = &job.item.name;
            png::write_image(&dir.join(format!("{name}_occluded.png")), &occ.image)?;
            png::write_mask(&dir.join(format!("{name}_truth.png")), &occ.mask)?;
            amap::write(&dir.join(format!("{name}.amap")), &seg.anomaly)?;
            png::write_mask(&dir.join(format!("{name}_mask.png")), &seg.mask)?;
            png::write_image(&dir.join(format!("{name}_masked.png")), &seg.masked)?;
        }
    }
    Ok(Sample {
        correct,
        severity: seg.severity.value(),
        coverage: occ.mask.coverage(),
        ranking,
        members,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Worker count: the config value, else `OASIC_THREADS`, else rayon's
/// default.
pub fn thread_count(cfg: &ExperimentConfig) -> Result<Option<usize>> {
    if cfg.threads.is_some() {
        return Ok(cfg.threads);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_count(cfg)? {
        builder = builder.num_threads(n);
    }
    let workers = builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    workers.install(|| run_inner(cfg))
}

fn run_inner(cfg: &ExperimentConfig) -> Result<Report> {
    let (train, test) = load_dataset(&cfg.dataset, stage_seed(cfg.seed, "dataset"))?;
    let trained = train_all(cfg, &train)?;
    let fills = cfg
        .test_types
        .iter()
        .map(|t| t.fill(cfg.gray, cfg.seed))
        .collect::<Result<Vec<_>>>()?;

    let mut jobs = Vec::new();
    for kind in 0..cfg.test_types.len() {
        for level in 0..cfg.levels.len() {
            for repeat in 0..cfg.repeats {
                for (index, item) in test.iter().enumerate() {
                    jobs.push(Job {
                        kind,
                        level,
                        repeat,
                        item,
                        index,
                    });
                }
            }
        }
    }
    let samples = jobs
        .par_iter()
        .map(|j| evaluate_one(cfg, &trained, &fills, j, test.len()))
        .collect::<Result<Vec<_>>>()?;
    let cells: Vec<(&Job, &Sample)> = jobs.iter().zip(&samples).collect();

    let mut configurations = Vec::with_capacity(CONFIGURATIONS.len());
    for (ci, name) in CONFIGURATIONS.iter().enumerate() {
        let accuracy: Vec<f64> = (0..cfg.levels.len())
            .map(|li| {
                mean(cells
                    .iter()
                    .filter(|(j, _)| j.level == li)
                    .map(|(_, s)| f64::from(u8::from(s.correct[ci]))))
            })
            .collect();
        let auc = if cfg.levels.len() > 1 {
            Some(auc_occ(&EvalCurve::new(cfg.levels.clone(), accuracy.clone())?)?)
        } else {
            None
        };
        configurations.push(ConfigCurve {
            name: name.to_string(),
            accuracy,
            auc_occ: auc,
        });
    }

    let mut by_occlusion = Vec::new();
    for (ci, name) in CONFIGURATIONS.iter().enumerate() {
        for (ki, kind) in cfg.test_types.iter().enumerate() {
            by_occlusion.push(TypeCurve {
                name: name.to_string(),
                occlusion: kind.to_string(),
                accuracy: (0..cfg.levels.len())
                    .map(|li| {
                        mean(cells
                            .iter()
                            .filter(|(j, _)| j.kind == ki && j.level == li)
                            .map(|(_, s)| f64::from(u8::from(s.correct[ci]))))
                    })
                    .collect(),
            });
        }
    }

    let mut severity = Vec::new();
    let mut segmentation = Vec::new();
    for (ki, kind) in cfg.test_types.iter().enumerate() {
        for (li, &level) in cfg.levels.iter().enumerate() {
            let cell: Vec<&Sample> = cells
                .iter()
                .filter(|(j, _)| j.kind == ki && j.level == li)
                .map(|(_, s)| *s)
                .collect();
            severity.push(SeverityRow {
                occlusion: kind.to_string(),
                level,
                mean_estimate: mean(cell.iter().map(|s| s.severity)),
                mean_abs_error: mean(cell.iter().map(|s| (s.severity - s.coverage).abs())),
            });
            let ranked: Vec<(f64, f64)> = cell.iter().filter_map(|s| s.ranking).collect();
            if !ranked.is_empty() {
                segmentation.push(SegmentationRow {
                    occlusion: kind.to_string(),
                    level,
                    mauroc: mean(ranked.iter().map(|r| r.0)),
                    map: mean(ranked.iter().map(|r| r.1)),
                    images: ranked.len(),
                });
            }
        }
    }

    let mut specialists = Vec::new();
    if let Some(gray) = cfg.test_types.iter().position(|t| *t == OcclusionType::Gray) {
        for (li, &level) in cfg.levels.iter().enumerate() {
            let cell: Vec<&Sample> = cells
                .iter()
                .filter(|(j, _)| j.kind == gray && j.level == li)
                .map(|(_, s)| *s)
                .collect();
            for (mi, m) in trained.pool.members().iter().enumerate() {
                specialists.push(SpecialistRow {
                    level,
                    trained_p: m.trained_p(),
                    accuracy: mean(cell.iter().map(|s| f64::from(u8::from(s.members[mi].0)))),
                    mean_true_prob: mean(cell.iter().map(|s| s.members[mi].1)),
                });
            }
        }
    }

    let cal = trained.bank.calibration().ok_or(oasic_core::Error::Uncalibrated)?;
    let report = Report {
        config: cfg.echo(),
        levels: cfg.levels.clone(),
        test_types: cfg.test_types.iter().map(ToString::to_string).collect(),
        test_images: test.len(),
        bank: BankSummary {
            entries: trained.bank.len(),
            a_lo: cal.lo,
            a_hi: cal.hi,
        },
        configurations,
        by_occlusion,
        severity,
        segmentation,
        specialists,
    };
    if let Some(out) = &cfg.out {
        report.write(out)?;
    }
    Ok(report)
}
