//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 data
//! error.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use oasic_core::bank::{build_bank_from_grids, calibrate, calibrate_with_images};
use oasic_core::classifier::{default_pool_keys, train_pool, TrainParams};
use oasic_core::features::{Handcrafted, DEFAULT_PATCH_SIZE};
use oasic_core::predict::{oasic_predict, segment, PipelineConfig};
use oasic_core::seed::stage_seed;
use oasic_core::severity::{estimate_severity, gray_mask};
use oasic_core::synth::{synth_dataset, PerlinParams, DEFAULT_GRAY};
use oasic_core::threshold::ThresholdMode;
use oasic_core::toy::{gen_toy_dataset, ToyParams};
use oasic_core::LabeledImage;

use crate::error::{Error, Result};
use crate::experiment::{run_experiment, ExperimentConfig, OcclusionType};
use crate::features::{image_stem, FeatureSource};
use crate::formats::dataset::{write_labeled_dir, write_manifest, ManifestRow};
use crate::formats::{amap, bank, dataset, png, pool};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "oasic", version, about = "Occlusion-aware image classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the procedural toy dataset as <out>/<label>/<name>.png.
    Toy(ToyArgs),
    /// Occlude a labelled image directory at coverages drawn from U(0, p-max).
    Synth(SynthArgs),
    /// Build or calibrate a memory bank.
    #[command(subcommand)]
    Bank(BankCommand),
    /// Score an image, writing its anomaly map and binary mask.
    Segment(SegmentArgs),
    /// Gray out the masked pixels of an image.
    Mask(MaskArgs),
    /// Print the occlusion severity of an anomaly map.
    Severity(SeverityArgs),
    /// Train the pool of classifiers on gray-occluded copies of a dataset.
    TrainPool(TrainPoolArgs),
    /// Classify one image with segmentation, masking and model selection.
    Predict(PredictArgs),
    /// Run the ablation experiment and write the report.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct FeatureArgs {
    /// `handcrafted` or `oemb:<dir>` with one `<stem>.oemb` per image.
    #[arg(long, default_value = "handcrafted", value_parser = parse_source)]
    pub features: FeatureSource,
    #[arg(long, default_value_t = DEFAULT_PATCH_SIZE, value_parser = parse_positive)]
    pub patch_size: usize,
}

impl FeatureArgs {
    fn source(&self) -> FeatureSource {
        self.features.clone().with_patch_size(self.patch_size)
    }
}

fn parse_source(s: &str) -> std::result::Result<FeatureSource, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_threshold(s: &str) -> std::result::Result<ThresholdMode, String> {
    s.parse().map_err(|e: oasic_core::Error| e.to_string())
}

fn parse_occlusion(s: &str) -> std::result::Result<OcclusionType, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_fraction(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if (0.0..=1.0).contains(&v) => Ok(v),
        _ => Err(format!("{s:?} is not a number in [0, 1]")),
    }
}

fn parse_positive(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(format!("{s:?} is not a positive integer")),
    }
}

/// Comma-separated pool keys.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolKeys(pub Vec<f64>);

fn parse_keys(s: &str) -> std::result::Result<PoolKeys, String> {
    s.split(',').map(|k| parse_fraction(k.trim())).collect::<std::result::Result<_, _>>().map(PoolKeys)
}

#[derive(Debug, Args)]
pub struct PerlinArgs {
    #[arg(long, default_value_t = 4)]
    pub octaves: u32,
    #[arg(long, default_value_t = 0.5)]
    pub persistence: f64,
    #[arg(long, default_value_t = 4.0)]
    pub base_frequency: f64,
}

impl PerlinArgs {
    fn params(&self) -> Result<PerlinParams> {
        let p = PerlinParams {
            seed: 0,
            octaves: self.octaves,
            persistence: self.persistence,
            base_frequency: self.base_frequency,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 40)]
    pub per_class: usize,
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Clean images as <input>/<label>/<name>.png.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Ground-truth masks are written here with the same layout.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    #[arg(long, value_parser = parse_fraction)]
    pub p_max: f64,
    /// gray, texture-a, texture-b or texture:<png>.
    #[arg(long, default_value = "gray", value_parser = parse_occlusion)]
    pub fill: OcclusionType,
    #[arg(long, default_value_t = DEFAULT_GRAY)]
    pub gray: u8,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub perlin: PerlinArgs,
}

#[derive(Debug, Subcommand)]
pub enum BankCommand {
    /// Build an uncalibrated bank from one reference image per class.
    Build(BankBuildArgs),
    /// Set the normalisation bounds from clean and occluded images.
    Calibrate(BankCalibrateArgs),
}

#[derive(Debug, Args)]
pub struct BankBuildArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub features: FeatureArgs,
}

#[derive(Debug, Args)]
pub struct BankCalibrateArgs {
    #[arg(long)]
    pub bank: PathBuf,
    /// Clean images as <clean>/<label>/<name>.png.
    #[arg(long)]
    pub clean: PathBuf,
    /// Gray-occluded images; synthesised from the clean set when omitted.
    #[arg(long, requires = "masks")]
    pub occluded: Option<PathBuf>,
    /// Ground-truth masks for `--occluded`, same layout.
    #[arg(long, requires = "occluded")]
    pub masks: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub features: FeatureArgs,
    #[command(flatten)]
    pub perlin: PerlinArgs,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub amap: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    /// `otsu` or `fixed:<tau>`.
    #[arg(long, default_value = "otsu", value_parser = parse_threshold)]
    pub threshold: ThresholdMode,
    #[command(flatten)]
    pub features: FeatureArgs,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_GRAY)]
    pub gray: u8,
}

#[derive(Debug, Args)]
pub struct SeverityArgs {
    #[arg(long)]
    pub amap: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainPoolArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated pool keys.
    #[arg(long, value_parser = parse_keys)]
    pub pool: Option<PoolKeys>,
    #[arg(long, default_value_t = DEFAULT_GRAY)]
    pub gray: u8,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub step: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[command(flatten)]
    pub features: FeatureArgs,
    #[command(flatten)]
    pub perlin: PerlinArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value = "otsu", value_parser = parse_threshold)]
    pub threshold: ThresholdMode,
    #[arg(long, default_value_t = DEFAULT_GRAY)]
    pub gray: u8,
    #[command(flatten)]
    pub features: FeatureArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Flat `key = value` file; keys are the long flag names below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub features: Option<String>,
    #[arg(long)]
    pub levels: Option<String>,
    #[arg(long)]
    pub threshold: Option<String>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub dump_intermediates: bool,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let stdout = std::io::stdout();
    match execute(cli.command, &mut stdout.lock()) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Toy(a) => toy(a),
        Command::Synth(a) => synth(a),
        Command::Bank(BankCommand::Build(a)) => bank_build(a),
        Command::Bank(BankCommand::Calibrate(a)) => bank_calibrate(a),
        Command::Segment(a) => segment_cmd(a),
        Command::Mask(a) => mask_cmd(a),
        Command::Severity(a) => {
            let map = amap::read(&a.amap)?;
            let s = estimate_severity(&map)?;
            writeln!(out, "{:.6}", s.value()).map_err(|e| Error::io("<stdout>", e))
        }
        Command::TrainPool(a) => train_pool_cmd(a),
        Command::Predict(a) => predict_cmd(a, out),
        Command::Evaluate(a) => evaluate_cmd(a, out),
    }
}

fn toy(a: ToyArgs) -> Result<()> {
    let ds = gen_toy_dataset(&ToyParams {
        classes: a.classes,
        per_class: a.per_class,
        size: a.size,
        seed: a.seed,
    })?;
    let all: Vec<LabeledImage> = ds.train.into_iter().chain(ds.test).collect();
    write_labeled_dir(&a.out, &all)
}

fn synth(a: SynthArgs) -> Result<()> {
    let input = dataset::read_labeled_dir(&a.input)?;
    let fill = a.fill.fill(a.gray, a.seed)?;
    let set = synth_dataset(&input, a.p_max, &a.perlin.params()?, &fill, stage_seed(a.seed, "synth"))?;
    let mut rows = Vec::with_capacity(set.len());
    for s in &set {
        let dir = a.out.join(&s.label);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        png::write_image(&dir.join(format!("{}.png", s.name)), &s.image)?;
        if let Some(masks) = &a.masks {
            let dir = masks.join(&s.label);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            png::write_mask(&dir.join(format!("{}.png", s.name)), &s.mask)?;
        }
        rows.push(ManifestRow {
            name: s.name.clone(),
            label: s.label.clone(),
            coverage: s.coverage,
            seed: s.seed,
        });
    }
    write_manifest(&a.out.join(dataset::MANIFEST), &rows)
}

fn grids_for(source: &FeatureSource, items: &[LabeledImage]) -> Result<Vec<oasic_core::features::PatchEmbeddingGrid>> {
    items
        .iter()
        .map(|it| Ok(source.extractor(&it.name)?.extract(&it.image)?))
        .collect()
}

fn descriptor_for(source: &FeatureSource, items: &[LabeledImage]) -> Result<oasic_core::features::FeatureDescriptor> {
    let first = items.first().ok_or_else(|| Error::Config("no images".into()))?;
    Ok(source.extractor(&first.name)?.descriptor())
}

fn bank_build(a: BankBuildArgs) -> Result<()> {
    let source = a.features.source();
    let items = dataset::read_labeled_dir(&a.train)?;
    let grids = grids_for(&source, &items)?;
    let labels: Vec<&str> = items.iter().map(|i| i.label.as_str()).collect();
    let (b, _) = build_bank_from_grids(descriptor_for(&source, &items)?, &labels, &grids)?;
    bank::write(&a.out, &b)
}

fn bank_calibrate(a: BankCalibrateArgs) -> Result<()> {
    let source = a.features.source();
    let b = bank::read(&a.bank)?;
    let clean = dataset::read_labeled_dir(&a.clean)?;
    let calibrated = match (&a.occluded, &a.masks) {
        (Some(occ_dir), Some(mask_dir)) => {
            let occluded = dataset::read_labeled_dir(occ_dir)?;
            let grids = grids_for(&source, &occluded)?;
            let pairs = occluded
                .iter()
                .zip(grids)
                .map(|(it, g)| {
                    let mask = png::read_mask(&mask_dir.join(&it.label).join(format!("{}.png", it.name)))?;
                    Ok((g, mask))
                })
                .collect::<Result<Vec<_>>>()?;
            calibrate(b, &grids_for(&source, &clean)?, &pairs)?
        }
        _ => {
            if !source.embeds_pixels() {
                return Err(Error::Config(
                    "precomputed features need --occluded and --masks for calibration".into(),
                ));
            }
            let extractor = source.extractor("")?;
            let images: Vec<_> = clean.into_iter().map(|c| c.image).collect();
            calibrate_with_images(b, &images, extractor.as_ref(), &a.perlin.params()?, stage_seed(a.seed, "calibrate"))?
        }
    };
    bank::write(&a.out, &calibrated)
}

fn segment_cmd(a: SegmentArgs) -> Result<()> {
    let b = bank::read(&a.bank)?;
    let image = png::read_image(&a.image)?;
    let extractor = a.features.source().extractor(&image_stem(&a.image)?)?;
    let cfg = PipelineConfig {
        threshold: a.threshold,
        gray: DEFAULT_GRAY,
    };
    let seg = segment(&b, &image, extractor.as_ref(), &cfg)?;
    amap::write(&a.amap, &seg.anomaly)?;
    png::write_mask(&a.mask, &seg.mask)
}

fn mask_cmd(a: MaskArgs) -> Result<()> {
    let image = png::read_image(&a.image)?;
    let mask = png::read_mask(&a.mask)?;
    png::write_image(&a.out, &gray_mask(&image, &mask, a.gray)?)
}

fn train_pool_cmd(a: TrainPoolArgs) -> Result<()> {
    let source = a.features.source();
    if !source.embeds_pixels() {
        return Err(Error::Config(
            "train-pool synthesises occluded images and needs features computed from pixels".into(),
        ));
    }
    let extractor = Handcrafted {
        patch_size: a.features.patch_size,
    };
    let train = dataset::read_labeled_dir(&a.train)?;
    let keys = a.pool.map_or_else(default_pool_keys, |k| k.0);
    let params = TrainParams {
        epochs: a.epochs,
        step: a.step,
        batch: a.batch,
        seed: 0,
    };
    let trained = train_pool(
        &train,
        &keys,
        &extractor,
        &a.perlin.params()?,
        a.gray,
        &params,
        stage_seed(a.seed, "pool"),
    )?;
    pool::write_pool(&a.out, &trained.pool, &trained.seeds)?;
    for (m, rows) in trained.pool.members().iter().zip(&trained.manifests) {
        let rows: Vec<ManifestRow> = rows
            .iter()
            .map(|(name, label, coverage, seed)| ManifestRow {
                name: name.clone(),
                label: label.clone(),
                coverage: *coverage,
                seed: *seed,
            })
            .collect();
        write_manifest(&a.out.join(format!("d_{}.csv", m.trained_p())), &rows)?;
    }
    Ok(())
}

fn predict_cmd(a: PredictArgs, out: &mut dyn Write) -> Result<()> {
    let p = pool::read_pool(&a.pool)?;
    let b = bank::read(&a.bank)?;
    let image = png::read_image(&a.image)?;
    let extractor = a.features.source().extractor(&image_stem(&a.image)?)?;
    let cfg = PipelineConfig {
        threshold: a.threshold,
        gray: a.gray,
    };
    let pred = oasic_predict(&p, &b, &image, extractor.as_ref(), &cfg)?;
    let w = |e| Error::io("<stdout>", e);
    writeln!(out, "label: {}", pred.label).map_err(w)?;
    writeln!(out, "severity: {:.6}", pred.severity.value()).map_err(w)?;
    writeln!(out, "threshold: {:.6}", pred.threshold).map_err(w)?;
    writeln!(out, "model: f_{}", pred.selected_p).map_err(w)
}

/// Builds the experiment config from a file, `--set` pairs and flags, in
/// that order of precedence (later wins).
pub fn evaluate_config(a: &EvaluateArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    for s in &a.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    let flags: [(&str, Option<String>); 8] = [
        ("out", a.out.as_ref().map(|p| p.display().to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("dataset", a.dataset.clone()),
        ("features", a.features.clone()),
        ("levels", a.levels.clone()),
        ("threshold", a.threshold.clone()),
        ("repeats", a.repeats.map(|v| v.to_string())),
        ("threads", a.threads.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    if a.dump_intermediates {
        cfg.dump_intermediates = true;
    }
    Ok(cfg)
}

fn evaluate_cmd(a: EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = evaluate_config(&a)?;
    let report = run_experiment(&cfg)?;
    let w = |e| Error::io("<stdout>", e);
    for c in &report.configurations {
        match c.auc_occ {
            Some(v) => writeln!(out, "{:<18} auc_occ {v:.4}", c.name).map_err(w)?,
            None => writeln!(out, "{:<18} accuracy {:.4}", c.name, c.accuracy[0]).map_err(w)?,
        }
    }
    if cfg.out.is_none() {
        out.write_all(report.to_json()?.as_bytes()).map_err(w)?;
    }
    Ok(())
}
