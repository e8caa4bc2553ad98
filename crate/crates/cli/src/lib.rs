//! Commands behind the `ltm3d` binary: dataset building, training,
//! sampling, evaluation and the fusion ablation sweep.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ltm3d_core::checkpoint::{load_bundle, load_bundle_expecting, save_bundle, ModelBundle, StageState};
use ltm3d_core::condition::Prompt;
use ltm3d_core::config::{ExperimentConfig, GenerationConfig, MetricsConfig, Modality};
use ltm3d_core::data::{build_dataset, read_ply, write_ply, DatasetManifest, LoadedShape, PointCloudShape, SilhouetteImage, Split, View};
use ltm3d_core::metrics::{
    chamfer, cross_view_consistency, emd_with, f_score, toy_fid, CrossViewEntry, EmdOptions, FeatureMap, FidEntry, MetricReport,
    SampleMetrics,
};
use ltm3d_core::recon::RECON_PREFIX;
use ltm3d_core::sampler::generate_shape;
use ltm3d_core::trainer::{train_backbone, train_recon, training_set, TrainOptions, BACKBONE_STAGE, RECON_STAGE};
use ltm3d_core::Error;
use serde::{Deserialize, Serialize};

/// Environment variable overriding the training and generation seeds.
pub const SEED_ENV: &str = "LTM3D_SEED";
/// Index of a sample directory, written by `sample` and read by `eval`.
pub const SAMPLES_INDEX: &str = "samples.json";

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// A failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        let code = match err {
            Error::Config(_) | Error::ConfigHash { .. } | Error::Spec(_) | Error::Json(_) => EXIT_CONFIG,
            Error::Numerical(_) => EXIT_NUMERICAL,
            _ => EXIT_FAILURE,
        };
        Self { code, message: err.to_string() }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError { code: EXIT_FAILURE, message: format!("{}: {e}", path.display()) }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// Loads a config file (desk preset when `None`) and applies the seed
/// override from [`SEED_ENV`], if set.
pub fn load_config(path: Option<&Path>) -> CliResult<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p).map_err(|e| match e {
            Error::Io { .. } => CliError::config(e.to_string()),
            other => other.into(),
        })?,
        None => ExperimentConfig::default(),
    };
    if let Ok(raw) = std::env::var(SEED_ENV) {
        let seed: u64 = raw.trim().parse().map_err(|_| CliError::config(format!("{SEED_ENV}={raw} is not an unsigned integer")))?;
        cfg.train.seed = seed;
        cfg.train_recon.seed = seed;
        cfg.generation.seed = seed;
    }
    Ok(cfg)
}

pub fn cmd_build_data(cfg: &ExperimentConfig, out: &Path) -> CliResult<DatasetManifest> {
    let manifest = build_dataset(&cfg.dataset, out)?;
    log::info!("wrote {} shapes to {}", manifest.entries.len(), manifest.path().display());
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Backbone,
    Recon,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Backbone => BACKBONE_STAGE,
            Stage::Recon => RECON_STAGE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub data: PathBuf,
    pub stage: Stage,
    pub checkpoint: PathBuf,
    pub resume: bool,
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub stage: String,
    pub checkpoint: PathBuf,
    pub losses: PathBuf,
    pub step: u64,
    pub epochs: usize,
    pub epoch_losses: Vec<f64>,
    pub backbone_hash: String,
    pub recon_hash: String,
}

/// Restores the reconstruction adapter to its initial state.
fn reset_recon(bundle: &mut ModelBundle) -> CliResult<()> {
    let fresh = ModelBundle::new(&bundle.config)?;
    for (_, name, value) in fresh.params.iter().filter(|(_, n, _)| n.starts_with(RECON_PREFIX)) {
        let id = bundle.params.id(name).expect("same config, same parameters");
        *bundle.params.get_mut(id) = value.clone();
    }
    bundle.state.recon = StageState::default();
    bundle.state.recon_encoder_source = None;
    bundle.optimizers.remove(RECON_STAGE);
    if let Some(ema) = &mut bundle.ema {
        ema.retain(|name, _| !name.starts_with(RECON_PREFIX));
    }
    Ok(())
}

fn losses_path(checkpoint: &Path, stage: Stage) -> PathBuf {
    let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    checkpoint.with_file_name(format!("{stem}.{}.losses.jsonl", stage.name()))
}

/// Trains one stage and writes the checkpoint plus its per-epoch loss log.
///
/// The backbone stage starts fresh unless `resume` is set. The recon stage
/// builds on an existing checkpoint when there is one (for the trained
/// condition encoder) and otherwise starts from an untrained bundle.
pub fn cmd_train(cfg: &ExperimentConfig, args: &TrainArgs) -> CliResult<TrainSummary> {
    let existing = args.checkpoint.is_file();
    if args.resume && !existing {
        return Err(CliError::config(format!("--resume: no checkpoint at {}", args.checkpoint.display())));
    }
    let mut bundle = match (args.stage, existing, args.resume) {
        (_, true, true) | (Stage::Recon, true, false) => load_bundle_expecting(&args.checkpoint, &cfg.model)?,
        _ => ModelBundle::new(&cfg.model)?,
    };
    if args.stage == Stage::Recon && !args.resume {
        reset_recon(&mut bundle)?;
    }
    let manifest = DatasetManifest::load(&args.data)?;
    let shapes = manifest.load_split(Some(Split::Train))?;
    let examples = training_set(&shapes, &cfg.model)?;
    let mut train_cfg = match args.stage {
        Stage::Backbone => cfg.train.clone(),
        Stage::Recon => cfg.train_recon.clone(),
    };
    if let Some(e) = args.epochs {
        train_cfg.epochs = e;
    }
    let opts = TrainOptions {
        checkpoint: Some(args.checkpoint.clone()),
        dump_dir: args.checkpoint.parent().map(Path::to_path_buf),
    };
    match args.stage {
        Stage::Backbone => train_backbone(&mut bundle, &examples, &train_cfg, &opts)?,
        Stage::Recon => train_recon(&mut bundle, &examples, &train_cfg, &opts)?,
    };
    save_bundle(&bundle, &args.checkpoint)?;

    let state = match args.stage {
        Stage::Backbone => &bundle.state.backbone,
        Stage::Recon => &bundle.state.recon,
    };
    let losses = losses_path(&args.checkpoint, args.stage);
    let lines: String = state
        .epoch_losses
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{}\n", serde_json::json!({ "epoch": i + 1, "loss": l })))
        .collect();
    fs::write(&losses, lines).map_err(|e| io_err(&losses, e))?;
    Ok(TrainSummary {
        stage: args.stage.name().to_string(),
        checkpoint: args.checkpoint.clone(),
        losses,
        step: state.step,
        epochs: state.epochs,
        epoch_losses: state.epoch_losses.clone(),
        backbone_hash: bundle.backbone_hash(),
        recon_hash: bundle.recon_hash(),
    })
}

/// Parses a command-line condition: a PNG path or `family:p1,p2,...`.
pub fn parse_condition(text: &str, resolution: usize) -> CliResult<Prompt> {
    if text.to_ascii_lowercase().ends_with(".png") {
        let path = Path::new(text);
        let img = SilhouetteImage::read_png(path, View::new(0.0, 0.0))?;
        if img.resolution != resolution {
            return Err(CliError::config(format!("{text}: image is {0}x{0}, model expects {resolution}x{resolution}", img.resolution)));
        }
        Ok(Prompt::Image(img))
    } else {
        Ok(text.parse()?)
    }
}

/// One generation request: a prompt plus what it should be compared with.
#[derive(Debug, Clone)]
pub struct SampleJob {
    pub label: String,
    pub condition: String,
    pub prompt: Prompt,
    pub reference: Option<String>,
    pub view: Option<usize>,
}

fn sanitize(text: &str) -> String {
    text.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

impl SampleJob {
    pub fn from_condition(text: &str, resolution: usize) -> CliResult<Self> {
        let prompt = parse_condition(text, resolution)?;
        let stem = Path::new(text).file_stem().and_then(|s| s.to_str()).filter(|_| matches!(prompt, Prompt::Image(_)));
        Ok(Self { label: sanitize(stem.unwrap_or(text)), condition: text.to_string(), prompt, reference: None, view: None })
    }

    /// Jobs for dataset shapes: the class prompt, or the first `views`
    /// silhouettes of each shape for image-conditioned models.
    pub fn from_dataset(shapes: &[LoadedShape], modality: Modality, views: usize) -> Vec<Self> {
        let mut jobs = Vec::new();
        for s in shapes {
            let id = &s.entry.id;
            match modality {
                Modality::Class => {
                    let prompt = Prompt::Class { family: s.entry.spec.family, params: s.entry.spec.params.clone() };
                    jobs.push(Self { label: id.clone(), condition: prompt.to_string(), prompt, reference: Some(id.clone()), view: None });
                }
                Modality::Image => {
                    for (k, img) in s.images.iter().take(views.max(1)).enumerate() {
                        jobs.push(Self {
                            label: format!("{id}_v{k}"),
                            condition: s.entry.images[k].clone(),
                            prompt: Prompt::Image(img.clone()),
                            reference: Some(id.clone()),
                            view: Some(k),
                        });
                    }
                }
            }
        }
        jobs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub file: String,
    pub condition: String,
    pub reference: Option<String>,
    pub view: Option<usize>,
    pub seed: u64,
    pub fusion_step: usize,
    pub fusion_ratio: f64,
    pub trace: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplesIndex {
    pub checkpoint: String,
    pub samples: Vec<SampleRecord>,
}

#[derive(Debug, Clone)]
pub struct SampleArgs {
    pub jobs: Vec<SampleJob>,
    pub seeds: usize,
    pub generation: GenerationConfig,
    pub out: PathBuf,
    pub trace: bool,
}

/// Runs `f` over `items` on up to `available_parallelism` threads,
/// keeping input order.
fn parallel_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    if threads <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items.chunks(chunk).map(|part| scope.spawn(|| part.iter().map(&f).collect::<Vec<_>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("sampling thread panicked")).collect()
    })
}

/// Generates every job for seeds `generation.seed .. generation.seed + seeds`
/// and writes one PLY per (job, seed), optional traces, and the index.
pub fn cmd_sample(bundle: &ModelBundle, checkpoint: &Path, args: &SampleArgs) -> CliResult<SamplesIndex> {
    if args.seeds == 0 {
        return Err(CliError::config("--seeds must be positive"));
    }
    if args.jobs.is_empty() {
        return Err(CliError::config("no conditions given"));
    }
    create_dir(&args.out)?;
    let work: Vec<(&SampleJob, u64)> =
        args.jobs.iter().flat_map(|j| (0..args.seeds as u64).map(move |k| (j, args.generation.seed + k))).collect();
    let results = parallel_map(&work, |&(job, seed)| {
        let gen = GenerationConfig { seed, ..args.generation.clone() };
        generate_shape(bundle, &job.prompt, &gen)
    });
    let mut samples = Vec::with_capacity(work.len());
    for ((job, seed), result) in work.into_iter().zip(results) {
        let (shape, trace) = result?;
        let stem = format!("{}_seed{seed}", job.label);
        let file = format!("{stem}.ply");
        write_ply(&shape, &args.out.join(&file))?;
        let trace_file = if args.trace {
            let name = format!("{stem}.trace.jsonl");
            trace.write_jsonl(&args.out.join(&name))?;
            Some(name)
        } else {
            None
        };
        samples.push(SampleRecord {
            file,
            condition: job.condition.clone(),
            reference: job.reference.clone(),
            view: job.view,
            seed,
            fusion_step: args.generation.fusion_step,
            fusion_ratio: args.generation.fusion_ratio,
            trace: trace_file,
        });
    }
    let index = SamplesIndex { checkpoint: checkpoint.display().to_string(), samples };
    write_json(&args.out.join(SAMPLES_INDEX), &index)?;
    Ok(index)
}

/// Loads a checkpoint, checking it against the config when one was given.
pub fn open_checkpoint(path: &Path, cfg: Option<&ExperimentConfig>) -> CliResult<ModelBundle> {
    Ok(match cfg {
        Some(c) => load_bundle_expecting(path, &c.model)?,
        None => load_bundle(path)?,
    })
}

/// Reads a sample directory's index, or pairs `*.ply` files with manifest
/// ids by filename prefix when no index exists.
fn read_samples(dir: &Path, manifest: &DatasetManifest) -> CliResult<Vec<SampleRecord>> {
    let index = dir.join(SAMPLES_INDEX);
    if index.is_file() {
        let text = fs::read_to_string(&index).map_err(|e| io_err(&index, e))?;
        let parsed: SamplesIndex = serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", index.display())))?;
        return Ok(parsed.samples);
    }
    let mut files: Vec<String> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter(|n| n.ends_with(".ply"))
        .collect();
    files.sort();
    Ok(files
        .into_iter()
        .map(|file| {
            let reference = manifest.entries.iter().map(|e| &e.id).filter(|id| file.starts_with(id.as_str())).max_by_key(|id| id.len()).cloned();
            SampleRecord { condition: String::new(), reference, view: None, seed: 0, fusion_step: 0, fusion_ratio: 1.0, trace: None, file }
        })
        .collect())
}

/// Scores one generated cloud against its reference.
pub fn score(generated: &PointCloudShape, reference: &PointCloudShape, metrics: &MetricsConfig) -> CliResult<(f64, f64, f64)> {
    Ok((
        chamfer(generated, reference)?,
        emd_with(generated, reference, &EmdOptions::from(metrics))?,
        f_score(generated, reference, metrics.f_score_tau)?,
    ))
}

/// Scores generated clouds against the reference dataset and writes the
/// report as JSON (`out`) and as a text table next to it.
pub fn cmd_eval(generated: &Path, reference: &Path, out: &Path, metrics: &MetricsConfig) -> CliResult<MetricReport> {
    let manifest = DatasetManifest::load(reference)?;
    let records = read_samples(generated, &manifest)?;
    if records.is_empty() {
        return Err(CliError::config(format!("no generated samples in {}", generated.display())));
    }
    let mut references: BTreeMap<String, PointCloudShape> = BTreeMap::new();
    let mut samples = Vec::new();
    let mut clouds = Vec::new();
    let mut groups: BTreeMap<(String, u64), Vec<(usize, PointCloudShape)>> = BTreeMap::new();
    for rec in &records {
        let cloud = read_ply(&generated.join(&rec.file))?;
        let Some(ref_id) = &rec.reference else {
            log::warn!("{} has no reference shape; skipped", rec.file);
            continue;
        };
        if !references.contains_key(ref_id) {
            let entry = manifest.entry(ref_id).ok_or_else(|| CliError::config(format!("{}: unknown reference `{ref_id}`", rec.file)))?;
            references.insert(ref_id.clone(), read_ply(&manifest.resolve(&entry.shape))?);
        }
        let (cd, emd, fs) = score(&cloud, &references[ref_id], metrics)?;
        samples.push(SampleMetrics { id: rec.file.trim_end_matches(".ply").to_string(), reference: ref_id.clone(), chamfer: cd, emd, f_score: fs });
        if let Some(view) = rec.view {
            groups.entry((ref_id.clone(), rec.seed)).or_default().push((view, cloud.clone()));
        }
        clouds.push(cloud);
    }
    let emd_opts = EmdOptions::from(metrics);
    let mut cross = Vec::new();
    for ((shape, seed), mut views) in groups {
        views.sort_by_key(|(v, _)| *v);
        views.dedup_by_key(|(v, _)| *v);
        if views.len() >= 2 {
            let shapes: Vec<PointCloudShape> = views.into_iter().map(|(_, c)| c).collect();
            let metrics_cv = cross_view_consistency(&shapes, metrics.f_score_tau, &emd_opts)?;
            cross.push(CrossViewEntry { shape: format!("{shape}_seed{seed}"), views: shapes.len(), metrics: metrics_cv });
        }
    }
    let reference_clouds: Vec<PointCloudShape> = references.into_values().collect();
    let fid = if clouds.len() >= 2 && reference_clouds.len() >= 2 {
        let map = FeatureMap::new(metrics.fid_features, metrics.fid_seed);
        Some(FidEntry { value: toy_fid(&clouds, &reference_clouds, &map)?, features: map.dim(), checksum: map.checksum() })
    } else {
        None
    };
    let report = MetricReport::new(metrics.f_score_tau, samples, cross, fid);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_json(out, &report)?;
    let table = out.with_extension("txt");
    fs::write(&table, report.to_table()).map_err(|e| io_err(&table, e))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub fusion_step: usize,
    pub fusion_ratio: f64,
    pub chamfer: f64,
    pub emd: f64,
    pub f_score: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    /// Fusion-step sweep at the configured ratio.
    pub steps: Vec<AblationRow>,
    /// Fusion-ratio sweep at the configured step.
    pub ratios: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let section = |title: &str, header: &str, rows: &[AblationRow]| {
            let mut s = format!("### {title}\n\n| {header} | CD | EMD | F-score |\n|---|---|---|---|\n");
            for r in rows {
                s.push_str(&format!("| {} | {:.6} | {:.6} | {:.4} |\n", r.label, r.chamfer, r.emd, r.f_score));
            }
            s
        };
        format!(
            "{}\n{}",
            section("Fusion steps", "Fusion step", &self.steps),
            section("Fusion ratios", "Fusion ratio", &self.ratios)
        )
    }
}

#[derive(Debug, Clone)]
pub struct AblateArgs {
    pub jobs: Vec<SampleJob>,
    pub references: BTreeMap<String, PointCloudShape>,
    pub steps: Vec<usize>,
    pub ratios: Vec<f64>,
    pub seeds: usize,
    pub generation: GenerationConfig,
    pub metrics: MetricsConfig,
    pub out: PathBuf,
}

fn ablation_cell(bundle: &ModelBundle, args: &AblateArgs, fusion_step: usize, fusion_ratio: f64, label: String) -> CliResult<AblationRow> {
    let work: Vec<(&SampleJob, u64)> =
        args.jobs.iter().flat_map(|j| (0..args.seeds as u64).map(move |k| (j, args.generation.seed + k))).collect();
    let results = parallel_map(&work, |&(job, seed)| -> CliResult<(f64, f64, f64)> {
        let gen = GenerationConfig { seed, fusion_step, fusion_ratio, ..args.generation.clone() };
        let (shape, _) = generate_shape(bundle, &job.prompt, &gen)?;
        let reference = job.reference.as_ref().and_then(|r| args.references.get(r)).ok_or_else(|| CliError::config("ablation job without reference"))?;
        score(&shape, reference, &args.metrics)
    });
    let (mut cd, mut emd, mut fs) = (0.0, 0.0, 0.0);
    for r in &results {
        let (a, b, c) = r.as_ref().map_err(|e| CliError { code: e.code, message: e.message.clone() })?;
        cd += a;
        emd += b;
        fs += c;
    }
    let n = results.len() as f64;
    Ok(AblationRow { label, fusion_step, fusion_ratio, chamfer: cd / n, emd: emd / n, f_score: fs / n, samples: results.len() })
}

/// Sweeps fusion steps (at the configured ratio) and fusion ratios (at the
/// configured step) over the same jobs and seeds, writing
/// `ablation.json` and `ablation.md` under `out`.
pub fn cmd_ablate(bundle: &ModelBundle, args: &AblateArgs) -> CliResult<AblationTable> {
    if args.seeds == 0 || args.jobs.is_empty() {
        return Err(CliError::config("ablation needs at least one shape and one seed"));
    }
    for &r in &args.ratios {
        if !(0.0..=1.0).contains(&r) {
            return Err(CliError::config(format!("fusion ratio {r} is outside [0, 1]")));
        }
    }
    let gen = &args.generation;
    let steps = args
        .steps
        .iter()
        .map(|&s| ablation_cell(bundle, args, s, gen.fusion_ratio, format!("≤{s}")))
        .collect::<CliResult<Vec<_>>>()?;
    let ratios = args
        .ratios
        .iter()
        .map(|&r| ablation_cell(bundle, args, gen.fusion_step, r, format!("{r}")))
        .collect::<CliResult<Vec<_>>>()?;
    let table = AblationTable { steps, ratios };
    create_dir(&args.out)?;
    write_json(&args.out.join("ablation.json"), &table)?;
    let md = args.out.join("ablation.md");
    fs::write(&md, table.to_markdown()).map_err(|e| io_err(&md, e))?;
    Ok(table)
}

/// Dataset shapes of `split` (all when `None`), at most `limit` of them.
pub fn dataset_shapes(data: &Path, split: Option<Split>, limit: Option<usize>) -> CliResult<Vec<LoadedShape>> {
    let manifest = DatasetManifest::load(data)?;
    let mut shapes = manifest.load_split(split)?;
    if let Some(n) = limit {
        shapes.truncate(n);
    }
    if shapes.is_empty() {
        return Err(CliError::config(format!("no shapes selected from {}", data.display())));
    }
    Ok(shapes)
}
