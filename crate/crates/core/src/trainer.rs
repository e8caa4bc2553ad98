//! Training loops for the backbone (condition path, MAE and denoiser,
//! jointly) and for the reconstruction adapter (separately).

use std::path::PathBuf;

use ltm3d_autograd::{clip_global_norm, AdamW, AdamWConfig, Gradients, Matrix, ParamStore, Tape, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::backbone::{sample_mask_plan_in, MaskPlan};
use crate::checkpoint::{save_bundle, Model, ModelBundle, StageState};
use crate::condition::Prompt;
use crate::config::{DenoiseConfig, LrDecay, Modality, ModelConfig, ScheduleKind, TrainConfig};
use crate::data::{LoadedShape, ShapeFamily, SilhouetteImage};
use crate::diffusion::{build_schedule, diffusion_loss, token_ddpm_sample, DenoiseNet, DiffusionSchedule, SampleOptions};
use crate::error::{Error, Result};
use crate::nn::build_params;
use crate::recon::{is_recon_trainable, recon_loss_var, RECON_ENCODER_PREFIX, RECON_PREFIX};
use crate::tokenizer::tokenize;

pub const BACKBONE_STAGE: &str = "backbone";
pub const RECON_STAGE: &str = "recon";

const COND_ENCODER_PREFIX: &str = "cond/enc/";

/// A dataset shape prepared for training: its tokens and prompt sources.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub id: String,
    pub family: ShapeFamily,
    pub params: Vec<f64>,
    pub tokens: Matrix,
    pub images: Vec<SilhouetteImage>,
}

impl TrainingExample {
    pub fn class_prompt(&self) -> Prompt {
        Prompt::Class { family: self.family, params: self.params.clone() }
    }

    /// The class prompt, or a uniformly chosen silhouette view.
    pub fn prompt<R: Rng + ?Sized>(&self, modality: Modality, rng: &mut R) -> Result<Prompt> {
        match modality {
            Modality::Class => Ok(self.class_prompt()),
            Modality::Image => {
                if self.images.is_empty() {
                    return Err(Error::Dataset(format!("shape {} has no silhouettes", self.id)));
                }
                Ok(Prompt::Image(self.images[rng.random_range(0..self.images.len())].clone()))
            }
        }
    }
}

/// Tokenizes loaded shapes for `config`.
pub fn training_set(shapes: &[LoadedShape], config: &ModelConfig) -> Result<Vec<TrainingExample>> {
    if shapes.is_empty() {
        return Err(Error::Dataset("no training shapes".into()));
    }
    shapes
        .iter()
        .map(|s| {
            if s.cloud.len() != config.n_points {
                return Err(Error::Dataset(format!("shape {} has {} points, model expects {}", s.entry.id, s.cloud.len(), config.n_points)));
            }
            Ok(TrainingExample {
                id: s.entry.id.clone(),
                family: s.entry.spec.family,
                params: s.entry.spec.params.clone(),
                tokens: tokenize(&s.cloud, &config.tokenizer)?.tokens,
                images: s.images.clone(),
            })
        })
        .collect()
}

/// Where a training run writes periodic checkpoints and failure dumps.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub checkpoint: Option<PathBuf>,
    pub dump_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean loss of every optimizer step taken by this call.
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

/// An independent random stream per (seed, stage, epoch).
pub fn epoch_rng(seed: u64, stage: &str, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tag = stage.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    rng.set_stream(tag.wrapping_mul(1 << 32).wrapping_add(epoch as u64));
    rng
}

/// Optimizer steps in a full run of `cfg.epochs` over `examples` shapes.
pub fn total_steps(cfg: &TrainConfig, examples: usize) -> u64 {
    (cfg.epochs * examples.div_ceil(cfg.batch_size)) as u64
}

/// Linear warmup to the configured rate, then constant or cosine decay
/// reaching zero at step `total`.
pub fn learning_rate(cfg: &TrainConfig, step: u64, total: u64) -> f64 {
    let warm = if cfg.warmup_steps == 0 { 1.0 } else { ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0) };
    let decay = match cfg.lr_decay {
        LrDecay::Constant => 1.0,
        LrDecay::Cosine => {
            let span = total.saturating_sub(cfg.warmup_steps as u64).max(1) as f64;
            let progress = (step.saturating_sub(cfg.warmup_steps as u64) as f64 / span).min(1.0);
            0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    };
    cfg.lr * warm * decay
}

fn optimizer_config(cfg: &TrainConfig) -> AdamWConfig {
    AdamWConfig { lr: cfg.lr, beta1: cfg.beta1, beta2: cfg.beta2, eps: 1e-8, weight_decay: cfg.weight_decay }
}

/// One sample's draws: the prompt actually fed and the mask plan.
#[derive(Debug, Clone, Serialize)]
pub struct SampleDraw {
    pub shape: String,
    pub prompt: String,
    pub mask_ratio: f64,
    pub masked: Vec<usize>,
}

/// Diffusion loss of one example with its draws taken from `rng`.
fn backbone_sample_loss<'t, 'p, R: Rng + ?Sized>(
    model: &Model,
    tape: &'t Tape<'p>,
    schedule: &DiffusionSchedule,
    example: &TrainingExample,
    modality: Modality,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(Var<'t, 'p>, SampleDraw)> {
    let dropped = rng.random::<f64>() < cfg.cond_dropout;
    let prompt = if dropped { Prompt::Null } else { example.prompt(modality, rng)? };
    let n = example.tokens.nrows();
    let plan: MaskPlan = sample_mask_plan_in(n, cfg.mask_ratio_min, cfg.mask_ratio_max, rng)?;
    let prefix = model.condition.prefix_tokens(tape, &prompt)?;
    let z = model.mae.forward(prefix, tape.constant(example.tokens.clone()), &plan)?;
    let masked = plan.masked_slots();
    let repeat: Vec<usize> = (0..cfg.diffusion_batch_mul).flat_map(|_| 0..masked.len()).collect();
    let slots: Vec<usize> = repeat.iter().map(|&r| masked[r]).collect();
    let x0 = example.tokens.select(ndarray::Axis(0), &slots);
    let loss = diffusion_loss(&model.denoise, &x0, z.select_rows(&repeat), schedule, rng)?;
    let draw = SampleDraw { shape: example.id.clone(), prompt: prompt.to_string(), mask_ratio: plan.ratio, masked };
    Ok((loss, draw))
}

/// Mean loss and gradients of one backbone batch. Reconstruction
/// parameters are never touched.
pub fn backbone_batch_gradients<R: Rng + ?Sized>(
    bundle: &ModelBundle,
    batch: &[&TrainingExample],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(f64, Gradients, Vec<SampleDraw>)> {
    let mut grads = Gradients::new();
    let mut total = 0.0;
    let mut draws = Vec::with_capacity(batch.len());
    for example in batch {
        let tape = Tape::with_trainable(&bundle.params, |name| !name.starts_with(RECON_PREFIX));
        let (loss, draw) =
            backbone_sample_loss(&bundle.model, &tape, &bundle.schedule, example, bundle.config.condition.modality, cfg, rng)?;
        total += loss.scalar();
        draws.push(draw);
        grads.accumulate(tape.backward(loss));
    }
    let scale = 1.0 / batch.len() as f64;
    grads.scale(scale);
    Ok((total * scale, grads, draws))
}

/// Mean loss and gradients of one reconstruction batch.
pub fn recon_batch_gradients<R: Rng + ?Sized>(
    bundle: &ModelBundle,
    batch: &[&TrainingExample],
    rng: &mut R,
) -> Result<(f64, Gradients, Vec<SampleDraw>)> {
    let mut grads = Gradients::new();
    let mut total = 0.0;
    let mut draws = Vec::with_capacity(batch.len());
    for example in batch {
        let tape = Tape::with_trainable(&bundle.params, is_recon_trainable);
        let prompt = example.prompt(bundle.config.condition.modality, rng)?;
        let estimate = bundle.model.recon.reconstruct_prompt(&tape, &prompt)?;
        let loss = recon_loss_var(estimate, &example.tokens);
        total += loss.scalar();
        draws.push(SampleDraw { shape: example.id.clone(), prompt: prompt.to_string(), mask_ratio: 0.0, masked: Vec::new() });
        grads.accumulate(tape.backward(loss));
    }
    let scale = 1.0 / batch.len() as f64;
    grads.scale(scale);
    Ok((total * scale, grads, draws))
}

#[derive(Serialize)]
struct FailureDump<'a> {
    stage: &'a str,
    epoch: usize,
    step: u64,
    loss: f64,
    gradients_finite: bool,
    batch: &'a [SampleDraw],
}

fn numerical_failure(stage: &str, epoch: usize, step: u64, loss: f64, grads_ok: bool, draws: &[SampleDraw], opts: &TrainOptions) -> Error {
    let dump = FailureDump { stage, epoch, step, loss, gradients_finite: grads_ok, batch: draws };
    let mut msg = format!(
        "{stage} training diverged at epoch {epoch}, step {step}: loss {loss}, gradients {}; batch {}",
        if grads_ok { "finite" } else { "non-finite" },
        draws.iter().map(|d| format!("{} [{}, mask {:.3}]", d.shape, d.prompt, d.mask_ratio)).collect::<Vec<_>>().join(", ")
    );
    if let Some(dir) = &opts.dump_dir {
        let path = dir.join(format!("{stage}_failure_step{step}.json"));
        let written = std::fs::create_dir_all(dir).ok().and_then(|_| serde_json::to_string_pretty(&dump).ok()).and_then(|s| std::fs::write(&path, s).ok());
        if written.is_some() {
            msg.push_str(&format!("; details in {}", path.display()));
        }
    }
    Error::Numerical(msg)
}

fn update_ema(bundle: &mut ModelBundle, decay: f64, keep: impl Fn(&str) -> bool) {
    let ema = bundle.ema.get_or_insert_with(Default::default);
    for (_, name, value) in bundle.params.iter().filter(|(_, name, _)| keep(name)) {
        match ema.get_mut(name) {
            Some(avg) => avg.zip_mut_with(value, |a, &v| *a = decay * *a + (1.0 - decay) * v),
            None => {
                ema.insert(name.to_string(), value.clone());
            }
        }
    }
}

type BatchFn<'a> = dyn Fn(&ModelBundle, &[&TrainingExample], &mut ChaCha8Rng) -> Result<(f64, Gradients, Vec<SampleDraw>)> + 'a;

/// Shared epoch loop: shuffles, steps the stage's optimizer, tracks state,
/// and checkpoints. Runs until the stage has completed `cfg.epochs`.
fn run_stage(
    bundle: &mut ModelBundle,
    examples: &[TrainingExample],
    cfg: &TrainConfig,
    stage: &str,
    batch_fn: &BatchFn<'_>,
    keep: &dyn Fn(&str) -> bool,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Dataset("no training shapes".into()));
    }
    let mut opt = bundle.optimizers.remove(stage).unwrap_or_else(|| AdamW::new(optimizer_config(cfg)));
    opt.config = optimizer_config(cfg);
    let mut report = TrainReport::default();
    let start = stage_state(bundle, stage).epochs;
    let total = total_steps(cfg, examples.len());
    let result = (|| {
        for epoch in start..cfg.epochs {
            let mut rng = epoch_rng(cfg.seed, stage, epoch);
            let mut order: Vec<usize> = (0..examples.len()).collect();
            order.shuffle(&mut rng);
            let mut epoch_total = 0.0;
            let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
            for chunk in &batches {
                let batch: Vec<&TrainingExample> = chunk.iter().map(|&i| &examples[i]).collect();
                let (loss, mut grads, draws) = batch_fn(bundle, &batch, &mut rng)?;
                let step = stage_state(bundle, stage).step;
                let grads_ok = grads.all_finite();
                if !loss.is_finite() || !grads_ok {
                    return Err(numerical_failure(stage, epoch, step, loss, grads_ok, &draws, opts));
                }
                if cfg.grad_clip > 0.0 {
                    clip_global_norm(&mut grads, cfg.grad_clip);
                }
                opt.step_with_lr(&mut bundle.params, &grads, learning_rate(cfg, step, total));
                if let Some(decay) = cfg.ema_decay {
                    update_ema(bundle, decay, keep);
                }
                stage_state_mut(bundle, stage).step += 1;
                report.step_losses.push(loss);
                epoch_total += loss;
            }
            let mean = epoch_total / batches.len() as f64;
            let state = stage_state_mut(bundle, stage);
            state.epochs = epoch + 1;
            state.epoch_losses.push(mean);
            state.trained = true;
            report.epoch_losses.push(mean);
            log::info!("{stage} epoch {}/{}: loss {mean:.6}", epoch + 1, cfg.epochs);
            let due = cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0;
            if let (true, Some(path)) = (due, &opts.checkpoint) {
                bundle.optimizers.insert(stage.to_string(), opt.clone());
                save_bundle(bundle, path)?;
            }
        }
        Ok(())
    })();
    bundle.optimizers.insert(stage.to_string(), opt);
    result.map(|()| report)
}

fn stage_state<'a>(bundle: &'a ModelBundle, stage: &str) -> &'a StageState {
    if stage == RECON_STAGE { &bundle.state.recon } else { &bundle.state.backbone }
}

fn stage_state_mut<'a>(bundle: &'a mut ModelBundle, stage: &str) -> &'a mut StageState {
    if stage == RECON_STAGE { &mut bundle.state.recon } else { &mut bundle.state.backbone }
}

/// Trains the condition path, MAE and denoiser jointly on the diffusion
/// loss. Continues from the bundle's recorded epoch count.
pub fn train_backbone(bundle: &mut ModelBundle, examples: &[TrainingExample], cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainReport> {
    let batch_fn = |b: &ModelBundle, batch: &[&TrainingExample], rng: &mut ChaCha8Rng| backbone_batch_gradients(b, batch, cfg, rng);
    run_stage(bundle, examples, cfg, BACKBONE_STAGE, &batch_fn, &|name: &str| !name.starts_with(RECON_PREFIX), opts)
}

/// Gives the reconstruction adapter its frozen encoder: a copy of the
/// trained condition encoder when there is one. Runs once per bundle.
pub fn prepare_recon_encoder(bundle: &mut ModelBundle) -> Result<()> {
    if bundle.state.recon_encoder_source.is_some() {
        return Ok(());
    }
    let source = if bundle.state.backbone.trained {
        let names: Vec<String> = bundle.params.iter().filter_map(|(_, n, _)| n.strip_prefix(COND_ENCODER_PREFIX).map(str::to_string)).collect();
        for suffix in names {
            let value = bundle.params.by_name(&format!("{COND_ENCODER_PREFIX}{suffix}")).expect("listed above").clone();
            let target = format!("{RECON_ENCODER_PREFIX}{suffix}");
            let id = bundle.params.id(&target).ok_or_else(|| Error::Checkpoint(format!("missing {target}")))?;
            *bundle.params.get_mut(id) = value;
        }
        "backbone"
    } else {
        "init"
    };
    bundle.state.recon_encoder_source = Some(source.to_string());
    Ok(())
}

/// Trains only the reconstruction adapter on the token MSE.
pub fn train_recon(bundle: &mut ModelBundle, examples: &[TrainingExample], cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainReport> {
    prepare_recon_encoder(bundle)?;
    let batch_fn = |b: &ModelBundle, batch: &[&TrainingExample], rng: &mut ChaCha8Rng| recon_batch_gradients(b, batch, rng);
    run_stage(bundle, examples, cfg, RECON_STAGE, &batch_fn, &is_recon_trainable, opts)
}

/// Convenience: a fresh bundle trained on `shapes` for `cfg.epochs`.
pub fn train_new_backbone(config: &ModelConfig, shapes: &[LoadedShape], cfg: &TrainConfig, opts: &TrainOptions) -> Result<(ModelBundle, TrainReport)> {
    let examples = training_set(shapes, config)?;
    let mut bundle = ModelBundle::new(config)?;
    let report = train_backbone(&mut bundle, &examples, cfg, opts)?;
    Ok((bundle, report))
}

/// Settings of the one-dimensional two-Gaussian denoiser experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub denoise: DenoiseConfig,
    pub schedule_steps: usize,
    pub z_dim: usize,
    pub means: [f64; 2],
    pub std: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 256,
            lr: 3e-4,
            denoise: DenoiseConfig { width: 32, depth: 2, time_features: 16 },
            schedule_steps: 100,
            z_dim: 4,
            means: [-0.5, 0.5],
            std: 0.1,
            seed: 0,
        }
    }
}

impl ToyConfig {
    /// Standard deviation of the equal-weight mixture.
    pub fn population_std(&self) -> f64 {
        let spread = 0.5 * (self.means[1] - self.means[0]);
        (spread * spread + self.std * self.std).sqrt()
    }

    pub fn population_mean(&self) -> f64 {
        0.5 * (self.means[0] + self.means[1])
    }

    pub fn draw<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> Matrix {
        Matrix::from_shape_fn((rows, 1), |_| {
            let mean = self.means[rng.random_range(0..2)];
            let e: f64 = StandardNormal.sample(rng);
            mean + self.std * e
        })
    }
}

/// A denoiser trained on the toy distribution with a fixed condition.
#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    pub config: ToyConfig,
    pub store: ParamStore,
    pub net: DenoiseNet,
    pub schedule: DiffusionSchedule,
    pub z: Matrix,
    pub losses: Vec<f64>,
}

pub fn train_toy_denoiser(config: &ToyConfig) -> Result<ToyDenoiser> {
    let mut store = ParamStore::new();
    let net = build_params(&mut store, config.seed, |b| DenoiseNet::new(b, &config.denoise, 1, config.z_dim))?;
    let schedule = build_schedule(config.schedule_steps, ScheduleKind::Cosine)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let z = Matrix::from_shape_fn((1, config.z_dim), |_| StandardNormal.sample(&mut rng));
    let z_batch = z.broadcast((config.batch, config.z_dim)).expect("one row broadcasts").to_owned();
    let mut opt = AdamW::new(AdamWConfig { lr: config.lr, ..AdamWConfig::default() });
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let x0 = config.draw(config.batch, &mut rng);
        let grads = {
            let tape = Tape::new(&store);
            let loss = diffusion_loss(&net, &x0, tape.constant(z_batch.clone()), &schedule, &mut rng)?;
            let value = loss.scalar();
            if !value.is_finite() {
                return Err(Error::Numerical(format!("toy denoiser loss {value} at step {step}")));
            }
            losses.push(value);
            tape.backward(loss)
        };
        opt.step(&mut store, &grads);
    }
    Ok(ToyDenoiser { config: config.clone(), store, net, schedule, z, losses })
}

impl ToyDenoiser {
    pub fn sample(&self, count: usize, opts: &SampleOptions, seed: u64) -> Result<Vec<f64>> {
        let z = self.z.broadcast((count, self.z.ncols())).expect("one row broadcasts").to_owned();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = token_ddpm_sample(&self.net, &self.store, &z, None, 1, &self.schedule, opts, &mut rng)?;
        Ok(x.column(0).to_vec())
    }
}

/// Means of consecutive, non-overlapping windows.
pub fn window_means(values: &[f64], window: usize) -> Vec<f64> {
    values.chunks_exact(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}
