//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 6 to 8 train desk-preset models and dominate the runtime.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ltm3d_cli::{cmd_ablate, AblateArgs, SampleJob};
use ltm3d_autograd::check::check_params;
use ltm3d_autograd::{Init, Matrix, Tape};
use ltm3d_core::backbone::{mae_forward, sample_mask_plan};
use ltm3d_core::checkpoint::ModelBundle;
use ltm3d_core::condition::Prompt;
use ltm3d_core::config::{
    ConditionConfig, DenoiseConfig, ExperimentConfig, GenerationConfig, MaeConfig, Modality, ModelConfig, ReconConfig, ScheduleConfig,
    TrainConfig,
};
use ltm3d_core::data::{build_dataset, LoadedShape, PointCloudShape, ShapeFamily};
use ltm3d_core::diffusion::{diffusion_loss, SampleOptions};
use ltm3d_core::metrics::{chamfer, emd_exact, f_score};
use ltm3d_core::recon::recon_loss_var;
use ltm3d_core::sampler::{blend_tokens, generate_shape, mar_generate, BlendSchedule};
use ltm3d_core::tokenizer::TokenizerConfig;
use ltm3d_core::trainer::{train_backbone, train_recon, train_toy_denoiser, training_set, ToyConfig, TrainOptions, TrainingExample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

fn minutes(d: Duration) -> f64 {
    d.as_secs_f64() / 60.0
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    Init::Normal(1.0).build(rows, cols, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn load_shapes(cfg: &ExperimentConfig) -> Result<(tempfile::TempDir, Vec<LoadedShape>), String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let shapes = build_dataset(&cfg.dataset, dir.path()).and_then(|m| m.load_split(None)).map_err(err)?;
    Ok((dir, shapes))
}

fn mean_inter_shape_chamfer(shapes: &[LoadedShape]) -> Result<f64, String> {
    let mut all = Vec::new();
    for (i, a) in shapes.iter().enumerate() {
        for b in &shapes[i + 1..] {
            all.push(chamfer(&a.cloud, &b.cloud).map_err(err)?);
        }
    }
    Ok(mean(&all))
}

fn train_both_stages(bundle: &mut ModelBundle, examples: &[TrainingExample], cfg: &ExperimentConfig) -> Result<(), String> {
    train_backbone(bundle, examples, &cfg.train, &TrainOptions::default()).map_err(err)?;
    train_recon(bundle, examples, &cfg.train_recon, &TrainOptions::default()).map_err(err)?;
    Ok(())
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let config = ModelConfig {
        n_points: 24,
        tokenizer: TokenizerConfig { group_size: 4 },
        condition: ConditionConfig { modality: Modality::Image, dim: 16, resolution: 8, patch_size: 4, prefix_tokens: 3, heads: 2, positional: true },
        mae: MaeConfig { width: 32, depth: 1, heads: 4, mlp_ratio: 2 },
        denoise: DenoiseConfig { width: 32, depth: 2, time_features: 8 },
        schedule: ScheduleConfig { steps: 50, ..ScheduleConfig::default() },
        recon: ReconConfig { dim: 16, depth: 1, heads: 2, mlp_ratio: 2 },
        init_seed: 3,
    };
    let mut bundle = ModelBundle::new(&config).map_err(err)?;
    // Zero-initialised gates would hide most paths from the check.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for id in bundle.params.ids().collect::<Vec<_>>() {
        let (r, c) = bundle.params.get(id).dim();
        *bundle.params.get_mut(id) = Init::Normal(0.3).build(r, c, &mut rng);
    }
    let tokens = random_matrix(config.token_count(), config.token_dim(), 1).mapv(|v| v * 0.5);
    let image = ltm3d_core::data::SilhouetteImage::blank(8, ltm3d_core::data::View::new(0.3, 0.2));
    let mut image = image;
    for r in 2..6 {
        for c in 1..7 {
            image.set(r, c, 1.0);
        }
    }
    let prompt = Prompt::Image(image);
    let plan = sample_mask_plan(config.token_count(), &mut ChaCha8Rng::seed_from_u64(2)).map_err(err)?;
    let model = &bundle.model;
    let ids: Vec<_> = bundle.params.ids().collect();
    let backbone = check_params(&bundle.params, &ids, |t: &Tape<'_>| {
        let prefix = model.condition.prefix_tokens(t, &prompt).unwrap();
        let z = model.mae.forward(prefix, t.constant(tokens.clone()), &plan).unwrap();
        let x0 = tokens.select(ndarray::Axis(0), &plan.masked_slots());
        let backbone = diffusion_loss(&model.denoise, &x0, z, &bundle.schedule, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let recon = recon_loss_var(model.recon.reconstruct_prompt(t, &prompt).unwrap(), &tokens);
        backbone.add(recon)
    });
    let worst = backbone.worst().cloned().unwrap_or_default();
    let elapsed = start.elapsed();
    check(
        backbone.max_error() < 1e-3 && elapsed < Duration::from_secs(120),
        format!("{} tensors, worst relative error {:.2e} ({}), {:.1} s", backbone.errors.len(), worst.1, worst.0, elapsed.as_secs_f64()),
    )
}

fn two_gaussian_toy() -> Outcome {
    let start = Instant::now();
    let cfg = ToyConfig::default();
    let toy = train_toy_denoiser(&cfg).map_err(err)?;
    let samples = toy.sample(4000, &SampleOptions::default(), 1).map_err(err)?;
    let elapsed = start.elapsed();
    let (m, s, target) = (mean(&samples), std_dev(&samples), cfg.population_std());
    check(
        m.abs() <= 0.05 && (s - target).abs() <= 0.1 * target && cfg.steps <= 5000 && elapsed < Duration::from_secs(300),
        format!("{} steps, sample mean {m:.4}, std {s:.4} (population {target:.4}), {:.1} s", cfg.steps, elapsed.as_secs_f64()),
    )
}

fn masking_invariance() -> Outcome {
    let config = ModelConfig {
        n_points: 64,
        tokenizer: TokenizerConfig { group_size: 4 },
        mae: MaeConfig { width: 32, depth: 2, heads: 4, mlp_ratio: 2 },
        ..ModelConfig::default()
    };
    let mut bundle = ModelBundle::new(&config).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for id in bundle.params.ids().collect::<Vec<_>>() {
        let (r, c) = bundle.params.get(id).dim();
        *bundle.params.get_mut(id) = Init::Normal(0.2).build(r, c, &mut rng);
    }
    let n = config.token_count();
    let prefix = random_matrix(config.condition.prefix_tokens, config.mae.width, 3);
    let mut violations = 0;
    for trial in 0..100u64 {
        let plan = sample_mask_plan(n, &mut rng).map_err(err)?;
        let tokens = random_matrix(n, config.token_dim(), 100 + trial);
        let mut scrambled = tokens.clone();
        for slot in plan.masked_slots() {
            let junk: f64 = rng.random_range(-1e6..1e6);
            scrambled.row_mut(slot).fill(junk);
        }
        let a = mae_forward(&bundle.model.mae, &bundle.params, &tokens, &prefix, &plan).map_err(err)?;
        let b = mae_forward(&bundle.model.mae, &bundle.params, &scrambled, &prefix, &plan).map_err(err)?;
        if a != b {
            violations += 1;
        }
    }
    check(violations == 0, format!("{violations} of 100 plans changed when masked inputs were overwritten"))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Uniform points in `[-1, 1]³` with x confined to `x_range`.
fn cloud(rng: &mut ChaCha8Rng, n: usize, x_range: std::ops::Range<f64>) -> PointCloudShape {
    let points = (0..n).map(|_| [rng.random_range(x_range.clone()), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    PointCloudShape::new(points).unwrap()
}

fn metric_oracles() -> Outcome {
    let dist = |p: &[f64; 3], q: &[f64; 3]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
    let sq = |p: &[f64; 3], q: &[f64; 3]| dist(p, q).powi(2);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut emd_gap, mut cd_gap) = (0.0f64, 0.0f64);
    for trial in 0..30 {
        let n = 1 + trial % 6;
        let (a, b) = (cloud(&mut rng, n, -1.0..1.0), cloud(&mut rng, n, -1.0..1.0));
        let brute_emd = permutations(n)
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| dist(&a.points[i], &b.points[j])).sum::<f64>() / n as f64)
            .fold(f64::INFINITY, f64::min);
        emd_gap = emd_gap.max((emd_exact(&a, &b) - brute_emd).abs());

        let m = 1 + trial % 9;
        let c = cloud(&mut rng, m, -1.0..1.0);
        let nearest = |from: &PointCloudShape, to: &PointCloudShape| {
            from.points.iter().map(|p| to.points.iter().map(|q| sq(p, q)).fold(f64::INFINITY, f64::min)).sum::<f64>() / from.len() as f64
        };
        let brute_cd = nearest(&a, &c) + nearest(&c, &a);
        cd_gap = cd_gap.max((chamfer(&a, &c).map_err(err)? - brute_cd).abs());
    }
    let same = cloud(&mut rng, 50, -1.0..-0.5);
    let far = cloud(&mut rng, 50, 0.5..1.0);
    let f_same = f_score(&same, &same, 0.01).map_err(err)?;
    let f_far = f_score(&same, &far, 0.01).map_err(err)?;
    check(
        emd_gap <= 1e-9 && cd_gap <= 1e-12 && f_same == 1.0 && f_far == 0.0,
        format!("EMD gap {emd_gap:.1e}, Chamfer gap {cd_gap:.1e}, F identical {f_same}, F separated {f_far}"),
    )
}

fn blend_endpoints() -> Outcome {
    let (recon, sampled) = (random_matrix(10, 12, 1), random_matrix(10, 12, 2));
    let filled: Vec<bool> = (0..10).map(|j| j % 3 != 0).collect();
    let order: Vec<usize> = (0..10).map(|j| if filled[j] { 10 - j } else { 0 }).collect();
    let ones = blend_tokens(&recon, &sampled, &filled, &order, &BlendSchedule::new(20, 1.0).map_err(err)?).map_err(err)?;
    let zeros = blend_tokens(&recon, &sampled, &filled, &order, &BlendSchedule::new(20, 0.0).map_err(err)?).map_err(err)?;
    let mut exact = true;
    for j in 0..10 {
        exact &= ones.row(j) == if filled[j] { sampled.row(j) } else { recon.row(j) };
        exact &= zeros.row(j) == recon.row(j);
    }

    let config = ModelConfig {
        n_points: 32,
        tokenizer: TokenizerConfig { group_size: 4 },
        mae: MaeConfig { width: 16, depth: 1, heads: 2, mlp_ratio: 2 },
        denoise: DenoiseConfig { width: 16, depth: 1, time_features: 8 },
        recon: ReconConfig { dim: 8, depth: 1, heads: 2, mlp_ratio: 2 },
        ..ModelConfig::default()
    };
    let mut bundle = ModelBundle::new(&config).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for id in bundle.params.ids().collect::<Vec<_>>() {
        let (r, c) = bundle.params.get(id).dim();
        *bundle.params.get_mut(id) = Init::Normal(0.3).build(r, c, &mut rng);
    }
    bundle.state.recon.trained = true;
    let prompt = Prompt::Class { family: ShapeFamily::Cone, params: vec![0.6, 1.0] };
    let mut preserved = true;
    for fusion_step in [0, 3, 8] {
        let gen = GenerationConfig { total_steps: 4, diffusion_steps: 5, fusion_step, fusion_ratio: 0.3, ..GenerationConfig::default() };
        let (tokens, trace) = mar_generate(&bundle, &prompt, &gen).map_err(err)?;
        for step in &trace.steps {
            for (slot, row) in step.positions.iter().zip(&step.sampled) {
                preserved &= tokens.tokens.row(*slot).to_vec() == *row;
            }
        }
    }
    check(exact && preserved, format!("endpoints bit-exact: {exact}, outputs equal raw samples: {preserved}"))
}

/// Mean Chamfer distance of generations to their targets, one per seed,
/// cycling through the shapes.
fn seeded_chamfer(bundle: &ModelBundle, shapes: &[LoadedShape], examples: &[TrainingExample], gen: &GenerationConfig, seeds: u64) -> Result<Vec<f64>, String> {
    (0..seeds)
        .map(|seed| {
            let k = seed as usize % shapes.len();
            let g = GenerationConfig { seed, ..gen.clone() };
            let (shape, _) = generate_shape(bundle, &examples[k].class_prompt(), &g).map_err(err)?;
            chamfer(&shape, &shapes[k].cloud).map_err(err)
        })
        .collect()
}

struct DeskRun {
    bundle: ModelBundle,
    shapes: Vec<LoadedShape>,
    examples: Vec<TrainingExample>,
    inter: f64,
    fused: Vec<f64>,
    plain: Vec<f64>,
    elapsed: Duration,
    _dir: tempfile::TempDir,
}

fn desk_run() -> Result<DeskRun, String> {
    let start = Instant::now();
    let cfg = ExperimentConfig::default();
    let (dir, shapes) = load_shapes(&cfg)?;
    let examples = training_set(&shapes, &cfg.model).map_err(err)?;
    let mut bundle = ModelBundle::new(&cfg.model).map_err(err)?;
    train_both_stages(&mut bundle, &examples, &cfg)?;
    let plain_cfg = GenerationConfig { fusion_step: 0, ..cfg.generation.clone() };
    let plain = seeded_chamfer(&bundle, &shapes, &examples, &plain_cfg, 20)?;
    let fused_cfg = GenerationConfig { fusion_step: 30, fusion_ratio: 0.1, ..cfg.generation.clone() };
    let fused = seeded_chamfer(&bundle, &shapes, &examples, &fused_cfg, 20)?;
    let inter = mean_inter_shape_chamfer(&shapes)?;
    Ok(DeskRun { bundle, shapes, examples, inter, fused, plain, elapsed: start.elapsed(), _dir: dir })
}

fn overfit_memorization(run: &DeskRun) -> Outcome {
    let m = mean(&run.fused);
    check(
        m <= 0.2 * run.inter && run.elapsed <= Duration::from_secs(45 * 60),
        format!(
            "mean CD {m:.5} over 20 seeds vs 0.2 x inter-shape {:.5} (ratio {:.3}), train+sample {:.1} min",
            0.2 * run.inter,
            m / run.inter,
            minutes(run.elapsed)
        ),
    )
}

fn guided_sampling_helps(run: &DeskRun) -> Outcome {
    let diffs: Vec<f64> = run.fused.iter().zip(&run.plain).map(|(f, p)| p - f).collect();
    let (with, without) = (mean(&run.fused), mean(&run.plain));
    let effect = mean(&diffs) / std_dev(&diffs);
    let wins = diffs.iter().filter(|d| **d > 0.0).count();
    check(
        with <= without,
        format!("mean CD {with:.5} with blending vs {without:.5} without; paired effect size d = {effect:.3}, {wins}/20 seeds improved"),
    )
}

fn cross_view_consistency() -> Outcome {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.count = 10;
    cfg.model.condition.modality = Modality::Image;
    let (_dir, shapes) = load_shapes(&cfg)?;
    let examples = training_set(&shapes, &cfg.model).map_err(err)?;
    let mut bundle = ModelBundle::new(&cfg.model).map_err(err)?;
    train_both_stages(&mut bundle, &examples, &cfg)?;
    let views = 4;
    // Each view is an independent generation with its own seed; the shared-seed
    // figures isolate sensitivity to the condition alone.
    let mut independent = Vec::new();
    let mut shared = Vec::new();
    for fusion_step in [30, 0] {
        let gen = GenerationConfig { fusion_step, ..cfg.generation.clone() };
        let (mut own_seed, mut same_seed) = (Vec::new(), Vec::new());
        for shape in &shapes {
            let generate = |offsets: &[u64]| {
                shape.images[..views]
                    .iter()
                    .zip(offsets)
                    .map(|(img, &k)| {
                        let gen = GenerationConfig { seed: gen.seed + k, ..gen.clone() };
                        generate_shape(&bundle, &Prompt::Image(img.clone()), &gen).map(|(c, _)| c)
                    })
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(err)
            };
            own_seed.push(mean_pairwise_chamfer(&generate(&[0, 1, 2, 3])?)?);
            same_seed.push(mean_pairwise_chamfer(&generate(&[0; 4])?)?);
        }
        independent.push(mean(&own_seed));
        shared.push(mean(&same_seed));
    }
    let (with, without) = (independent[0], independent[1]);
    check(
        with <= without,
        format!(
            "mean pairwise CD over {views} views, 10 shapes: {with:.5} with blending vs {without:.5} without \
             (one shared seed: {:.5} vs {:.5}), {:.1} min",
            shared[0],
            shared[1],
            minutes(start.elapsed())
        ),
    )
}

fn mean_pairwise_chamfer(clouds: &[PointCloudShape]) -> Result<f64, String> {
    let mut pair = Vec::new();
    for (i, a) in clouds.iter().enumerate() {
        for b in &clouds[i + 1..] {
            pair.push(chamfer(a, b).map_err(err)?);
        }
    }
    Ok(mean(&pair))
}

fn ablation_rows(run: &DeskRun) -> Outcome {
    let cfg = ExperimentConfig::default();
    let out = tempfile::tempdir().map_err(err)?;
    let shapes = &run.shapes[..1];
    let args = AblateArgs {
        jobs: SampleJob::from_dataset(shapes, Modality::Class, 1),
        references: shapes.iter().map(|s| (s.entry.id.clone(), s.cloud.clone())).collect::<BTreeMap<_, _>>(),
        steps: vec![10, 20, 30, 40],
        ratios: vec![0.1, 0.2, 0.3, 0.4],
        seeds: 1,
        generation: cfg.generation.clone(),
        metrics: cfg.metrics.clone(),
        out: out.path().to_path_buf(),
    };
    let table = cmd_ablate(&run.bundle, &args).map_err(|e| e.message)?;
    let labels = |rows: &[ltm3d_cli::AblationRow]| rows.iter().map(|r| r.label.clone()).collect::<Vec<_>>();
    let finite = table.steps.iter().chain(&table.ratios).all(|r| r.chamfer.is_finite() && r.emd.is_finite() && r.f_score.is_finite());
    let files = out.path().join("ablation.json").is_file() && out.path().join("ablation.md").is_file();
    check(
        labels(&table.steps) == ["≤10", "≤20", "≤30", "≤40"] && labels(&table.ratios) == ["0.1", "0.2", "0.3", "0.4"] && finite && files,
        format!("rows {:?} / {:?} with CD, EMD and F-score columns", labels(&table.steps), labels(&table.ratios)),
    )
}

fn reproducibility(run: &DeskRun) -> Outcome {
    let cfg = ExperimentConfig::default();
    let train = || -> Result<(ModelBundle, Vec<f64>), String> {
        let mut b = ModelBundle::new(&cfg.model).map_err(err)?;
        let backbone = train_backbone(&mut b, &run.examples, &TrainConfig { epochs: 3, ..cfg.train.clone() }, &TrainOptions::default()).map_err(err)?;
        let recon = train_recon(&mut b, &run.examples, &TrainConfig { epochs: 3, ..cfg.train_recon.clone() }, &TrainOptions::default()).map_err(err)?;
        Ok((b, backbone.step_losses.into_iter().chain(recon.step_losses).collect()))
    };
    let ((a, la), (b, lb)) = (train()?, train()?);
    let gap = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    let loss_gap = if la.len() == lb.len() { gap(&la, &lb) } else { f64::INFINITY };
    let mut param_gap = 0.0f64;
    for (_, name, value) in a.params.iter() {
        let other = b.params.get(b.params.id(name).ok_or("parameter missing")?);
        param_gap = param_gap.max(gap(value.as_slice().unwrap(), other.as_slice().unwrap()));
    }
    let gen = GenerationConfig { seed: 5, ..cfg.generation.clone() };
    let prompt = run.examples[0].class_prompt();
    let flat = |c: &PointCloudShape| c.points.iter().flatten().copied().collect::<Vec<f64>>();
    let (x, _) = generate_shape(&run.bundle, &prompt, &gen).map_err(err)?;
    let (y, _) = generate_shape(&run.bundle, &prompt, &gen).map_err(err)?;
    let sample_gap = gap(&flat(&x), &flat(&y));
    check(
        loss_gap <= 1e-10 && param_gap <= 1e-10 && sample_gap <= 1e-10,
        format!("{} step losses, max gaps: loss {loss_gap:.1e}, parameters {param_gap:.1e}, samples {sample_gap:.1e}", la.len()),
    )
}

fn report(index: usize, name: &str, outcome: Outcome, failures: &mut usize) {
    match outcome {
        Ok(detail) => println!("PASS {index:>2} {name}: {detail}"),
        Err(detail) => {
            *failures += 1;
            println!("FAIL {index:>2} {name}: {detail}");
        }
    }
}

fn main() -> ExitCode {
    let mut failures = 0;
    report(1, "gradient check", gradient_check(), &mut failures);
    report(2, "two-Gaussian diffusion", two_gaussian_toy(), &mut failures);
    report(3, "masking invariance", masking_invariance(), &mut failures);
    report(4, "metric oracles", metric_oracles(), &mut failures);
    report(5, "blend endpoints", blend_endpoints(), &mut failures);
    match desk_run() {
        Ok(run) => {
            report(6, "overfit memorization", overfit_memorization(&run), &mut failures);
            report(7, "reconstruction-guided sampling", guided_sampling_helps(&run), &mut failures);
            report(8, "cross-view consistency", cross_view_consistency(), &mut failures);
            report(9, "ablation table", ablation_rows(&run), &mut failures);
            report(10, "reproducibility", reproducibility(&run), &mut failures);
        }
        Err(e) => {
            for (i, name) in [(6, "overfit memorization"), (7, "reconstruction-guided sampling"), (9, "ablation table"), (10, "reproducibility")] {
                report(i, name, Err(format!("desk run failed: {e}")), &mut failures);
            }
            report(8, "cross-view consistency", cross_view_consistency(), &mut failures);
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
