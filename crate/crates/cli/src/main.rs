use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ltm3d_cli::{
    cmd_ablate, cmd_build_data, cmd_eval, cmd_sample, cmd_train, dataset_shapes, load_config, open_checkpoint, AblateArgs,
    CliError, CliResult, SampleArgs, SampleJob, Stage, TrainArgs,
};
use ltm3d_core::data::Split;

#[derive(Parser)]
#[command(name = "ltm3d", version, about = "Conditional 3D point-cloud generation in latent token space")]
struct Cli {
    /// Log progress (per-epoch losses, files written).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Backbone,
    Recon,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset: PLY clouds, silhouettes and manifest.
    BuildData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the backbone or the reconstruction adapter.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory (or its manifest file).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Checkpoint to write (and to read with --resume or --stage recon).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Continue the stage from the checkpoint's recorded progress.
        #[arg(long)]
        resume: bool,
        /// Override the configured number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Generate point clouds.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// A silhouette PNG or `family:p1,p2,...`; repeatable.
        #[arg(long)]
        condition: Vec<String>,
        /// Condition on the shapes of this dataset instead.
        #[arg(long)]
        from_data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        /// Silhouette views per dataset shape (image-conditioned models).
        #[arg(long, default_value_t = 1)]
        views: usize,
        #[arg(long)]
        fusion_step: Option<usize>,
        #[arg(long)]
        fusion_ratio: Option<f64>,
        /// Number of seeds, starting at the configured seed.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        /// Also write the per-step generation trace as JSON lines.
        #[arg(long)]
        trace: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score generated clouds against reference shapes.
    Eval {
        #[arg(long)]
        generated: PathBuf,
        /// Reference dataset directory (or manifest).
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report JSON path; a text table is written alongside.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep fusion steps and fusion ratios.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        /// Use at most this many shapes.
        #[arg(long)]
        shapes: Option<usize>,
        #[arg(long, default_value_t = 1)]
        views: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [10, 20, 30, 40])]
        steps: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.2, 0.3, 0.4])]
        ratios: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::BuildData { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let manifest = cmd_build_data(&cfg, &out)?;
            println!("{} shapes -> {}", manifest.entries.len(), manifest.path().display());
        }
        Command::Train { config, data, stage, checkpoint, resume, epochs } => {
            let cfg = load_config(config.as_deref())?;
            let stage = match stage {
                StageArg::Backbone => Stage::Backbone,
                StageArg::Recon => Stage::Recon,
            };
            let summary = cmd_train(&cfg, &TrainArgs { data, stage, checkpoint, resume, epochs })?;
            println!(
                "{} stage: {} epochs, {} steps, final loss {:.6} -> {}",
                summary.stage,
                summary.epochs,
                summary.step,
                summary.epoch_losses.last().copied().unwrap_or(f64::NAN),
                summary.checkpoint.display()
            );
        }
        Command::Sample { checkpoint, config, condition, from_data, split, views, fusion_step, fusion_ratio, seeds, trace, out } => {
            let cfg = load_config(config.as_deref())?;
            let bundle = open_checkpoint(&checkpoint, config.as_ref().map(|_| &cfg))?;
            let resolution = bundle.config.condition.resolution;
            let mut jobs = condition.iter().map(|c| SampleJob::from_condition(c, resolution)).collect::<CliResult<Vec<_>>>()?;
            if let Some(data) = from_data {
                jobs.extend(SampleJob::from_dataset(&dataset_shapes(&data, split.split(), None)?, bundle.config.condition.modality, views));
            }
            let mut generation = cfg.generation.clone();
            generation.fusion_step = fusion_step.unwrap_or(generation.fusion_step);
            generation.fusion_ratio = fusion_ratio.unwrap_or(generation.fusion_ratio);
            let index = cmd_sample(&bundle, &checkpoint, &SampleArgs { jobs, seeds, generation, out: out.clone(), trace })?;
            println!("{} samples -> {}", index.samples.len(), out.display());
        }
        Command::Eval { generated, reference, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let report = cmd_eval(&generated, &reference, &out, &cfg.metrics)?;
            print!("{}", report.to_table());
        }
        Command::Ablate { checkpoint, config, data, split, shapes, views, steps, ratios, seeds, out } => {
            let cfg = load_config(config.as_deref())?;
            let bundle = open_checkpoint(&checkpoint, config.as_ref().map(|_| &cfg))?;
            let loaded = dataset_shapes(&data, split.split(), shapes)?;
            let jobs = SampleJob::from_dataset(&loaded, bundle.config.condition.modality, views);
            let references = loaded.iter().map(|s| (s.entry.id.clone(), s.cloud.clone())).collect();
            let args = AblateArgs { jobs, references, steps, ratios, seeds, generation: cfg.generation.clone(), metrics: cfg.metrics.clone(), out };
            let table = cmd_ablate(&bundle, &args)?;
            print!("{}", table.to_markdown());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError { code, message }) => {
            eprintln!("error: {message}");
            ExitCode::from(code as u8)
        }
    }
}
