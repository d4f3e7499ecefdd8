//! Command-line entry point.
//!
//! Precedence for every setting: built-in default, then the `M2OST_SEED`
//! environment variable (seed only), then `--config key=value` file, then
//! explicit flags. Exit codes: 0 success, 1 usage, 2 I/O, 3 numeric
//! failure, 4 compatibility.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use m2ost::commands::{
    self, AblateParams, EvalParams, ExportParams, GradScope, MapMode, Predictor, SynthParams,
    TrainParams,
};
use m2ost::error::{CmdError, CmdResult};
use m2ost::runconfig::{self, Overrides, RunConfig};
use m2ost_core::data::Split;
use m2ost_core::eval::AblationGrid;
use m2ost_core::synth::GenConfig;

#[derive(Parser)]
#[command(
    name = "m2ost",
    version,
    about = "Many-to-one multi-scale regression of spot gene expressions from pyramidal image patches"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-scale dataset file.
    Synth(SynthArgs),
    /// Train a model and write checkpoint, config sidecar and training log.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the perfect predictor) on one split.
    Eval(EvalArgs),
    /// Train and evaluate a grid of configurations.
    Ablate(AblateArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Export a spot map (PGM raster + CSV) from predictions.
    Export(ExportArgs),
}

/// Flags shared by commands that build a model/training configuration.
#[derive(Args, Clone, Default)]
struct ConfigFlags {
    /// Plain-text key=value configuration file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// RNG seed [default: 42, or M2OST_SEED if set]
    #[arg(long)]
    seed: Option<u64>,
    /// Worker cap for evaluation passes; training stays serialized [default: 1]
    #[arg(long)]
    threads: Option<usize>,
    /// Base patch size [default: 16]
    #[arg(long)]
    p: Option<usize>,
    /// Embedding channels [default: 192]
    #[arg(long)]
    channels: Option<usize>,
    /// Encoder repeats [default: 4]
    #[arg(long)]
    depth: Option<usize>,
    /// Attention heads in the per-level blocks [default: 3]
    #[arg(long)]
    heads: Option<usize>,
    /// Gene count; must match the dataset [default: 250]
    #[arg(long)]
    genes: Option<usize>,
    /// Comma-separated pyramid levels to use [default: 0,1,2]
    #[arg(long)]
    levels: Option<String>,
    /// Attention-entry drop probability during training [default: 0.1]
    #[arg(long)]
    mask_prob: Option<f64>,
    /// Squeeze-and-excitation reduction ratio [default: 4]
    #[arg(long)]
    se_ratio: Option<usize>,
    /// Regression head: concat-cls or per-level-average [default: concat-cls]
    #[arg(long)]
    head_mode: Option<String>,
    /// Multi-granular patch embedding on/off [default: true]
    #[arg(long)]
    use_dpe: Option<bool>,
    /// Per-level attention blocks (false = one unified block) [default: true]
    #[arg(long)]
    decoupled_itmm: Option<bool>,
    /// Cross-level mixing: ctmm, concat, sum or none [default: ctmm]
    #[arg(long)]
    cross_mix: Option<String>,
    /// Cross-level channel gating on/off [default: true]
    #[arg(long)]
    use_ccmm: Option<bool>,
    /// Learning rate [default: 0.0001]
    #[arg(long)]
    lr: Option<f64>,
    /// Mini-batch size [default: 96]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Training epochs [default: 100]
    #[arg(long)]
    epochs: Option<usize>,
    /// Hard cap on optimizer steps [default: none]
    #[arg(long)]
    max_steps: Option<usize>,
    /// Fraction of samples with one level masked out [default: 0]
    #[arg(long)]
    missing_fraction: Option<f64>,
    /// Validation cadence in steps [default: 50]
    #[arg(long)]
    eval_every: Option<usize>,
    /// Training arithmetic: f32 or f64 [default: f32]
    #[arg(long)]
    precision: Option<String>,
}

impl ConfigFlags {
    fn resolve(&self) -> CmdResult<RunConfig> {
        let mut flags = Overrides::default();
        macro_rules! put {
            ($field:ident, $key:literal) => {
                if let Some(v) = &self.$field {
                    flags.set($key, v.to_string());
                }
            };
        }
        put!(seed, "seed");
        put!(threads, "threads");
        put!(p, "p");
        put!(channels, "channels");
        put!(depth, "depth");
        put!(heads, "heads");
        put!(genes, "genes");
        put!(levels, "levels");
        put!(mask_prob, "mask_prob");
        put!(se_ratio, "se_ratio");
        put!(head_mode, "head_mode");
        put!(use_dpe, "use_dpe");
        put!(decoupled_itmm, "decoupled_itmm");
        put!(cross_mix, "cross_mix");
        put!(use_ccmm, "use_ccmm");
        put!(lr, "lr");
        put!(batch_size, "batch_size");
        put!(epochs, "epochs");
        put!(max_steps, "max_steps");
        put!(missing_fraction, "missing_fraction");
        put!(eval_every, "eval_every");
        put!(precision, "precision");
        runconfig::resolve(self.config.as_deref(), &flags)
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset file (.m2od)
    #[arg(long)]
    out: PathBuf,
    /// Number of synthetic slides [default: 30]
    #[arg(long)]
    slides: Option<usize>,
    /// Spots per slide [default: 80]
    #[arg(long)]
    spots: Option<usize>,
    /// Genes per spot [default: 32]
    #[arg(long)]
    genes: Option<usize>,
    /// Gaussian noise std on gene targets [default: 0.1]
    #[arg(long)]
    noise: Option<f64>,
    /// Square image side in pixels [default: 32]
    #[arg(long)]
    image_size: Option<usize>,
    /// Comma-separated target weights of the spot/ring/context groups
    /// [default: 1.0,0.6,0.4]
    #[arg(long)]
    group_weights: Option<String>,
    /// RNG seed [default: 42, or M2OST_SEED if set]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Input dataset file
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory for checkpoint, sidecar and log
    #[arg(long)]
    out_dir: PathBuf,
    /// Plain-text gene list (one name per line) restricting the targets
    #[arg(long)]
    gene_list: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigFlags,
}

#[derive(Args)]
struct EvalArgs {
    /// Input dataset file
    #[arg(long)]
    dataset: PathBuf,
    /// Checkpoint to evaluate (omit with --predictor perfect)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Explicit model config sidecar [default: <checkpoint>.config]
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Predictor: model or perfect [default: model]
    #[arg(long)]
    predictor: Option<String>,
    /// Split to evaluate: train, val or test [default: test]
    #[arg(long)]
    split: Option<String>,
    /// Plain-text gene list (one name per line) restricting the targets
    #[arg(long)]
    gene_list: Option<PathBuf>,
    /// Output per-spot report CSV
    #[arg(long)]
    out: PathBuf,
    /// Optional per-gene report CSV
    #[arg(long)]
    per_gene_out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigFlags,
}

#[derive(Args)]
struct AblateArgs {
    /// Input dataset file
    #[arg(long)]
    dataset: PathBuf,
    /// Output table CSV
    #[arg(long)]
    out: PathBuf,
    /// Grid: levels, components or single [default: levels]
    #[arg(long)]
    grid: Option<String>,
    #[command(flatten)]
    config: ConfigFlags,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Scope: primitives, blocks, model or all [default: all]
    #[arg(long)]
    scope: Option<String>,
}

#[derive(Args)]
struct ExportArgs {
    /// Input dataset file
    #[arg(long)]
    dataset: PathBuf,
    /// Checkpoint to predict with (omit with --predictor perfect)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Explicit model config sidecar [default: <checkpoint>.config]
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Predictor: model or perfect [default: model]
    #[arg(long)]
    predictor: Option<String>,
    /// Slide to map [default: slide of the first sample]
    #[arg(long)]
    slide: Option<String>,
    /// Map mode: pca1 or gene [default: pca1]
    #[arg(long)]
    mode: Option<String>,
    /// Gene name for --mode gene
    #[arg(long)]
    gene: Option<String>,
    /// Output path prefix; writes <prefix>.pgm and <prefix>.csv
    #[arg(long)]
    out_prefix: PathBuf,
    #[command(flatten)]
    config: ConfigFlags,
}

fn parse_split(s: Option<&str>) -> CmdResult<Split> {
    match s.unwrap_or("test") {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(CmdError::Usage(format!("unknown split `{other}`"))),
    }
}

fn parse_predictor(s: Option<&str>, checkpoint: Option<PathBuf>) -> CmdResult<Predictor> {
    match s.unwrap_or("model") {
        "perfect" => Ok(Predictor::Perfect),
        "model" => {
            let ckpt = checkpoint
                .ok_or_else(|| CmdError::Usage("--checkpoint is required with --predictor model".into()))?;
            Ok(Predictor::Model { checkpoint: ckpt })
        }
        other => Err(CmdError::Usage(format!("unknown predictor `{other}`"))),
    }
}

fn env_seed_default() -> CmdResult<u64> {
    match std::env::var("M2OST_SEED") {
        Ok(s) => s
            .parse::<u64>()
            .map_err(|_| CmdError::Usage(format!("M2OST_SEED=`{s}` is not a u64"))),
        Err(_) => Ok(42),
    }
}

fn run(cli: Cli) -> CmdResult<()> {
    match cli.command {
        Command::Synth(args) => {
            let mut gen = GenConfig::default();
            if let Some(v) = args.slides {
                gen.slides = v;
            }
            if let Some(v) = args.spots {
                gen.spots_per_slide = v;
            }
            if let Some(v) = args.genes {
                gen.genes = v;
            }
            if let Some(v) = args.noise {
                gen.noise_sigma = v;
            }
            if let Some(v) = args.image_size {
                gen.image_h = v;
                gen.image_w = v;
            }
            if let Some(w) = &args.group_weights {
                let parts: Vec<&str> = w.split(',').collect();
                if parts.len() != 3 {
                    return Err(CmdError::Usage(
                        "--group-weights wants three comma-separated numbers".into(),
                    ));
                }
                for (i, part) in parts.iter().enumerate() {
                    gen.group_weights[i] = part
                        .trim()
                        .parse::<f64>()
                        .map_err(|_| CmdError::Usage(format!("bad group weight `{part}`")))?;
                }
            }
            let seed = match args.seed {
                Some(s) => s,
                None => env_seed_default()?,
            };
            commands::cmd_synth(&SynthParams { out: args.out, gen, seed })
        }
        Command::Train(args) => {
            let config = args.config.resolve()?;
            commands::require_average_head(&config)?;
            commands::cmd_train(&TrainParams {
                dataset: args.dataset,
                out_dir: args.out_dir,
                gene_list: args.gene_list,
                config,
            })
        }
        Command::Eval(args) => {
            let config = args.config.resolve()?;
            let predictor = parse_predictor(args.predictor.as_deref(), args.checkpoint)?;
            commands::cmd_eval(&EvalParams {
                dataset: args.dataset,
                predictor,
                out: args.out,
                per_gene_out: args.per_gene_out,
                split: parse_split(args.split.as_deref())?,
                gene_list: args.gene_list,
                config,
                model_config_path: args.model_config,
            })
        }
        Command::Ablate(args) => {
            let config = args.config.resolve()?;
            let grid = match args.grid.as_deref().unwrap_or("levels") {
                "levels" => AblationGrid::LevelSubsets,
                "components" => AblationGrid::Components,
                "single" => AblationGrid::Single,
                other => return Err(CmdError::Usage(format!("unknown grid `{other}`"))),
            };
            commands::cmd_ablate(&AblateParams {
                dataset: args.dataset,
                out: args.out,
                grid,
                config,
            })
        }
        Command::Gradcheck(args) => {
            let scope = match args.scope.as_deref().unwrap_or("all") {
                "primitives" => GradScope::Primitives,
                "blocks" => GradScope::Blocks,
                "model" => GradScope::Model,
                "all" => GradScope::All,
                other => return Err(CmdError::Usage(format!("unknown scope `{other}`"))),
            };
            commands::cmd_gradcheck(scope)
        }
        Command::Export(args) => {
            let config = args.config.resolve()?;
            let predictor = parse_predictor(args.predictor.as_deref(), args.checkpoint)?;
            let mode = match args.mode.as_deref().unwrap_or("pca1") {
                "pca1" => MapMode::Pca1,
                "gene" => {
                    let gene = args
                        .gene
                        .ok_or_else(|| CmdError::Usage("--mode gene requires --gene NAME".into()))?;
                    MapMode::Gene(gene)
                }
                other => return Err(CmdError::Usage(format!("unknown mode `{other}`"))),
            };
            commands::cmd_export(&ExportParams {
                dataset: args.dataset,
                predictor,
                slide: args.slide,
                mode,
                out_prefix: args.out_prefix,
                config,
                model_config_path: args.model_config,
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are not errors.
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
