use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Debug, Parser)]
#[command(name = "sacn", version, about = "Self-attention capsule networks: training and inspection")]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command that resolves a run configuration.
#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Flat `key = value` config file, applied over the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Starting preset (medical, medical-512, mnist, mnist-small, cifar10, svhn,
    /// synthetic-simple, synthetic-complex, mini).
    #[arg(long)]
    pub preset: Option<String>,
    /// Override one key, e.g. `-s train.lr=0.001`. Repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Root seed; shorthand for `-s seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "sacn-out")]
    pub out: PathBuf,
    /// Write 0 in the seconds column of metrics files.
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes checkpoint.ckpt, metrics.csv and resolved-config.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from a checkpoint; its config is used as the base.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Override keys of the stored config (data paths, for instance).
        #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[command(flatten)]
        run: RunArgs,
        /// Routing iteration counts to check.
        #[arg(long, value_delimiter = ',', default_value = "1,3")]
        routing: Vec<usize>,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-5)]
        threshold: f64,
    },
    /// Train SACN and the baseline over several seeds and compare test accuracy.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Number of seeds.
        #[arg(short, long, default_value_t = 3)]
        k: usize,
        /// Fail when the SACN mean minus the baseline mean is below this.
        #[arg(long)]
        min_gap: Option<f64>,
    },
    /// Dataset utilities.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// Write attention maps for query locations of one image as PGM files.
    ExportAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image (PGM) matching the model's input size.
        #[arg(long)]
        image: PathBuf,
        /// Query location `row,col` on the feature grid. Repeatable.
        #[arg(long = "location", value_name = "ROW,COL", required = true)]
        locations: Vec<String>,
        #[arg(long, default_value = "sacn-out")]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GenKind {
    Simple,
    Complex,
    /// Whole images with lesion and normal masks, for `extract-patches`.
    Annotated,
}

#[derive(Debug, Subcommand)]
enum DataCommand {
    /// Generate a synthetic dataset directory.
    SynthGen {
        #[arg(long, value_enum)]
        kind: GenKind,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Image height (default 16, or 64 for annotated images).
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cut fixed-size patches from annotated images and split them by source image.
    ExtractPatches {
        /// Directory of `<name>.pgm`, `<name>.lesion.pgm`, `<name>.normal.pgm`.
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value_t = 30)]
        per_region: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Leave every sample unassigned.
        #[arg(long)]
        no_split: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// (Re)assign the 80/10/10 image-level split of a dataset directory.
    Split {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print sample, class and split counts of a dataset directory.
    Inspect {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn run(cli: Cli) -> sacn::Result<()> {
    match cli.command {
        Command::Train { run, resume } => commands::train(&run, resume.as_deref()),
        Command::Eval { checkpoint, split, overrides, out } => {
            commands::eval(&checkpoint, &split, &overrides, out.as_deref())
        }
        Command::Gradcheck { run, routing, eps, threshold } => commands::gradcheck(&run, routing, eps, threshold),
        Command::Ablate { run, k, min_gap } => commands::ablate(&run, k, min_gap),
        Command::ExportAttn { checkpoint, image, locations, out } => {
            commands::export_attn(&checkpoint, &image, &locations, &out)
        }
        Command::Data { command } => match command {
            DataCommand::SynthGen { kind, n, seed, height, width, out } => {
                commands::synth_gen(kind, n, seed, height, width, &out)
            }
            DataCommand::ExtractPatches { images, per_region, seed, no_split, out } => {
                commands::extract_patches(&images, per_region, seed, no_split, &out)
            }
            DataCommand::Split { dir, seed } => commands::split(&dir, seed),
            DataCommand::Inspect { dir } => commands::inspect(&dir),
        },
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
