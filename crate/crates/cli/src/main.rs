//! Command-line surface for the splatcal pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error (including a
//! failed gradcheck). Diagnostics go to stderr; machine output is JSON on
//! stdout or files under --out.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "splatcal", version, about = "Self-calibrating Gaussian splat pipeline")]
struct Cli {
    #[command(flatten)]
    globals: Globals,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Globals {
    /// RNG seed; overrides config-file seeds. Defaults to 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; SPLATCAL_THREADS is the fallback, all cores the default.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Floating-point precision for rendering and fitting.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    /// Output directory or file, as the subcommand requires.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// More stderr diagnostics (-v debug, -vv trace).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
}

impl Globals {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// The --out flag, required by subcommands that write file trees.
    fn out_required(&self) -> Result<&PathBuf, commands::CliError> {
        self.out
            .as_ref()
            .ok_or_else(|| commands::CliError::usage("this subcommand requires --out"))
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with ground-truth cameras and depth.
    GenScene(commands::GenSceneArgs),
    /// Estimate a sequence's visual-overlap profile.
    LabelOverlap(commands::LabelOverlapArgs),
    /// Fit cameras and Gaussians to a sequence by photometric descent.
    Fit(commands::FitArgs),
    /// Render a fitted checkpoint from stored or supplied cameras.
    Render(commands::RenderArgs),
    /// Score fitted cameras against a sequence's ground truth.
    EvalPose(commands::EvalPoseArgs),
    /// Score novel-view renders against a sequence's frames (PSNR).
    EvalNvs(commands::EvalNvsArgs),
    /// Score rendered depth against a sequence's ground-truth depth.
    EvalDepth(commands::EvalDepthArgs),
    /// Compare analytic render gradients against finite differences.
    Gradcheck(commands::GradcheckArgs),
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

fn init_threads(globals: &Globals) -> Result<(), commands::CliError> {
    let threads = globals.threads.or_else(|| {
        std::env::var("SPLATCAL_THREADS").ok().and_then(|v| v.parse().ok())
    });
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(commands::CliError::usage("--threads must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| commands::CliError::runtime(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{e}");
                    ExitCode::from(1)
                }
            };
        }
    };
    init_logging(cli.globals.verbose);

    let run = init_threads(&cli.globals).and_then(|()| match &cli.command {
        Command::GenScene(args) => commands::gen_scene(args, &cli.globals),
        Command::LabelOverlap(args) => commands::label_overlap(args, &cli.globals),
        Command::Fit(args) => commands::fit(args, &cli.globals),
        Command::Render(args) => commands::render(args, &cli.globals),
        Command::EvalPose(args) => commands::eval_pose(args, &cli.globals),
        Command::EvalNvs(args) => commands::eval_nvs(args, &cli.globals),
        Command::EvalDepth(args) => commands::eval_depth(args, &cli.globals),
        Command::Gradcheck(args) => commands::gradcheck(args, &cli.globals),
    });
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
