//! `bevkit` command-line front end.

mod bench;
mod config;
mod run;
mod viz;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use bevkit::verify::{self, Suite};
use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Args, Parser, Subcommand};

use crate::config::CliConfig;

#[derive(Parser)]
#[command(name = "bevkit", version, about = "Run, benchmark and inspect BEV detection pipelines on synthetic scenes")]
struct Cli {
    /// Worker threads for parallel stages (BFK_THREADS takes precedence).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scenes, run the pipeline and write detections and diagnostics.
    Run {
        config: PathBuf,
        /// Output directory; defaults to `out_dir` from the config, then `out`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time each pipeline stage per view-transform mode and write bench.csv.
    Bench {
        config: PathBuf,
        /// Timed repetitions (overrides `bench.reps`).
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a [C, H, W] BFK1 tensor as a grayscale PGM.
    Viz(VizArgs),
    /// Run the verification suites and print a pass/fail table.
    Verify {
        #[arg(
            long,
            default_value = "all",
            value_parser = PossibleValuesParser::new(["all", "grad", "oracle", "props"])
                .map(|s| s.parse::<Suite>().expect("listed suite"))
        )]
        suite: Suite,
        /// Deliberately break a kernel to check that the suites notice.
        #[arg(long, hide = true, value_parser = ["swap-bilinear-axes"])]
        inject_fault: Option<String>,
    },
}

#[derive(Args)]
struct VizArgs {
    tensor: PathBuf,
    /// Draw this channel instead of the channel norm.
    #[arg(long, conflicts_with = "norm")]
    channel: Option<usize>,
    /// Draw the L2 norm over channels (the default).
    #[arg(long)]
    norm: bool,
    /// JSON list of `[x, y]` cell coordinates drawn as white pixels.
    #[arg(long)]
    points: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// An error together with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    const BAD_INPUT: u8 = 2;
    const RUNTIME: u8 = 3;

    fn bad_input(error: anyhow::Error) -> Self {
        Self {
            code: Self::BAD_INPUT,
            error,
        }
    }

    fn runtime(error: anyhow::Error) -> Self {
        Self {
            code: Self::RUNTIME,
            error,
        }
    }
}

fn thread_count(flag: Option<usize>, default: Option<usize>) -> anyhow::Result<Option<usize>> {
    match std::env::var("BFK_THREADS") {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("BFK_THREADS={v:?} is not a thread count"))?)),
        Err(_) => Ok(flag.or(default)),
    }
}

fn output_dir(flag: Option<PathBuf>, cfg: &CliConfig) -> PathBuf {
    flag.or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("out"))
}

fn load(path: &Path) -> Result<CliConfig, Failure> {
    CliConfig::load(path).map_err(Failure::bad_input)
}

fn dispatch(command: Command) -> Result<u8, Failure> {
    match command {
        Command::Run { config, out } => {
            let cfg = load(&config)?;
            let out = output_dir(out, &cfg);
            run::run(&cfg, &out).map_err(Failure::runtime)?;
            println!("wrote {}", out.display());
        }
        Command::Bench { config, reps, out } => {
            let mut cfg = load(&config)?;
            if let Some(r) = reps {
                cfg.bench.reps = r;
                cfg.validate().map_err(Failure::bad_input)?;
            }
            let out = output_dir(out, &cfg);
            bench::bench(&cfg, &out).map_err(Failure::runtime)?;
        }
        Command::Viz(args) => {
            let reduce = args.channel.filter(|_| !args.norm).map_or(viz::Reduce::Norm, viz::Reduce::Channel);
            let img = viz::prepare(&args.tensor, reduce, args.points.as_deref()).map_err(Failure::bad_input)?;
            std::fs::write(&args.out, img.to_pgm())
                .with_context(|| format!("writing {}", args.out.display()))
                .map_err(Failure::runtime)?;
        }
        Command::Verify { suite, inject_fault } => {
            if inject_fault.is_some() {
                bevkit::fault::set_swap_bilinear_axes(true);
            }
            let checks = verify::run(suite);
            print!("{}", verify::format_table(&checks));
            if checks.iter().any(|c| !c.passed) {
                return Ok(1);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    // bench defaults to one thread for stable timings
    let default_threads = matches!(cli.command, Command::Bench { .. }).then_some(1);
    let threads = match thread_count(cli.threads, default_threads) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(Failure::BAD_INPUT);
        }
    };
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(Failure::RUNTIME);
        }
    }
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
