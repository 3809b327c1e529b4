//! `triresnet`: synthesize slides, tile them, train, evaluate, render
//! heatmaps and run the self-verification suites.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use triresnet_core::Error;

/// Exit codes are a stable contract.
pub mod exit {
    pub const OK: u8 = 0;
    pub const USAGE: u8 = 1;
    pub const SPEC: u8 = 2;
    pub const SAMPLING: u8 = 3;
    pub const EVALUATION: u8 = 4;
    pub const VERIFICATION: u8 = 5;
}

#[derive(Parser, Debug)]
#[command(name = "triresnet", version, about = "Triple-stream residual network for histopathology tiles")]
struct Cli {
    /// Root for default output locations.
    #[arg(long, global = true, env = "TRIRESNET_OUT", default_value = "triresnet-out")]
    out_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command that reads the run configuration.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Override one config key; repeatable. Wins over the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic pyramidal slide with ground-truth masks.
    Synth {
        /// JSON slide spec; the built-in default when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Overrides the spec's slide id.
        #[arg(long)]
        id: Option<String>,
        /// Overrides the spec's pixel seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Slide directory to write; `<out-root>/slides/<id>` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample a class-balanced tile manifest from a directory of slides.
    Tile {
        #[arg(long)]
        slides: PathBuf,
        /// Number of tiles; must be even.
        #[arg(short = 'n', long)]
        count: usize,
        /// Tile side in level-0 pixels.
        #[arg(long)]
        side: Option<usize>,
        /// Split fractions in train,val,test order, e.g. `0.8,0.2`.
        #[arg(long, value_delimiter = ',')]
        split: Vec<f64>,
        /// Keep each slide's tiles in a single split.
        #[arg(long)]
        by_slide: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the staged training policy (or train the single-stream baseline).
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        slides: PathBuf,
        /// Train the one-stream reference network instead.
        #[arg(long)]
        single_stream: bool,
        /// Depths 1,1,1,1 at one eighth width.
        #[arg(long)]
        tiny: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score checkpoints on one split of a manifest.
    Eval {
        /// Repeat to compare several networks in one table.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        slides: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Directory for the table and config echo.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Render a malignancy-probability heatmap over a slide.
    Heatmap {
        #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Use the slide's own annotation instead of a network.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        slide: PathBuf,
        #[arg(long)]
        side: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        /// Graymap to write; a `.json` sidecar goes next to it.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Gradient, Otsu, sampler and freeze-contract self-checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Smaller Otsu and sampler sweeps.
        #[arg(long)]
        quick: bool,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn code_for(err: &Error) -> u8 {
    match err {
        Error::Spec(_) => exit::SPEC,
        Error::SamplingExhausted { .. } | Error::EmptyMask => exit::SAMPLING,
        Error::EmptyEvaluation => exit::EVALUATION,
        _ => exit::USAGE,
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    let root = cli.out_root;
    match cli.command {
        Command::Synth { spec, id, seed, out } => commands::synth(&root, spec.as_deref(), id, seed, out),
        Command::Tile {
            slides,
            count,
            side,
            split,
            by_slide,
            out,
            cfg,
        } => commands::tile(&root, &slides, count, side, &split, by_slide, out, &cfg),
        Command::Train {
            manifest,
            slides,
            single_stream,
            tiny,
            out,
            cfg,
        } => commands::train(&root, &manifest, &slides, single_stream, tiny, out, &cfg),
        Command::Eval {
            checkpoint,
            manifest,
            slides,
            split,
            out,
            cfg,
        } => commands::eval(&checkpoint, &manifest, &slides, &split, out, &cfg),
        Command::Heatmap {
            checkpoint,
            oracle,
            slide,
            side,
            stride,
            out,
            cfg,
        } => commands::heatmap(&root, checkpoint.as_deref(), oracle, &slide, side, stride, out, &cfg),
        Command::Verify {
            seed,
            quick,
            inject_fault,
        } => commands::verify(seed, quick, inject_fault.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(code_for(&e))
        }
    }
}
