//! `ccaf`: generate the toy benchmark, train either stage, evaluate.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or missing config,
//! 3 non-empty output directory without `--force`, 4 stage 2 without a
//! stage-1 checkpoint, 5 protocol not applicable to the dataset.

mod commands;
mod run_dir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ccaf::evaluation::{Protocol, StubEncoder};

#[derive(Parser, Debug)]
#[command(name = "ccaf", version, about = "Cloth-agnostic feature learning for cloth-changing re-ID")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic benchmark described by the `[toy]` section.
    GenToy {
        config: PathBuf,
        /// Defaults to the directory of `data.manifest`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Train stage 1 (prompt learning) or stage 2 (encoder fine-tuning).
    Train {
        config: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: Option<u8>,
        /// Run directory. Defaults to the resumed checkpoint's run directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stage-1 checkpoint to start stage 2 from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue from an intermediate checkpoint of either stage.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many epochs of the stage are done.
        #[arg(long)]
        stop_after: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Score the query split against the gallery under one protocol.
    Eval {
        config: PathBuf,
        #[arg(long, required_unless_present = "stub")]
        ckpt: Option<PathBuf>,
        /// Defaults to `eval.protocol`.
        #[arg(long)]
        protocol: Option<Protocol>,
        /// Use a stand-in feature source instead of a checkpoint.
        #[arg(long, conflicts_with = "ckpt")]
        stub: Option<StubEncoder>,
        /// Run directory for reports. Defaults to the checkpoint's run directory.
        #[arg(long, required_unless_present = "ckpt")]
        out: Option<PathBuf>,
    },
}

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Self::new(1, e)
    }
}

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NOT_EMPTY: u8 = 3;
pub const EXIT_NO_STAGE1: u8 = 4;
pub const EXIT_PROTOCOL: u8 = 5;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenToy { config, out, force } => commands::gen_toy(&config, out, force),
        Command::Train {
            config,
            stage,
            out,
            init,
            resume,
            stop_after,
            force,
        } => commands::train(&commands::TrainArgs {
            config,
            stage,
            out,
            init,
            resume,
            stop_after,
            force,
        }),
        Command::Eval {
            config,
            ckpt,
            protocol,
            stub,
            out,
        } => commands::eval(&config, ckpt, protocol, stub, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            if f.code == EXIT_USAGE {
                eprintln!("usage: ccaf <gen-toy|train|eval> <CONFIG> [OPTIONS]; see `ccaf --help`");
            }
            ExitCode::from(f.code)
        }
    }
}
