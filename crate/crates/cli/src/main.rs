//! `pta`: phantom generation, the three training stages, synthesis, metric
//! evaluation and the oracle self-test.
//!
//! Exit status is 0 on success, 1 on a runtime failure and 2 on a
//! configuration or validation failure.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pta_core::nets::Stage;
use pta_core::selftest::Fault;

use crate::config::RunConfig;
use crate::failure::Failure;

#[derive(Parser)]
#[command(name = "pta", version, about = "Unpaired low-field to high-field MRI synthesis with pretext-task adversarial training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON run config; defaults are used for anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.iterations=500`. Repeatable;
    /// later values win.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        RunConfig::resolve(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Sgp,
    Lsc,
    Pta,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    /// Swap the block rotation direction used by the corruption oracle.
    Rotation,
}

#[derive(Subcommand)]
enum Command {
    /// Generate paired HF/LF phantom datasets plus a pairing manifest.
    Phantom {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        hf: Option<PathBuf>,
        #[arg(long)]
        lf: Option<PathBuf>,
        /// Contrastive encoder checkpoint (pta stage with use_sgp).
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Pretext network checkpoint (pta stage with use_lsc).
        #[arg(long)]
        pretext: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Translate an LF dataset with a trained generator.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        lf: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write 8-bit PNG previews.
        #[arg(long)]
        preview: bool,
    },
    /// FID, IS and MS-SSIM of a generated set against a reference set.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Score MS-SSIM against paired reference slices instead of diversity.
        #[arg(long)]
        paired: bool,
        #[arg(long)]
        pairing: Option<PathBuf>,
        /// Reuse a saved feature extractor instead of training one.
        #[arg(long)]
        extractor: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the oracle suite.
    Selftest {
        #[arg(long, value_enum)]
        inject_fault: Option<FaultArg>,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Phantom { cfg, out } => commands::phantom(&cfg.resolve()?, &out),
        Command::Train {
            cfg,
            stage,
            hf,
            lf,
            encoder,
            pretext,
            out,
        } => {
            let stage = match stage {
                StageArg::Sgp => Stage::Sgp,
                StageArg::Lsc => Stage::Lsc,
                StageArg::Pta => Stage::Pta,
            };
            let inputs = commands::TrainInputs { hf, lf, encoder, pretext };
            commands::train(&cfg.resolve()?, stage, &inputs, &out)
        }
        Command::Synth {
            cfg,
            checkpoint,
            lf,
            out,
            preview,
        } => commands::synth(&cfg.resolve()?, &checkpoint, lf, &out, preview),
        Command::Eval {
            cfg,
            generated,
            reference,
            paired,
            pairing,
            extractor,
            out,
        } => {
            let inputs = commands::EvalInputs {
                generated,
                reference,
                paired,
                pairing,
                extractor,
            };
            commands::eval(&cfg.resolve()?, &inputs, &out)
        }
        Command::Selftest { inject_fault } => {
            commands::selftest(inject_fault.map(|FaultArg::Rotation| Fault::RotationConvention))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
