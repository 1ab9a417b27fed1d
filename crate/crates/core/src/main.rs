use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use opkernel::cli::{self, Overrides, RunConfig};
use opkernel::layers::BiasMode;

#[derive(Parser)]
#[command(name = "opkernel", version, about = "Operational neural networks with super neurons")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare analytic sensitivities with finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Bias modes to check (none, random, learnable); all when omitted.
        #[arg(long, value_delimiter = ',', num_args = 1.., value_parser = cli::parse_mode)]
        modes: Vec<BiasMode>,
        /// Scale analytic kernel gradients to force failures.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Shift-recovery proof of concept.
    Poc {
        #[command(flatten)]
        common: Common,
    },
    /// Write a paired PGM dataset and its manifest.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train with restarts and keep the best checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, replacing `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    restarts: Option<usize>,
}

impl Common {
    fn load(&self) -> opkernel::Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            seed: self.seed,
            out: self.out.clone(),
            restarts: self.restarts,
        });
        Ok(cfg)
    }
}

fn run(cli: Cli) -> opkernel::Result<cli::Outcome> {
    cli::configure_threads(std::env::var("OPKERNEL_THREADS").ok().as_deref())?;
    match cli.command {
        Command::Gradcheck { common, modes, corrupt } => cli::cmd_gradcheck(&common.load()?, &modes, corrupt),
        Command::Poc { common } => cli::cmd_poc(&common.load()?),
        Command::Synth { common } => cli::cmd_synth(&common.load()?),
        Command::Train { common } => cli::cmd_train(&common.load()?),
        Command::Eval { common } => cli::cmd_eval(&common.load()?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
