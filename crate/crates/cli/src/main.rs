use std::io;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};

use clap::{Parser, Subcommand};
use ralm_cli::{
    cmd_ablate, cmd_eval, cmd_finetune, cmd_inspect, cmd_pretrain, cmd_warmstart, CliError,
    GlobalArgs, PretrainArgs,
};
use ralm_core::mipsindex::RefreshMode;

static STOP: AtomicBool = AtomicBool::new(false);

#[derive(Parser)]
#[command(
    name = "ralm",
    version,
    about = "Retrieval-augmented masked language model laboratory"
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "ralm.toml")]
    config: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for checkpoints and metrics.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Overrides `train.refresh_mode`.
    #[arg(long, global = true)]
    mode: Option<RefreshMode>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// ICT retriever warm-start plus retrieval-free MLM reader warm-start.
    Warmstart,
    /// Marginal-likelihood pre-training with index refreshes.
    Pretrain {
        /// Continue from a pre-training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Start from this checkpoint instead of <out>/warmstart.ckpt.
        #[arg(long, conflicts_with = "resume")]
        init: Option<PathBuf>,
        /// Start from random parameters when no warm-start checkpoint exists.
        #[arg(long)]
        allow_cold: bool,
    },
    /// Fine-tune on question/answer pairs, then report exact match.
    Finetune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Report exact match on the evaluation split without training.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// List retrievals for a query; wrap masked words in [[ ]].
    Inspect {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// One seeded run per level of the config's [ablation] axis.
    Ablate {
        /// Also write the rows as JSON lines here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let args = GlobalArgs {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
        mode: cli.mode,
    };
    let mut out = io::stdout().lock();
    match cli.command {
        Command::Warmstart => cmd_warmstart(&args, &mut out),
        Command::Pretrain {
            resume,
            init,
            allow_cold,
        } => {
            ctrlc::set_handler(|| STOP.store(true, Ordering::SeqCst))
                .map_err(|e| CliError::Config(format!("cannot install signal handler: {e}")))?;
            let opts = PretrainArgs {
                resume,
                init,
                allow_cold,
            };
            cmd_pretrain(&args, &opts, &STOP, &mut out)
        }
        Command::Finetune { checkpoint } => cmd_finetune(&args, checkpoint.as_deref(), &mut out),
        Command::Eval { checkpoint } => cmd_eval(&args, checkpoint.as_deref(), &mut out),
        Command::Inspect {
            checkpoint,
            query,
            k,
        } => cmd_inspect(&args, checkpoint.as_deref(), &query, k, &mut out),
        Command::Ablate { report } => cmd_ablate(&args, report.as_deref(), &mut out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
