use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ragr_cli::commands::{self, Layout};
use ragr_cli::config::{parse_mode, Config, EpochsTarget, Overrides};
use ragr_cli::error::CliError;
use ragr_core::sequence::SequenceMode;

/// Review-augmented generative recommendation pipeline.
#[derive(Parser, Debug)]
#[command(name = "ragr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// INI config file; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Sequence mode: item-only, input or task.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Number of quantization levels.
    #[arg(long, global = true)]
    sid_levels: Option<usize>,
    #[arg(long, global = true)]
    beta_dpo: Option<f64>,
    /// Epochs for the running stage's training loop.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Output directory holding every artifact.
    #[arg(long, global = true, default_value = "ragr-out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Parse raw reviews, k-core filter, attach embeddings.
    Ingest,
    /// Generate a synthetic dataset with planted review signal.
    Synth,
    /// Train the tokenizer and assign item and review SIDs.
    Tokenize,
    /// Train the recommender in one sequence mode.
    Train,
    /// Preference-align the task-mode model.
    Align,
    /// Compute HIT@K and NDCG@K on the test split.
    Eval,
    /// Collision rate and metrics across tokenizer depths.
    SweepSid,
    /// Metrics across alignment strength and length.
    SweepDpo,
    /// Per-level SID frequency histograms.
    Inspect,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Ok(n) = std::env::var("RAGR_THREADS") {
        let n: usize = n.parse().map_err(|_| {
            CliError::Config(format!(
                "RAGR_THREADS must be a positive integer, got {n:?}"
            ))
        })?;
        // a pool may already exist when embedded; the cap then stays as set
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let target = match cli.command {
        Command::Tokenize | Command::SweepSid => EpochsTarget::Tokenizer,
        Command::Train => EpochsTarget::Train,
        Command::Align | Command::SweepDpo => EpochsTarget::Align,
        _ => EpochsTarget::None,
    };
    Overrides {
        seed: cli.seed,
        sid_levels: cli.sid_levels,
        beta_dpo: cli.beta_dpo,
        epochs: cli.epochs,
    }
    .apply(&mut cfg, target);
    cfg.validate()?;
    let mode = cli.mode.as_deref().map(parse_mode).transpose()?;
    let layout = Layout::new(&cli.out);
    let manifest = match cli.command {
        Command::Ingest => commands::ingest(&cfg, &layout)?,
        Command::Synth => commands::synth(&cfg, &layout)?,
        Command::Tokenize => commands::tokenize(&cfg, &layout)?,
        Command::Train => {
            let mode = mode.ok_or_else(|| {
                CliError::Config("train needs --mode item-only|input|task".into())
            })?;
            commands::train(&cfg, &layout, mode)?
        }
        Command::Align => commands::align(&cfg, &layout, mode)?,
        Command::Eval => {
            commands::eval(&cfg, &layout, cli.mode.as_deref().map(eval_id).transpose()?)?
        }
        Command::SweepSid => {
            commands::sweep_sid(&cfg, &layout, mode.unwrap_or(SequenceMode::TaskAugmented))?
        }
        Command::SweepDpo => commands::sweep_dpo(&cfg, &layout)?,
        Command::Inspect => commands::inspect(&cfg, &layout)?,
    };
    for path in manifest.outputs.keys() {
        println!("{}", layout.root.join(path).display());
    }
    Ok(())
}

/// `eval --mode` also accepts the aligned model id.
fn eval_id(s: &str) -> Result<&str, CliError> {
    if s == commands::ALIGNED {
        Ok(s)
    } else {
        parse_mode(s).map(|m| m.as_str())
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
