//! `arsg`: datagen, fst-build, train, decode, score.
//! Exit codes: 0 ok, 1 user error, 2 internal error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use arsg_cli::commands::{self, DecodeOverrides};

#[derive(Parser)]
#[command(name = "arsg", about = "Attention-based character-level speech recognizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (train/ and dev/ splits)
    Datagen {
        /// TOML run configuration
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Training utterances
        #[arg(long, default_value_t = 2000)]
        train: usize,
        /// Dev utterances
        #[arg(long, default_value_t = 200)]
        dev: usize,
        /// Override the config seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compile a character-level LM FST from an ARPA model and a word list
    FstBuild {
        #[arg(long)]
        config: Option<PathBuf>,
        /// ARPA n-gram model
        #[arg(long)]
        arpa: PathBuf,
        /// Word list, one word per line
        #[arg(long)]
        vocab: PathBuf,
        /// Output FST (text format)
        #[arg(long)]
        out: PathBuf,
        /// Keep the raw composition; skip determinize/minimize/push
        #[arg(long)]
        no_determinize: bool,
        /// Determinization state budget
        #[arg(long, default_value_t = 1_000_000)]
        state_budget: usize,
    },
    /// Train a model on a generated dataset
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory (holding train/ and dev/)
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoints and metrics
        #[arg(long)]
        run: PathBuf,
        /// Resume from a checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the number of epochs
        #[arg(long)]
        epochs: Option<usize>,
        /// Override the number of annealed epochs after the main run
        #[arg(long)]
        anneal_epochs: Option<usize>,
        /// Override the config seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Beam-decode a manifest with a trained checkpoint
    Decode {
        /// Checkpoint to decode with
        #[arg(long)]
        ckpt: PathBuf,
        /// Manifest of utterances to decode
        #[arg(long)]
        data: PathBuf,
        /// Optional language-model FST for shallow fusion
        #[arg(long)]
        lm: Option<PathBuf>,
        /// Output transcripts (JSON lines)
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        /// LM weight
        #[arg(long)]
        beta: Option<f64>,
        /// Length bonus
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Score decoded transcripts against manifest references
    Score {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Transcripts produced by decode
        #[arg(long)]
        hyp: PathBuf,
        /// Reference manifest
        #[arg(long)]
        data: PathBuf,
    },
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Datagen {
            config,
            out,
            train,
            dev,
            seed,
        } => {
            let mut cfg = commands::load_config(config.as_ref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            commands::cmd_datagen(&cfg, &out, train, dev)
        }
        Command::FstBuild {
            config,
            arpa,
            vocab,
            out,
            no_determinize,
            state_budget,
        } => {
            let cfg = commands::load_config(config.as_ref())?;
            commands::cmd_fst_build(&cfg, &arpa, &vocab, &out, no_determinize, state_budget)?;
            Ok(())
        }
        Command::Train {
            config,
            data,
            run,
            resume,
            epochs,
            anneal_epochs,
            seed,
        } => {
            let mut cfg = commands::load_config(config.as_ref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(a) = anneal_epochs {
                cfg.train.anneal_epochs = a;
            }
            commands::cmd_train(cfg, &data, &run, resume.as_deref())
        }
        Command::Decode {
            ckpt,
            data,
            lm,
            out,
            beam,
            beta,
            gamma,
            max_len,
        } => commands::cmd_decode(
            &ckpt,
            &data,
            lm.as_deref(),
            &DecodeOverrides {
                beam,
                beta,
                gamma,
                max_len,
            },
            &out,
        ),
        Command::Score { config, hyp, data } => {
            let cfg = commands::load_config(config.as_ref())?;
            commands::cmd_score(&cfg, &hyp, &data)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match std::panic::catch_unwind(run) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
        Err(_) => {
            eprintln!("internal error (panic)");
            ExitCode::from(2)
        }
    }
}
