mod config;
mod data;
mod error;
mod evaluate;
mod synth;
mod tasks;
mod tokens;
mod train;
mod vocab;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{BackendKind, RunConfig};
use error::CliResult;
use tasks::Task;

#[derive(Parser)]
#[command(name = "v2l", version, about = "Tokenize images into LLM vocabulary and run few-shot tasks on the tokens")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, short, global = true, env = "V2L_CONFIG", default_value = "v2l.toml")]
    config: PathBuf,
    /// Overrides the config's top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's run_dir.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build bigrams and trigrams from the prediction table.
    ExpandVocab,
    /// Keep the expanded entries closest to the image embeddings.
    FilterVocab,
    /// Train the tokenizer; loss goes to run_dir/loss.csv.
    Train {
        /// Continue from paths.checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many steps.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Write a token map for every image into run_dir/tokens.
    Tokenize,
    /// Decode token maps back into images.
    Detokenize {
        /// A token map or a directory of them [default: run_dir/tokens].
        #[arg(long)]
        input: Option<PathBuf>,
        /// Output directory [default: run_dir/reconstructions].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an understanding or restoration task against the LLM backend.
    RunTask {
        #[arg(value_enum)]
        task: Task,
        /// Overrides backend.kind.
        #[arg(long, value_enum)]
        backend: Option<BackendKind>,
        /// Overrides backend.endpoint.
        #[arg(long, env = "V2L_ENDPOINT")]
        endpoint: Option<String>,
        /// Overrides backend.auth_token.
        #[arg(long, env = "V2L_AUTH_TOKEN", hide_env_values = true)]
        auth_token: Option<String>,
    },
    /// Codebook usage, reconstruction PSNR and CLIP scores for run_dir/tokens.
    Eval,
    /// Write a small synthetic corpus and a config for it.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        #[arg(long, default_value_t = 64)]
        vocab: usize,
        /// Channel width divisor of the model.
        #[arg(long, default_value_t = 8)]
        divisor: usize,
        #[arg(long, default_value_t = 2)]
        epochs: u64,
        #[arg(long, default_value_t = 2)]
        top_m: usize,
    },
}

fn load(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.seed = config::stage_seed(seed, "train");
    }
    if let Some(dir) = &cli.run_dir {
        cfg.run_dir = dir.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Synth {
            out,
            count,
            image_size,
            vocab,
            divisor,
            epochs,
            top_m,
        } => synth::synth(
            out,
            &synth::SynthArgs {
                count: *count,
                image_size: *image_size,
                vocab: *vocab,
                divisor: *divisor,
                epochs: *epochs,
                top_m: *top_m,
                seed: cli.seed.unwrap_or(0),
            },
        ),
        Command::ExpandVocab => vocab::expand(&load(&cli)?),
        Command::FilterVocab => vocab::filter(&load(&cli)?),
        Command::Train { resume, max_steps } => train::train(&load(&cli)?, *resume, *max_steps),
        Command::Tokenize => tokens::tokenize(&load(&cli)?),
        Command::Detokenize { input, out } => tokens::detokenize(&load(&cli)?, input.clone(), out.clone()),
        Command::RunTask {
            task,
            backend,
            endpoint,
            auth_token,
        } => {
            let mut cfg = load(&cli)?;
            if let Some(kind) = backend {
                cfg.backend.kind = *kind;
            }
            if endpoint.is_some() {
                cfg.backend.endpoint = endpoint.clone();
            }
            if auth_token.is_some() {
                cfg.backend.auth_token = auth_token.clone();
            }
            tasks::run(&cfg, *task)
        }
        Command::Eval => evaluate::eval(&load(&cli)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // usage errors are the user's, like every other bad input
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
