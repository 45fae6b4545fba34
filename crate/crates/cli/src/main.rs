mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "decotree",
    version,
    about = "Constrained decoding over an explicit search tree"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Decode from a prompt and write ranked sequences as JSON lines.
    Decode(RunArgs),
    /// Search decoder configurations against the configured task suite.
    Optimize {
        #[command(flatten)]
        run: RunArgs,
        /// Threads used to evaluate trials.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Where to write the best-config document.
        #[arg(long)]
        best: Option<PathBuf>,
    },
    /// Enumerate the exact constrained distribution.
    Oracle {
        #[command(flatten)]
        run: RunArgs,
        /// Longest sequence to enumerate, EOS included. Defaults to the
        /// termination policy's `max_seq_len`.
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Train an add-k smoothed n-gram model on a line-per-sequence corpus.
    TrainNgram {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        order: usize,
        #[arg(long, default_value_t = 1.0)]
        k: f64,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Whitespace-separated prompt tokens; overrides the config.
    #[arg(long)]
    prompt: Option<String>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; overrides the config. Standard output if neither is set.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Record wall-clock times in the output.
    #[arg(long)]
    timing: bool,
}

impl RunArgs {
    fn overrides(&self) -> commands::Overrides {
        commands::Overrides {
            prompt: self.prompt.clone(),
            seed: self.seed,
            output: self.output.clone(),
            timing: self.timing,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match &cli.command {
        Command::Decode(run) => commands::decode(&run.config, &run.overrides()),
        Command::Optimize {
            run,
            parallel,
            best,
        } => commands::optimize(&run.config, &run.overrides(), *parallel, best.as_deref()),
        Command::Oracle { run, max_len } => {
            commands::oracle(&run.config, &run.overrides(), *max_len)
        }
        Command::TrainNgram {
            corpus,
            order,
            k,
            output,
        } => commands::train_ngram(corpus, *order, *k, output),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}
