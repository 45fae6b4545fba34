//! Subcommand bodies. Each returns the process exit code or a failure.

use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};

use decotree::decoders::Model;
use decotree::lm;
use decotree::optimizer::{self, EvalOptions, TaskSuite, Trial};
use decotree::oracle::{self, OracleError};
use decotree::runner;
use serde::Serialize;

use crate::config::{self, ConfigError, DecoderSpec, LoadedConfig};

pub const EXIT_OK: u8 = 0;
pub const EXIT_ERROR: u8 = 1;
pub const EXIT_TOO_LARGE: u8 = 2;
pub const EXIT_NO_COMPLETE: u8 = 3;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn error(message: impl Display) -> Self {
        Self {
            code: EXIT_ERROR,
            message: message.to_string(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::error(e)
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub prompt: Option<String>,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub timing: bool,
}

fn load(path: &Path, overrides: &Overrides) -> Result<LoadedConfig, Failure> {
    let mut loaded = config::load(path)?;
    if let Some(seed) = overrides.seed {
        loaded.file.seed = seed;
    }
    Ok(loaded)
}

/// The output path: the flag as given, else the config's, relative to the
/// config file.
fn output_path(loaded: &LoadedConfig, overrides: &Overrides) -> Option<PathBuf> {
    overrides
        .output
        .clone()
        .or_else(|| loaded.file.output.as_deref().map(|p| loaded.resolve(p)))
}

fn json_lines<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("records serialize"));
        out.push('\n');
    }
    out
}

fn emit(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => {
            std::fs::write(p, text).map_err(|e| Failure::error(format!("{}: {e}", p.display())))
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| Failure::error(format!("stdout: {e}")))
        }
    }
}

pub fn decode(config_path: &Path, overrides: &Overrides) -> Result<u8, Failure> {
    let loaded = load(config_path, overrides)?;
    let lm = loaded.build_lm()?;
    let vocab = lm.vocab();
    let constraint = loaded.build_constraint(vocab)?;
    let run_config = loaded.run_config(vocab)?;
    let prompt = loaded.prompt(vocab, overrides.prompt.as_deref())?;
    let output = output_path(&loaded, overrides);

    let model = Model {
        use_lm_cache: loaded.file.lm_cache,
        ..Model::new(lm.as_ref(), &constraint)
    };
    let result =
        runner::run(&model, &run_config, &prompt, loaded.file.seed).map_err(Failure::error)?;
    emit(
        output.as_deref(),
        &json_lines(&result.records(vocab, overrides.timing)),
    )?;
    eprintln!(
        "{} sequences, {} expansions, stopped by {}",
        result.sequences.len(),
        result.expansion_count,
        result.termination_reason.as_str()
    );
    Ok(if result.has_complete() {
        EXIT_OK
    } else {
        EXIT_NO_COMPLETE
    })
}

#[derive(Debug, Serialize)]
struct BestConfig<'a> {
    best: &'a Trial,
    /// Decoder section that reproduces the best trial.
    decoder: DecoderSpec,
    constraints: &'a [String],
    seed: u64,
}

pub fn optimize(
    config_path: &Path,
    overrides: &Overrides,
    parallel: usize,
    best_path: Option<&Path>,
) -> Result<u8, Failure> {
    let loaded = load(config_path, overrides)?;
    let spec = loaded
        .file
        .optimizer
        .as_ref()
        .ok_or_else(|| ConfigError::at("optimizer", "missing optimizer section"))?;
    if parallel == 0 {
        return Err(Failure::error("--parallel must be at least 1"));
    }
    let lm = loaded.build_lm()?;
    let vocab = lm.vocab();
    let suite = TaskSuite::new(&spec.tasks, loaded.constraint_specs(), vocab)
        .map_err(|e| ConfigError::at("optimizer.tasks", e))?;
    spec.space
        .validate(&suite)
        .map_err(|e| ConfigError::at("optimizer.space", e))?;
    if spec.max_iters == 0 {
        return Err(ConfigError::at("optimizer.max_iters", "must be at least 1").into());
    }
    let options = EvalOptions {
        termination: loaded.file.termination.clone(),
        aggregation: loaded.file.aggregation.clone(),
        objective: spec.objective,
        timing: overrides.timing,
    };
    let seed = loaded.file.seed;
    let result = optimizer::optimize(
        lm.as_ref(),
        &spec.space,
        &suite,
        spec.strategy,
        spec.max_iters,
        seed,
        parallel,
        &options,
    )
    .map_err(Failure::error)?;

    let output = output_path(&loaded, overrides);
    emit(output.as_deref(), &json_lines(&result.history))?;
    let best = BestConfig {
        best: &result.best,
        decoder: DecoderSpec::from_params(&result.best.params),
        constraints: &result.best.params.constraints,
        seed,
    };
    let doc = serde_json::to_string(&best).expect("best config serializes") + "\n";
    let best_path = best_path.map(Path::to_path_buf).or_else(|| {
        output.as_ref().map(|o| {
            let mut name = o.as_os_str().to_owned();
            name.push(".best.json");
            PathBuf::from(name)
        })
    });
    emit(best_path.as_deref(), &doc)?;
    eprintln!(
        "{} trials; best trial {} with objective {}",
        result.history.len(),
        result.best.trial,
        result.best.objective
    );
    Ok(EXIT_OK)
}

pub fn oracle(
    config_path: &Path,
    overrides: &Overrides,
    max_len: Option<usize>,
) -> Result<u8, Failure> {
    let loaded = load(config_path, overrides)?;
    let lm = loaded.build_lm()?;
    let vocab = lm.vocab();
    let constraint = loaded.build_constraint(vocab)?;
    let prompt = loaded.prompt(vocab, overrides.prompt.as_deref())?;
    let max_len = max_len.unwrap_or(loaded.file.termination.max_seq_len);
    if max_len == 0 {
        return Err(Failure::error("--max-len must be at least 1"));
    }
    let dist = match oracle::enumerate_constrained(lm.as_ref(), &constraint, &prompt, max_len) {
        Ok(d) => d,
        Err(e @ OracleError::TooLarge { .. }) => {
            return Err(Failure {
                code: EXIT_TOO_LARGE,
                message: e.to_string(),
            })
        }
        Err(e) => return Err(Failure::error(e)),
    };
    emit(
        output_path(&loaded, overrides).as_deref(),
        &json_lines(&oracle::records(&dist, vocab)),
    )?;
    eprintln!(
        "complete mass {}, truncated {}, rejected {}",
        dist.mass, dist.truncated_mass, dist.rejected_mass
    );
    Ok(EXIT_OK)
}

pub fn train_ngram(corpus: &Path, order: usize, k: f64, output: &Path) -> Result<u8, Failure> {
    let text = std::fs::read_to_string(corpus)
        .map_err(|e| Failure::error(format!("{}: {e}", corpus.display())))?;
    let lines: Vec<&str> = text.lines().collect();
    let model = lm::train_ngram(&lines, order, k).map_err(Failure::error)?;
    let data = model.to_file_data();
    let doc = serde_json::to_string_pretty(&data).expect("model serializes") + "\n";
    emit(Some(output), &doc)?;
    eprintln!(
        "trained order-{order} model over {} tokens",
        data.vocab.len()
    );
    Ok(EXIT_OK)
}
