//! The run configuration file and its validation.

use std::fmt;
use std::path::{Path, PathBuf};

use decotree::constraints::{compose_product, ConstraintSpec, ProductConstraint};
use decotree::decoders::{
    DecoderConfig, DecoderKind, Selection, DEFAULT_ESS_THRESHOLD, DEFAULT_PUCT_C,
    DEFAULT_ROLLOUT_MAX_LEN,
};
use decotree::lm::{LanguageModel, LookupLm, LookupLmFile, NgramLm, UniformLm, Vocabulary};
use decotree::optimizer::{Objective, Params, SearchSpace, Strategy, TaskSpec};
use decotree::runner::{AggregationPolicy, RunConfig, TerminationPolicy};
use serde::{Deserialize, Serialize};

/// A configuration problem, tied to the key that caused it when known.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: Option<String>,
    pub message: String,
}

impl ConfigError {
    pub fn at(key: impl Into<String>, message: impl fmt::Display) -> Self {
        Self {
            key: Some(key.into()),
            message: message.to_string(),
        }
    }

    pub fn general(message: impl fmt::Display) -> Self {
        Self {
            key: None,
            message: message.to_string(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.key {
            Some(key) => write!(f, "configuration error at `{key}`: {}", self.message),
            None => write!(f, "configuration error: {}", self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub lm: LmSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder: Option<DecoderSpec>,
    /// Applied to every decode; for `optimize`, the named catalogue.
    #[serde(default)]
    pub constraints: Vec<ConstraintSpec>,
    #[serde(default)]
    pub termination: TerminationPolicy,
    #[serde(default)]
    pub aggregation: AggregationPolicy,
    #[serde(default)]
    pub seed: u64,
    /// Whitespace-separated vocabulary tokens.
    #[serde(default)]
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Resume LM queries from parent nodes. Never changes results.
    #[serde(default = "yes")]
    pub lm_cache: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerSpec>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LmSpec {
    Uniform {
        vocab: Vec<String>,
        eos: String,
    },
    /// A table from `path`, or given inline as `model`.
    Lookup {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        model: Option<LookupLmFile>,
    },
    /// A model written by `train-ngram`. `order`, if given, must match the
    /// file; `k` replaces its smoothing constant.
    Ngram {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        order: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        k: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSpec {
    pub kind: DecoderKind,
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub j: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Selection>,
    #[serde(default = "default_puct_c")]
    pub puct_c: f64,
    #[serde(default = "default_ess_threshold")]
    pub ess_threshold: f64,
    #[serde(default = "default_rollout_max_len")]
    pub rollout_max_len: usize,
    #[serde(default)]
    pub allow_list: Vec<String>,
}

fn default_puct_c() -> f64 {
    DEFAULT_PUCT_C
}

fn default_ess_threshold() -> f64 {
    DEFAULT_ESS_THRESHOLD
}

fn default_rollout_max_len() -> usize {
    DEFAULT_ROLLOUT_MAX_LEN
}

impl DecoderSpec {
    pub fn from_params(params: &Params) -> Self {
        Self {
            kind: params.decoder,
            k: params.k,
            j: params.j,
            mode: None,
            puct_c: DEFAULT_PUCT_C,
            ess_threshold: DEFAULT_ESS_THRESHOLD,
            rollout_max_len: DEFAULT_ROLLOUT_MAX_LEN,
            allow_list: Vec::new(),
        }
    }

    pub fn build(&self, vocab: &Vocabulary) -> Result<DecoderConfig, ConfigError> {
        let allow_list = self
            .allow_list
            .iter()
            .map(|t| {
                vocab.id(t).ok_or_else(|| {
                    ConfigError::at("decoder.allow_list", format!("unknown token `{t}`"))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let config = DecoderConfig {
            j: self.j,
            selection: self.mode,
            puct_c: self.puct_c,
            ess_threshold: self.ess_threshold,
            rollout_max_len: self.rollout_max_len,
            allow_list,
            ..DecoderConfig::new(self.kind, self.k)
        };
        config
            .validate(vocab.len())
            .map_err(|e| ConfigError::at("decoder", e))?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub strategy: Strategy,
    pub max_iters: usize,
    pub space: SearchSpace,
    pub tasks: Vec<TaskSpec>,
    #[serde(default)]
    pub objective: Objective,
}

/// A parsed configuration plus the directory relative paths resolve against.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub file: ConfigFile,
    pub base_dir: PathBuf,
}

/// Parses a configuration document; errors name the offending key.
pub fn parse(text: &str) -> Result<ConfigFile, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            ConfigError::general(inner)
        } else {
            ConfigError::at(path, inner)
        }
    })
}

pub fn load(path: &Path) -> Result<LoadedConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::general(format!("{}: {e}", path.display())))?;
    let file = parse(&text)?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(LoadedConfig { file, base_dir })
}

impl LoadedConfig {
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_relative() {
            self.base_dir.join(path)
        } else {
            path.to_path_buf()
        }
    }

    pub fn build_lm(&self) -> Result<Box<dyn LanguageModel>, ConfigError> {
        let lm: Box<dyn LanguageModel> = match &self.file.lm {
            LmSpec::Uniform { vocab, eos } => Box::new(UniformLm::new(
                Vocabulary::new(vocab.clone(), eos).map_err(|e| ConfigError::at("lm.vocab", e))?,
            )),
            LmSpec::Lookup { path, model } => match (path, model) {
                (Some(p), None) => Box::new(
                    LookupLm::load(&self.resolve(p)).map_err(|e| ConfigError::at("lm.path", e))?,
                ),
                (None, Some(m)) => Box::new(
                    LookupLm::from_file_data(m.clone())
                        .map_err(|e| ConfigError::at("lm.model", e))?,
                ),
                _ => {
                    return Err(ConfigError::at(
                        "lm",
                        "lookup needs exactly one of `path` and `model`",
                    ))
                }
            },
            LmSpec::Ngram { path, order, k } => {
                let loaded = NgramLm::load(&self.resolve(path))
                    .map_err(|e| ConfigError::at("lm.path", e))?;
                if let Some(order) = order {
                    if *order != loaded.order() {
                        return Err(ConfigError::at(
                            "lm.order",
                            format!("model file has order {}, not {order}", loaded.order()),
                        ));
                    }
                }
                match k {
                    Some(k) => {
                        let mut data = loaded.to_file_data();
                        data.smoothing_k = *k;
                        Box::new(
                            NgramLm::from_file_data(data)
                                .map_err(|e| ConfigError::at("lm.k", e))?,
                        )
                    }
                    None => Box::new(loaded),
                }
            }
        };
        Ok(lm)
    }

    /// The configured constraints, with grammar files resolved.
    pub fn constraint_specs(&self) -> Vec<ConstraintSpec> {
        self.file
            .constraints
            .iter()
            .map(|spec| match spec {
                ConstraintSpec::CfgPrefix {
                    name,
                    grammar,
                    grammar_file,
                } => ConstraintSpec::CfgPrefix {
                    name: name.clone(),
                    grammar: grammar.clone(),
                    grammar_file: grammar_file.as_deref().map(|p| self.resolve(p)),
                },
                other => other.clone(),
            })
            .collect()
    }

    pub fn build_constraint(&self, vocab: &Vocabulary) -> Result<ProductConstraint, ConfigError> {
        let members = self
            .constraint_specs()
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                spec.build(vocab, None)
                    .map_err(|e| ConfigError::at(format!("constraints[{i}]"), e))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(compose_product(members))
    }

    pub fn prompt(
        &self,
        vocab: &Vocabulary,
        override_: Option<&str>,
    ) -> Result<Vec<usize>, ConfigError> {
        let text = override_.unwrap_or(&self.file.prompt);
        vocab
            .parse_tokens(text)
            .map_err(|e| ConfigError::at("prompt", e))
    }

    pub fn run_config(&self, vocab: &Vocabulary) -> Result<RunConfig, ConfigError> {
        let decoder = self
            .file
            .decoder
            .as_ref()
            .ok_or_else(|| ConfigError::at("decoder", "missing decoder section"))?
            .build(vocab)?;
        self.file
            .termination
            .validate()
            .map_err(|e| ConfigError::at("termination", e))?;
        self.file
            .aggregation
            .validate()
            .map_err(|e| ConfigError::at("aggregation", e))?;
        Ok(RunConfig {
            decoder,
            termination: self.file.termination.clone(),
            aggregation: self.file.aggregation.clone(),
        })
    }
}
