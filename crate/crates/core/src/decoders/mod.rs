//! Decoding functions over the shared tree.
//!
//! Each decoder is one step function that expands, rescores, prunes and
//! moves the frontier. The runner calls the configured step until its
//! termination condition holds.

mod asap;
mod beam;
mod expand;
mod mcts;
mod rollout;
mod sampling;
mod smc;

pub use asap::{asap_step, efg_recurrence};
pub use beam::beam_step;
pub use expand::{expand, expand_with_distribution, select_candidates};
pub use mcts::{mcts_step, puct_score};
pub use rollout::{probability_weights, rollout, LeafKind, RolloutLeaf};
pub use sampling::sampling_step;
pub use smc::{normalized_ess, smc_step, SmcReport};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::Constraint;
use crate::error::DecodeError;
use crate::lm::{LanguageModel, TokenId};
use crate::tree::DecodingTree;

/// How candidate tokens are picked from a next-token distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// The `j` most likely tokens, ties to the lower token id.
    Greedy,
    /// `j` draws without replacement.
    Stochastic,
}

/// Candidate selection for one expansion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpansionMode {
    pub selection: Selection,
    pub sample_count: usize,
    /// Tokens always evaluated, whatever their probability.
    pub allow_list: Vec<TokenId>,
}

impl ExpansionMode {
    pub fn greedy(j: usize) -> Self {
        Self {
            selection: Selection::Greedy,
            sample_count: j,
            allow_list: Vec::new(),
        }
    }

    pub fn stochastic(j: usize) -> Self {
        Self {
            selection: Selection::Stochastic,
            sample_count: j,
            allow_list: Vec::new(),
        }
    }

    pub fn with_allow_list(mut self, allow_list: Vec<TokenId>) -> Self {
        self.allow_list = allow_list;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    BeamSearch,
    Sampling,
    Smc,
    Mcts,
    Asap,
}

impl DecoderKind {
    pub const ALL: [DecoderKind; 5] = [
        DecoderKind::BeamSearch,
        DecoderKind::Sampling,
        DecoderKind::Smc,
        DecoderKind::Mcts,
        DecoderKind::Asap,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DecoderKind::BeamSearch => "beam_search",
            DecoderKind::Sampling => "sampling",
            DecoderKind::Smc => "smc",
            DecoderKind::Mcts => "mcts",
            DecoderKind::Asap => "asap",
        }
    }

    /// Selection used when the configuration does not override it.
    pub fn default_selection(self) -> Selection {
        match self {
            DecoderKind::BeamSearch | DecoderKind::Mcts => Selection::Greedy,
            DecoderKind::Sampling | DecoderKind::Smc | DecoderKind::Asap => Selection::Stochastic,
        }
    }
}

pub const DEFAULT_PUCT_C: f64 = 1.0;
pub const DEFAULT_ESS_THRESHOLD: f64 = 0.6;
pub const DEFAULT_ROLLOUT_MAX_LEN: usize = 256;

/// A complete decoder configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    /// Population size.
    pub k: usize,
    /// Candidates per expansion. `None` uses the decoder's own rule: `k` for
    /// beam search and MCTS, `ceil(k / |active|)` for sampling, 1 for SMC and
    /// the whole vocabulary for ASAp.
    pub j: Option<usize>,
    pub selection: Option<Selection>,
    pub puct_c: f64,
    pub ess_threshold: f64,
    pub rollout_max_len: usize,
    pub allow_list: Vec<TokenId>,
}

impl DecoderConfig {
    pub fn new(kind: DecoderKind, k: usize) -> Self {
        Self {
            kind,
            k,
            j: None,
            selection: None,
            puct_c: DEFAULT_PUCT_C,
            ess_threshold: DEFAULT_ESS_THRESHOLD,
            rollout_max_len: DEFAULT_ROLLOUT_MAX_LEN,
            allow_list: Vec::new(),
        }
    }

    pub fn with_j(mut self, j: usize) -> Self {
        self.j = Some(j);
        self
    }

    pub fn validate(&self, vocab_size: usize) -> Result<(), DecodeError> {
        let fail = |m: String| Err(DecodeError::Config(m));
        if self.k == 0 {
            return fail("k must be at least 1".into());
        }
        if self.j == Some(0) {
            return fail("j must be at least 1".into());
        }
        if !(self.puct_c > 0.0 && self.puct_c.is_finite()) {
            return fail(format!("puct_c must be positive, got {}", self.puct_c));
        }
        if !(self.ess_threshold > 0.0 && self.ess_threshold <= 1.0) {
            return fail(format!(
                "ess_threshold must be in (0, 1], got {}",
                self.ess_threshold
            ));
        }
        if self.rollout_max_len == 0 {
            return fail("rollout_max_len must be at least 1".into());
        }
        if let Some(&t) = self.allow_list.iter().find(|&&t| t >= vocab_size) {
            return fail(format!("allow_list token id {t} is outside the vocabulary"));
        }
        Ok(())
    }

    fn selection(&self) -> Selection {
        self.selection.unwrap_or(self.kind.default_selection())
    }

    fn mode(&self, default_j: usize) -> ExpansionMode {
        ExpansionMode {
            selection: self.selection(),
            sample_count: self.j.unwrap_or(default_j),
            allow_list: self.allow_list.clone(),
        }
    }
}

/// The language model and composite constraint a decoder works against.
#[derive(Clone, Copy)]
pub struct Model<'a> {
    pub lm: &'a dyn LanguageModel,
    pub constraint: &'a dyn Constraint,
    /// Resume LM queries from the state cached on the parent node.
    pub use_lm_cache: bool,
    /// Drop cached LM state from non-active nodes after each step.
    pub prune_cache: bool,
}

impl<'a> Model<'a> {
    pub fn new(lm: &'a dyn LanguageModel, constraint: &'a dyn Constraint) -> Self {
        Self {
            lm,
            constraint,
            use_lm_cache: true,
            prune_cache: true,
        }
    }
}

/// Runs one step of the configured decoder.
pub fn step<R: Rng + ?Sized>(
    tree: &mut DecodingTree,
    model: &Model<'_>,
    config: &DecoderConfig,
    rng: &mut R,
) -> Result<(), DecodeError> {
    match config.kind {
        DecoderKind::BeamSearch => beam_step(tree, model, config, rng),
        DecoderKind::Sampling => sampling_step(tree, model, config, rng),
        DecoderKind::Smc => smc_step(tree, model, config, rng).map(|_| ()),
        DecoderKind::Mcts => mcts_step(tree, model, config, rng).map(|_| ()),
        DecoderKind::Asap => asap_step(tree, model, config, rng).map(|_| ()),
    }
}
