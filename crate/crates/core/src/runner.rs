//! The decode loop: repeat a decoder step until the termination condition
//! holds, then rank the tree's leaves.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoders::{step, DecoderConfig, Model};
use crate::error::DecodeError;
use crate::lm::{TokenId, Vocabulary};
use crate::tree::{DecodingTree, NodeId, NodeStatus};

/// When to stop decoding. Limits are checked between steps only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerminationPolicy {
    pub min_complete: usize,
    /// Cap on created nodes.
    pub max_nodes: usize,
    /// Cap on generated tokens in any node.
    pub max_seq_len: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_limit_ms: Option<u64>,
    /// Cap on LM queries.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_expansions: Option<u64>,
}

impl Default for TerminationPolicy {
    fn default() -> Self {
        Self {
            min_complete: 5,
            max_nodes: 10_000,
            max_seq_len: 256,
            time_limit_ms: None,
            max_expansions: None,
        }
    }
}

impl TerminationPolicy {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.min_complete == 0 || self.max_nodes == 0 || self.max_seq_len == 0 {
            return Err(DecodeError::Config(
                "termination limits must be positive".into(),
            ));
        }
        if self.max_expansions == Some(0) {
            return Err(DecodeError::Config(
                "max_expansions must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregationPolicy {
    pub top_n: usize,
}

impl Default for AggregationPolicy {
    fn default() -> Self {
        Self { top_n: 5 }
    }
}

impl AggregationPolicy {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.top_n == 0 {
            return Err(DecodeError::Config("top_n must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    MinComplete,
    MaxNodes,
    NoActiveNodes,
    MaxSeqLen,
    TimeLimit,
    MaxExpansions,
    /// A stationary decoder has explored every branch.
    Exhausted,
}

impl TerminationReason {
    pub fn as_str(self) -> &'static str {
        match self {
            TerminationReason::MinComplete => "min_complete",
            TerminationReason::MaxNodes => "max_nodes",
            TerminationReason::NoActiveNodes => "no_active_nodes",
            TerminationReason::MaxSeqLen => "max_seq_len",
            TerminationReason::TimeLimit => "time_limit",
            TerminationReason::MaxExpansions => "max_expansions",
            TerminationReason::Exhausted => "exhausted",
        }
    }
}

/// The termination condition. Returns the first disjunct that holds, in
/// the order: complete count, node count, empty frontier, sequence length,
/// time, expansions, exhausted search.
pub fn rho(
    tree: &DecodingTree,
    policy: &TerminationPolicy,
    elapsed: Duration,
) -> Option<TerminationReason> {
    if tree.complete_nodes().len() >= policy.min_complete {
        Some(TerminationReason::MinComplete)
    } else if tree.len() >= policy.max_nodes {
        Some(TerminationReason::MaxNodes)
    } else if tree.active_nodes().is_empty() {
        Some(TerminationReason::NoActiveNodes)
    } else if tree.max_generated_len() >= policy.max_seq_len {
        Some(TerminationReason::MaxSeqLen)
    } else if policy
        .time_limit_ms
        .is_some_and(|ms| elapsed >= Duration::from_millis(ms))
    {
        Some(TerminationReason::TimeLimit)
    } else if policy
        .max_expansions
        .is_some_and(|cap| tree.expansion_count() >= cap)
    {
        Some(TerminationReason::MaxExpansions)
    } else if tree.nodes()[tree.root().0].exhausted {
        Some(TerminationReason::Exhausted)
    } else {
        None
    }
}

/// Preference tier of a node, or `None` for internal nodes.
///
/// 1. Complete.
/// 2. Finished but violating (Terminal ending in EOS) or cut at the length cap.
/// 3. Unfinished leaves, Active before Inactive.
/// 4. Terminal leaves that never finished.
pub fn tier(tree: &DecodingTree, id: NodeId) -> Option<u8> {
    let node = &tree.nodes()[id.0];
    let ends_with_eos =
        node.tokens().len() > tree.prompt_len() && node.last_token() == Some(tree.eos());
    match node.status() {
        NodeStatus::Complete => Some(1),
        NodeStatus::Terminal if ends_with_eos => Some(2),
        _ if node.truncated => Some(2),
        _ if !node.is_leaf() => None,
        NodeStatus::Active | NodeStatus::Inactive => Some(3),
        NodeStatus::Terminal => Some(4),
    }
}

/// Up to `top_n` distinct sequences ordered by tier, then Active before
/// Inactive, then descending probability, then creation order.
pub fn aggregate(tree: &DecodingTree, policy: &AggregationPolicy) -> Vec<NodeId> {
    let mut ranked: Vec<(u8, bool, NodeId)> = tree
        .nodes()
        .iter()
        .filter_map(|n| tier(tree, n.id()).map(|t| (t, n.status() != NodeStatus::Active, n.id())))
        .collect();
    ranked.sort_by(|a, b| {
        let (pa, pb) = (
            tree.nodes()[a.2 .0].probability,
            tree.nodes()[b.2 .0].probability,
        );
        (a.0, a.1)
            .cmp(&(b.0, b.1))
            .then(pb.total_cmp(&pa))
            .then(a.2.cmp(&b.2))
    });
    let mut seen = std::collections::HashSet::new();
    ranked
        .into_iter()
        .map(|(_, _, id)| id)
        .filter(|&id| seen.insert(tree.nodes()[id.0].tokens()))
        .take(policy.top_n)
        .collect()
}

/// One returned sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedSequence {
    pub node: NodeId,
    pub tier: u8,
    /// Generated tokens, EOS included when present.
    pub tokens: Vec<TokenId>,
    pub probability: f64,
    pub score: f64,
    pub status: NodeStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub sequences: Vec<RankedSequence>,
    pub expansion_count: u64,
    pub elapsed: Duration,
    pub termination_reason: TerminationReason,
    pub seed: u64,
    pub steps: usize,
}

impl DecodeResult {
    /// Whether the best sequence is Complete.
    pub fn has_complete(&self) -> bool {
        self.sequences.first().is_some_and(|s| s.tier == 1)
    }

    /// Output records. `elapsed_ms` is filled only when `timing` is set, so
    /// that seeded runs serialize identically.
    pub fn records(&self, vocab: &Vocabulary, timing: bool) -> Vec<ResultRecord> {
        self.sequences
            .iter()
            .enumerate()
            .map(|(i, s)| ResultRecord {
                rank: i + 1,
                tokens: s
                    .tokens
                    .iter()
                    .map(|&t| vocab.tokens()[t].clone())
                    .collect(),
                text: vocab.decode(&s.tokens),
                probability: s.probability,
                score: s.score,
                status: s.status.as_str().to_string(),
                termination_reason: self.termination_reason.as_str().to_string(),
                expansions: self.expansion_count,
                elapsed_ms: timing.then_some(self.elapsed.as_secs_f64() * 1000.0),
                seed: self.seed,
            })
            .collect()
    }
}

/// One line of decode (or oracle) output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub rank: usize,
    pub tokens: Vec<String>,
    pub text: String,
    pub probability: f64,
    pub score: f64,
    pub status: String,
    pub termination_reason: String,
    pub expansions: u64,
    pub elapsed_ms: Option<f64>,
    pub seed: u64,
}

/// Everything a run needs besides the model and the prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub decoder: DecoderConfig,
    pub termination: TerminationPolicy,
    pub aggregation: AggregationPolicy,
}

impl RunConfig {
    pub fn new(decoder: DecoderConfig) -> Self {
        Self {
            decoder,
            termination: TerminationPolicy::default(),
            aggregation: AggregationPolicy::default(),
        }
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<(), DecodeError> {
        self.decoder.validate(vocab.len())?;
        self.termination.validate()?;
        self.aggregation.validate()
    }
}

/// Decodes from `prompt`; deterministic for a given seed.
pub fn run(
    model: &Model<'_>,
    config: &RunConfig,
    prompt: &[TokenId],
    seed: u64,
) -> Result<DecodeResult, DecodeError> {
    run_with_tree(model, config, prompt, seed).map(|(result, _)| result)
}

/// As [`run`], also returning the final tree.
pub fn run_with_tree(
    model: &Model<'_>,
    config: &RunConfig,
    prompt: &[TokenId],
    seed: u64,
) -> Result<(DecodeResult, DecodingTree), DecodeError> {
    let vocab = model.lm.vocab();
    config.validate(vocab)?;
    vocab.check(prompt)?;

    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tree = DecodingTree::new(
        vocab.eos(),
        prompt.to_vec(),
        model.constraint.initial_state(),
    );
    // Rollouts never grow past the run's own length cap.
    let mut decoder = config.decoder.clone();
    decoder.rollout_max_len = decoder.rollout_max_len.min(config.termination.max_seq_len);
    let mut steps = 0;
    let reason = loop {
        if let Some(reason) = rho(&tree, &config.termination, start.elapsed()) {
            break reason;
        }
        step(&mut tree, model, &decoder, &mut rng)?;
        steps += 1;
    };

    let sequences = aggregate(&tree, &config.aggregation)
        .into_iter()
        .map(|id| {
            let node = &tree.nodes()[id.0];
            RankedSequence {
                node: id,
                tier: tier(&tree, id).expect("aggregated nodes have a tier"),
                tokens: node.tokens()[tree.prompt_len()..].to_vec(),
                probability: node.probability,
                score: node.score(),
                status: node.status(),
            }
        })
        .collect();
    let result = DecodeResult {
        sequences,
        expansion_count: tree.expansion_count(),
        elapsed: start.elapsed(),
        termination_reason: reason,
        seed,
        steps,
    };
    Ok((result, tree))
}
