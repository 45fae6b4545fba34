use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use super::expand::{query_lm, select_candidates};
use super::{expand_with_distribution, DecoderConfig, ExpansionMode, Model};
use crate::error::DecodeError;
use crate::tree::{DecodingTree, NodeId, NodeStatus};

/// Outcome of one SMC step.
#[derive(Debug, Clone, PartialEq)]
pub struct SmcReport {
    /// Normalized effective sample size of the new weights.
    pub ess: f64,
    pub resampled: bool,
    /// Active particles after the step.
    pub population: usize,
}

/// `(sum w)^2 / (n * sum w^2)`, in `(0, 1]` for nonzero weights and 0 when
/// every weight is zero.
pub fn normalized_ess(weights: &[f64]) -> f64 {
    let sum: f64 = weights.iter().sum();
    let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
    if sum_sq == 0.0 {
        return 0.0;
    }
    sum * sum / (weights.len() as f64 * sum_sq)
}

/// Advances each of the `k` particles by one sampled token.
///
/// A particle's weight is multiplied by 1 if its new token keeps a
/// positive constrained probability and by 0 otherwise. When the
/// normalized ESS drops to `ess_threshold` or below, `k` particles are
/// redrawn in proportion to their weights and all weights are set to the
/// mean. Otherwise slots freed by dead or finished particles are refilled
/// the same way, so the population stays at `k` while any unfinished
/// particle survives. Repeated draws of one node become sibling copies.
pub fn smc_step<R: Rng + ?Sized>(
    tree: &mut DecodingTree,
    model: &Model<'_>,
    config: &DecoderConfig,
    rng: &mut R,
) -> Result<SmcReport, DecodeError> {
    let frontier: Vec<NodeId> = tree.active_nodes().iter().copied().collect();
    if frontier.is_empty() {
        return Ok(SmcReport {
            ess: 0.0,
            resampled: false,
            population: 0,
        });
    }
    let k = config.k;
    let particles: Vec<NodeId> = (0..k).map(|i| frontier[i % frontier.len()]).collect();
    let answers = query_lm(tree, &frontier, model)?;
    let mode = ExpansionMode {
        selection: config.selection(),
        sample_count: 1,
        allow_list: Vec::new(),
    };

    let mut children = Vec::with_capacity(k);
    for &parent in &particles {
        let slot = frontier
            .binary_search(&parent)
            .expect("particle is on the frontier");
        let (dist, state) = &answers[slot];
        let token = select_candidates(dist, &mode, rng);
        let child = expand_with_distribution(tree, parent, dist, state, model, &token)?[0];
        let alive = tree.node(child)?.probability > 0.0;
        let weight = if alive {
            tree.node(parent)?.score()
        } else {
            0.0
        };
        tree.set_score(child, weight)?;
        children.push(child);
    }

    let weights: Vec<f64> = children
        .iter()
        .map(|&c| tree.nodes()[c.0].score())
        .collect();
    let ess = normalized_ess(&weights);
    let total: f64 = weights.iter().sum();
    let live: Vec<NodeId> = children
        .iter()
        .copied()
        .filter(|&c| {
            let n = &tree.nodes()[c.0];
            n.score() > 0.0 && n.status() == NodeStatus::Inactive
        })
        .collect();
    let resampled = ess <= config.ess_threshold && !live.is_empty();

    let mut next: Vec<NodeId> = Vec::with_capacity(k);
    if !live.is_empty() {
        let live_weights: Vec<f64> = live.iter().map(|&c| tree.nodes()[c.0].score()).collect();
        let picker = WeightedIndex::new(&live_weights).expect("live weights are positive");
        if resampled {
            next.extend((0..k).map(|_| live[picker.sample(rng)]));
        } else {
            next.extend(live.iter().copied());
            while next.len() < k {
                next.push(live[picker.sample(rng)]);
            }
        }
    }
    next.sort();

    let mean = total / k as f64;
    let mut previous = None;
    for id in next {
        let target = if previous == Some(id) {
            copy_sibling(tree, id)?
        } else {
            id
        };
        previous = Some(id);
        if resampled {
            tree.set_score(target, mean)?;
        }
        tree.set_status(target, NodeStatus::Active)?;
    }
    if model.prune_cache {
        tree.prune_lm_cache();
    }
    Ok(SmcReport {
        ess,
        resampled,
        population: tree.active_nodes().len(),
    })
}

/// A new sibling of `id` carrying the same sequence and statistics.
fn copy_sibling(tree: &mut DecodingTree, id: NodeId) -> Result<NodeId, DecodeError> {
    let src = tree.node(id)?.clone();
    let parent = src.parent().expect("particles are never the root");
    let token = src.last_token().expect("non-root nodes have a token");
    let copy = tree.add_child(
        parent,
        token,
        src.probability,
        src.raw_weight,
        src.constraint_state.clone(),
    )?;
    tree.set_score(copy, src.score())?;
    let node = tree.node_mut(copy)?;
    node.lm_prob = src.lm_prob;
    node.phi = src.phi;
    node.lm_cache = src.lm_cache;
    Ok(copy)
}
