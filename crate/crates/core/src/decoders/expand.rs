use rand::seq::SliceRandom;
use rand::Rng;

use super::{ExpansionMode, Model, Selection};
use crate::constraints::EvalInput;
use crate::error::DecodeError;
use crate::lm::{LmState, TokenDistribution, TokenId};
use crate::tree::{DecodingTree, NodeId, NodeStatus, TreeError};

/// Candidate tokens for one expansion, sorted by token id.
///
/// Only tokens with positive probability are selected; allow-listed tokens
/// are added regardless. When `sample_count` covers the whole support the
/// support is returned without consuming randomness.
pub fn select_candidates<R: Rng + ?Sized>(
    dist: &TokenDistribution,
    mode: &ExpansionMode,
    rng: &mut R,
) -> Vec<TokenId> {
    let probs = dist.probabilities();
    let support: Vec<TokenId> = (0..probs.len()).filter(|&t| probs[t] > 0.0).collect();
    let mut picked = if mode.sample_count >= support.len() {
        support
    } else {
        match mode.selection {
            Selection::Greedy => {
                let mut ranked = support;
                ranked.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
                ranked.truncate(mode.sample_count);
                ranked
            }
            Selection::Stochastic => support
                .choose_multiple_weighted(rng, mode.sample_count, |&t| probs[t])
                .expect("support weights are positive and finite")
                .copied()
                .collect(),
        }
    };
    picked.extend(mode.allow_list.iter().copied().filter(|&t| t < probs.len()));
    picked.sort_unstable();
    picked.dedup();
    picked
}

/// Expands every node in `nodes` (all must be Active). Returns the new
/// children in creation order.
///
/// Each child gets `raw_weight = p_parent * p(t|x) * phi(x t)` and a
/// probability normalized over the evaluated candidates. Children with zero
/// weight are Terminal, finished children with positive weight are
/// Complete, the rest are Inactive. Expanded nodes become Inactive.
pub fn expand<R: Rng + ?Sized>(
    tree: &mut DecodingTree,
    nodes: &[NodeId],
    model: &Model<'_>,
    mode: &ExpansionMode,
    rng: &mut R,
) -> Result<Vec<NodeId>, DecodeError> {
    for &id in nodes {
        let status = tree.node(id)?.status();
        if status != NodeStatus::Active {
            return Err(TreeError::contract(
                id,
                format!("cannot expand a {} node", status.as_str()),
            )
            .into());
        }
    }
    let answers = query_lm(tree, nodes, model)?;
    let mut created = Vec::new();
    for (&id, (dist, state)) in nodes.iter().zip(answers) {
        let candidates = select_candidates(&dist, mode, rng);
        created.extend(expand_with_distribution(
            tree,
            id,
            &dist,
            &state,
            model,
            &candidates,
        )?);
    }
    Ok(created)
}

/// One batched LM query per node; each counts as one expansion.
pub(crate) fn query_lm(
    tree: &mut DecodingTree,
    nodes: &[NodeId],
    model: &Model<'_>,
) -> Result<Vec<(TokenDistribution, LmState)>, DecodeError> {
    let answers = {
        let queries = nodes
            .iter()
            .map(|&id| {
                let node = tree.node(id)?;
                let cache = if model.use_lm_cache {
                    node.lm_cache.as_ref()
                } else {
                    None
                };
                Ok((node.tokens(), cache))
            })
            .collect::<Result<Vec<_>, TreeError>>()?;
        model.lm.batch_next_distribution(&queries)?
    };
    for _ in nodes {
        tree.record_expansion();
    }
    Ok(answers)
}

/// Creates children of `id` for `candidates` given an already computed
/// next-token distribution. Does not count an expansion.
pub fn expand_with_distribution(
    tree: &mut DecodingTree,
    id: NodeId,
    dist: &TokenDistribution,
    lm_state: &LmState,
    model: &Model<'_>,
    candidates: &[TokenId],
) -> Result<Vec<NodeId>, DecodeError> {
    let (parent_prob, tokens, prior) = {
        let node = tree.node(id)?;
        (
            node.probability,
            node.tokens().to_vec(),
            node.constraint_state.clone(),
        )
    };
    let eos = tree.eos();
    let prompt_len = tree.prompt_len();

    let mut scored = Vec::with_capacity(candidates.len());
    let mut normalizer = 0.0;
    let mut seq = tokens;
    for &t in candidates {
        seq.push(t);
        let input = EvalInput::new(&seq, prompt_len, t == eos);
        let outcome = model.constraint.evaluate(&input, &prior)?;
        seq.pop();
        let weight = dist.prob(t) * outcome.score;
        normalizer += weight;
        scored.push((t, outcome, weight));
    }

    // When every token the LM can emit was evaluated, the normalizer is one
    // minus the vetoed mass; computing it that way keeps unconstrained
    // children exactly equal to the LM conditionals.
    let mut evaluated = vec![false; dist.len()];
    for &t in candidates {
        evaluated[t] = true;
    }
    let covers_support = dist
        .probabilities()
        .iter()
        .zip(&evaluated)
        .all(|(&p, &e)| p <= 0.0 || e);
    if covers_support && normalizer > 0.0 {
        let vetoed: f64 = scored
            .iter()
            .map(|(t, outcome, _)| dist.prob(*t) * (1.0 - outcome.score))
            .sum();
        if vetoed < 1.0 {
            normalizer = 1.0 - vetoed;
        }
    }

    let mut children = Vec::with_capacity(scored.len());
    for (t, outcome, weight) in scored {
        let probability = if normalizer > 0.0 {
            parent_prob * weight / normalizer
        } else {
            0.0
        };
        let child = tree.add_child(id, t, probability, parent_prob * weight, outcome.state)?;
        let node = tree.node_mut(child)?;
        node.lm_prob = dist.prob(t);
        node.phi = outcome.score;
        if model.use_lm_cache {
            node.lm_cache = Some(lm_state.clone());
        }
        if probability <= 0.0 {
            tree.set_score(child, 0.0)?;
            tree.set_status(child, NodeStatus::Terminal)?;
        } else if t == eos {
            tree.set_status(child, NodeStatus::Complete)?;
        }
        children.push(child);
    }
    tree.set_status(id, NodeStatus::Inactive)?;
    tree.node_mut(id)?.expanded = true;
    Ok(children)
}
