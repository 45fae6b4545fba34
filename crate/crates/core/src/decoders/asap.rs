use rand::Rng;

use super::mcts::{blocked, mark_exhausted};
use super::rollout::{rollout, LeafKind, RolloutLeaf};
use super::{DecoderConfig, Model};
use crate::error::DecodeError;
use crate::tree::{DecodingTree, NodeId, NodeStatus};

/// `sum(weight * efg)` over children given as `(weight, efg)` pairs, where
/// the weights are the children's conditional probabilities.
pub fn efg_recurrence(children: &[(f64, f64)]) -> f64 {
    children
        .iter()
        .map(|(w, e)| w * e)
        .sum::<f64>()
        .clamp(0.0, 1.0)
}

/// Expected future grammaticality of an expanded node: the chance that a
/// continuation drawn from the LM, restricted to the node's candidate
/// tokens, ends up satisfying the constraints.
fn node_efg(tree: &DecodingTree, id: NodeId) -> f64 {
    let children = tree.nodes()[id.0].children();
    let mass: f64 = children.iter().map(|&c| tree.nodes()[c.0].lm_prob).sum();
    if mass <= 0.0 {
        return 0.0;
    }
    let terms: Vec<(f64, f64)> = children
        .iter()
        .map(|&c| {
            let n = &tree.nodes()[c.0];
            (n.lm_prob * n.phi / mass, n.efg)
        })
        .collect();
    efg_recurrence(&terms)
}

/// One rollout from the root, choosing children in proportion to
/// `probability * efg`, then recomputing EFG bottom-up along the lineage.
/// Truncated and dead-end leaves get EFG 0; Complete leaves keep 1.
///
/// Stationary like MCTS: the root stays the only Active node.
pub fn asap_step<R: Rng + ?Sized>(
    tree: &mut DecodingTree,
    model: &Model<'_>,
    config: &DecoderConfig,
    rng: &mut R,
) -> Result<RolloutLeaf, DecodeError> {
    let root = tree.root();
    let mode = config.mode(model.lm.vocab().len());
    let leaf = rollout(
        tree,
        root,
        model,
        &mode,
        config.rollout_max_len,
        rng,
        |t, _parent, children| {
            children
                .iter()
                .map(|&c| t.nodes()[c.0].probability * t.nodes()[c.0].efg)
                .collect()
        },
    )?;

    let path = tree.lineage(leaf.node)?;
    let (&last, ancestors) = path.split_last().expect("lineage is never empty");
    if leaf.kind != LeafKind::Finished {
        tree.node_mut(last)?.efg = 0.0;
    }
    for &id in ancestors.iter().rev() {
        let efg = node_efg(tree, id);
        tree.node_mut(id)?.efg = efg;
    }
    mark_exhausted(tree, &path)?;

    tree.deactivate_all();
    if !blocked(tree) {
        tree.set_status(root, NodeStatus::Active)?;
    }
    if model.prune_cache {
        tree.prune_lm_cache();
    }
    Ok(leaf)
}
