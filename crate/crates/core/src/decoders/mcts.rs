use rand::Rng;

use super::rollout::{rollout, LeafKind, RolloutLeaf};
use super::{DecoderConfig, Model};
use crate::error::DecodeError;
use crate::tree::{DecodingTree, NodeId, NodeStatus};

/// `wins / max(1, playouts) + c * prior * sqrt(parent_playouts) / (1 + playouts)`.
pub fn puct_score(wins: u64, playouts: u64, prior: f64, parent_playouts: u64, c: f64) -> f64 {
    wins as f64 / playouts.max(1) as f64
        + c * prior * (parent_playouts as f64).sqrt() / (1 + playouts) as f64
}

/// Conditional probability of `child` given its parent.
fn prior(tree: &DecodingTree, parent: NodeId, child: NodeId) -> f64 {
    let p = tree.nodes()[parent.0].probability;
    if p > 0.0 {
        tree.nodes()[child.0].probability / p
    } else {
        0.0
    }
}

fn node_puct(tree: &DecodingTree, parent: NodeId, child: NodeId, c: f64) -> f64 {
    let n = &tree.nodes()[child.0];
    puct_score(
        n.wins,
        n.playouts,
        prior(tree, parent, child),
        tree.nodes()[parent.0].playouts,
        c,
    )
}

/// One rollout from the root, choosing children in proportion to their
/// PUCT scores (by probability while every score is zero), followed by
/// backpropagation along the leaf's lineage. A rollout wins when it ends
/// in a Complete node.
///
/// The tree is stationary: afterwards the root is the only Active node.
/// Rollouts continue on a fully explored tree and revisit its leaves,
/// unless it holds no Complete node, which blocks the frontier.
pub fn mcts_step<R: Rng + ?Sized>(
    tree: &mut DecodingTree,
    model: &Model<'_>,
    config: &DecoderConfig,
    rng: &mut R,
) -> Result<RolloutLeaf, DecodeError> {
    let root = tree.root();
    let c = config.puct_c;
    let mode = config.mode(config.k);
    let leaf = rollout(
        tree,
        root,
        model,
        &mode,
        config.rollout_max_len,
        rng,
        |t, parent, children| {
            let scores: Vec<f64> = children
                .iter()
                .map(|&ch| node_puct(t, parent, ch, c))
                .collect();
            if scores.iter().any(|&s| s > 0.0) {
                scores
            } else {
                children
                    .iter()
                    .map(|&ch| t.nodes()[ch.0].probability)
                    .collect()
            }
        },
    )?;

    let win = leaf.kind == LeafKind::Finished;
    let path = tree.lineage(leaf.node)?;
    for &id in &path {
        let node = tree.node_mut(id)?;
        node.playouts += 1;
        node.wins += u64::from(win);
    }
    for pair in path.windows(2) {
        let score = node_puct(tree, pair[0], pair[1], c);
        tree.set_score(pair[1], score)?;
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

/// Whether the whole tree is explored without a single valid completion.
pub(crate) fn blocked(tree: &DecodingTree) -> bool {
    tree.nodes()[tree.root().0].exhausted && tree.complete_nodes().is_empty()
}

/// A leaf is exhausted once reached; an expanded node once all its
/// non-terminal children are.
pub(crate) fn mark_exhausted(tree: &mut DecodingTree, path: &[NodeId]) -> Result<(), DecodeError> {
    let Some((&leaf, ancestors)) = path.split_last() else {
        return Ok(());
    };
    tree.node_mut(leaf)?.exhausted = true;
    for &id in ancestors.iter().rev() {
        let node = tree.node(id)?;
        let done = node.expanded
            && node.children().iter().all(|&c| {
                let ch = &tree.nodes()[c.0];
                ch.exhausted || ch.status() == NodeStatus::Terminal
            });
        if !done {
            break;
        }
        tree.node_mut(id)?.exhausted = true;
    }
    Ok(())
}
