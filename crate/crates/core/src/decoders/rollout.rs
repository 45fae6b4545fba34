use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use super::{expand, ExpansionMode, Model};
use crate::error::DecodeError;
use crate::tree::{DecodingTree, NodeId, NodeStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    /// Reached a Complete node.
    Finished,
    /// Hit the length cap without EOS.
    Truncated,
    /// Every child of the leaf has zero weight.
    Blocked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RolloutLeaf {
    pub node: NodeId,
    pub kind: LeafKind,
}

/// Walks down from `start`, one child at a time, until a Complete node,
/// the length cap or a dead end.
///
/// Nodes without children are expanded with `mode` on first visit; later
/// visits reuse the existing children. `weights` scores the children of a
/// node and the next node is drawn in proportion; an all-zero score vector
/// is a dead end. Cached LM state is pruned after every expansion.
pub fn rollout<R, W>(
    tree: &mut DecodingTree,
    start: NodeId,
    model: &Model<'_>,
    mode: &ExpansionMode,
    max_len: usize,
    rng: &mut R,
    mut weights: W,
) -> Result<RolloutLeaf, DecodeError>
where
    R: Rng + ?Sized,
    W: FnMut(&DecodingTree, NodeId, &[NodeId]) -> Vec<f64>,
{
    let mut current = start;
    let leaf = loop {
        let node = tree.node(current)?;
        match node.status() {
            NodeStatus::Complete => break (current, LeafKind::Finished),
            NodeStatus::Terminal => break (current, LeafKind::Blocked),
            _ => {}
        }
        if node.tokens().len() - tree.prompt_len() >= max_len {
            tree.node_mut(current)?.truncated = true;
            break (current, LeafKind::Truncated);
        }
        if !node.expanded {
            tree.set_status(current, NodeStatus::Active)?;
            expand(tree, &[current], model, mode, rng)?;
        }
        let children: Vec<NodeId> = tree
            .node(current)?
            .children()
            .iter()
            .copied()
            .filter(|&c| tree.nodes()[c.0].status() != NodeStatus::Terminal)
            .collect();
        let scores = weights(tree, current, &children);
        let Ok(picker) = WeightedIndex::new(&scores) else {
            break (current, LeafKind::Blocked);
        };
        let next = children[picker.sample(rng)];
        if !tree.node(next)?.expanded && tree.node(next)?.status() == NodeStatus::Inactive {
            tree.set_status(next, NodeStatus::Active)?;
        }
        if model.prune_cache {
            tree.prune_lm_cache();
        }
        current = next;
    };
    if tree.node(leaf.0)?.status() == NodeStatus::Active {
        tree.set_status(leaf.0, NodeStatus::Inactive)?;
    }
    Ok(RolloutLeaf {
        node: leaf.0,
        kind: leaf.1,
    })
}

/// Child weights equal to their probabilities.
pub fn probability_weights(tree: &DecodingTree, _parent: NodeId, children: &[NodeId]) -> Vec<f64> {
    children
        .iter()
        .map(|&c| tree.nodes()[c.0].probability)
        .collect()
}
