use rand::Rng;

use super::{expand, DecoderConfig, Model};
use crate::error::DecodeError;
use crate::tree::{DecodingTree, NodeStatus};

/// Expands each active node with `j = ceil(k / |active|)` sampled
/// candidates. Every unfinished child with positive score becomes Active.
pub fn sampling_step<R: Rng + ?Sized>(
    tree: &mut DecodingTree,
    model: &Model<'_>,
    config: &DecoderConfig,
    rng: &mut R,
) -> Result<(), DecodeError> {
    let frontier: Vec<_> = tree.active_nodes().iter().copied().collect();
    if frontier.is_empty() {
        return Ok(());
    }
    let mode = config.mode(config.k.div_ceil(frontier.len()));
    for id in expand(tree, &frontier, model, &mode, rng)? {
        let node = tree.node(id)?;
        if node.score() > 0.0 && node.status() == NodeStatus::Inactive {
            tree.set_status(id, NodeStatus::Active)?;
        }
    }
    if model.prune_cache {
        tree.prune_lm_cache();
    }
    Ok(())
}
