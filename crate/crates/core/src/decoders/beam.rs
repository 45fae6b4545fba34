use rand::Rng;

use super::{expand, DecoderConfig, Model};
use crate::error::DecodeError;
use crate::tree::{DecodingTree, NodeStatus};

/// Expands every active node with `j = k` candidates (greedy by default)
/// and keeps the `k` best new children by score across the whole
/// frontier. Selected unfinished children become Active; selected finished
/// ones stay Complete and hold their slot.
pub fn beam_step<R: Rng + ?Sized>(
    tree: &mut DecodingTree,
    model: &Model<'_>,
    config: &DecoderConfig,
    rng: &mut R,
) -> Result<(), DecodeError> {
    let frontier: Vec<_> = tree.active_nodes().iter().copied().collect();
    if frontier.is_empty() {
        return Ok(());
    }
    let mode = config.mode(config.k);
    let children = expand(tree, &frontier, model, &mode, rng)?;

    let mut ranked: Vec<_> = children
        .into_iter()
        .filter(|&c| tree.nodes()[c.0].score() > 0.0)
        .collect();
    ranked.sort_by(|&a, &b| {
        let (na, nb) = (&tree.nodes()[a.0], &tree.nodes()[b.0]);
        nb.score().total_cmp(&na.score()).then(a.cmp(&b))
    });
    ranked.truncate(config.k);
    for id in ranked {
        if tree.node(id)?.status() != NodeStatus::Complete {
            tree.set_status(id, NodeStatus::Active)?;
        }
    }
    if model.prune_cache {
        tree.prune_lm_cache();
    }
    Ok(())
}
