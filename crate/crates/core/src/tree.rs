//! Arena-backed decoding tree.
//!
//! Nodes are never removed during a run; pruning is logical (status changes
//! and dropping cached LM state). Status changes go through
//! [`DecodingTree::set_status`] so the active, complete and terminal index
//! sets stay in sync with the nodes.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::ConstraintState;
use crate::lm::{LmState, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Active,
    Inactive,
    Terminal,
    Complete,
}

impl NodeStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeStatus::Active => "active",
            NodeStatus::Inactive => "inactive",
            NodeStatus::Terminal => "terminal",
            NodeStatus::Complete => "complete",
        }
    }

    /// Terminal and Complete nodes never change status again.
    pub fn is_final(self) -> bool {
        matches!(self, NodeStatus::Terminal | NodeStatus::Complete)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {node}: {message}")]
    Contract { node: NodeId, message: String },
}

impl TreeError {
    pub(crate) fn contract(node: NodeId, message: impl Into<String>) -> Self {
        TreeError::Contract {
            node,
            message: message.into(),
        }
    }
}

/// One hypothesis.
#[derive(Debug, Clone)]
pub struct Node {
    id: NodeId,
    tokens: Vec<TokenId>,
    parent: Option<NodeId>,
    children: Vec<NodeId>,
    status: NodeStatus,
    score: f64,
    /// Cumulative sequence probability.
    pub probability: f64,
    /// Unnormalized `p_parent * p(t|x) * phi(x t)`.
    pub raw_weight: f64,
    /// LM conditional of the last token given its parent.
    pub lm_prob: f64,
    /// Constraint score of this sequence.
    pub phi: f64,
    pub constraint_state: ConstraintState,
    pub lm_cache: Option<LmState>,
    pub playouts: u64,
    pub wins: u64,
    pub efg: f64,
    /// Children have been created for this node.
    pub expanded: bool,
    /// Nothing new can be reached through this node.
    pub exhausted: bool,
    /// A rollout stopped here at the length cap.
    pub truncated: bool,
}

impl Node {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn parent(&self) -> Option<NodeId> {
        self.parent
    }

    pub fn children(&self) -> &[NodeId] {
        &self.children
    }

    pub fn status(&self) -> NodeStatus {
        self.status
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    pub fn last_token(&self) -> Option<TokenId> {
        self.tokens.last().copied()
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// Snapshot record of one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: NodeId,
    pub tokens: Vec<TokenId>,
    pub probability: f64,
    pub score: f64,
    pub status: NodeStatus,
    pub parent: Option<NodeId>,
    pub playouts: u64,
    pub wins: u64,
    pub efg: f64,
}

#[derive(Debug, Clone)]
pub struct DecodingTree {
    nodes: Vec<Node>,
    eos: TokenId,
    prompt_len: usize,
    expansion_count: u64,
    active: BTreeSet<NodeId>,
    complete: BTreeSet<NodeId>,
    terminal: BTreeSet<NodeId>,
    max_generated: usize,
}

impl DecodingTree {
    /// A tree holding only an Active root with probability 1 and score 1.
    ///
    /// The root carries the prompt; generated tokens follow it.
    pub fn new(eos: TokenId, prompt: Vec<TokenId>, root_state: ConstraintState) -> Self {
        let prompt_len = prompt.len();
        let root = Node {
            id: NodeId(0),
            tokens: prompt,
            parent: None,
            children: Vec::new(),
            status: NodeStatus::Active,
            score: 1.0,
            probability: 1.0,
            raw_weight: 1.0,
            lm_prob: 1.0,
            phi: 1.0,
            constraint_state: root_state,
            lm_cache: None,
            playouts: 0,
            wins: 0,
            efg: 1.0,
            expanded: false,
            exhausted: false,
            truncated: false,
        };
        Self {
            nodes: vec![root],
            eos,
            prompt_len,
            expansion_count: 0,
            active: BTreeSet::from([NodeId(0)]),
            complete: BTreeSet::new(),
            terminal: BTreeSet::new(),
            max_generated: 0,
        }
    }

    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Result<&Node, TreeError> {
        self.nodes.get(id.0).ok_or(TreeError::UnknownNode(id))
    }

    pub fn node_mut(&mut self, id: NodeId) -> Result<&mut Node, TreeError> {
        self.nodes.get_mut(id.0).ok_or(TreeError::UnknownNode(id))
    }

    /// Tokens after the prompt.
    pub fn generated(&self, id: NodeId) -> Result<&[TokenId], TreeError> {
        Ok(&self.node(id)?.tokens[self.prompt_len..])
    }

    /// Longest generated sequence in the tree.
    pub fn max_generated_len(&self) -> usize {
        self.max_generated
    }

    pub fn expansion_count(&self) -> u64 {
        self.expansion_count
    }

    pub fn record_expansion(&mut self) {
        self.expansion_count += 1;
    }

    pub fn active_nodes(&self) -> &BTreeSet<NodeId> {
        &self.active
    }

    pub fn complete_nodes(&self) -> &BTreeSet<NodeId> {
        &self.complete
    }

    pub fn terminal_nodes(&self) -> &BTreeSet<NodeId> {
        &self.terminal
    }

    fn ends_with_eos(&self, node: &Node) -> bool {
        node.tokens.len() > self.prompt_len && node.last_token() == Some(self.eos)
    }

    /// Appends an Inactive child whose tokens are the parent's plus `token`.
    /// Its score starts equal to `probability`.
    pub fn add_child(
        &mut self,
        parent: NodeId,
        token: TokenId,
        probability: f64,
        raw_weight: f64,
        constraint_state: ConstraintState,
    ) -> Result<NodeId, TreeError> {
        let parent_node = self.node(parent)?;
        if parent_node.status.is_final() {
            return Err(TreeError::contract(
                parent,
                format!("cannot extend a {} node", parent_node.status.as_str()),
            ));
        }
        let id = NodeId(self.nodes.len());
        let mut tokens = Vec::with_capacity(parent_node.tokens.len() + 1);
        tokens.extend_from_slice(&parent_node.tokens);
        tokens.push(token);
        self.max_generated = self.max_generated.max(tokens.len() - self.prompt_len);
        self.nodes.push(Node {
            id,
            tokens,
            parent: Some(parent),
            children: Vec::new(),
            status: NodeStatus::Inactive,
            score: probability,
            probability,
            raw_weight,
            lm_prob: 0.0,
            phi: 0.0,
            constraint_state,
            lm_cache: None,
            playouts: 0,
            wins: 0,
            efg: 1.0,
            expanded: false,
            exhausted: false,
            truncated: false,
        });
        self.nodes[parent.0].children.push(id);
        Ok(id)
    }

    /// Changes a node's status, enforcing the status invariants: Terminal
    /// needs score 0, Complete needs a trailing EOS and positive score,
    /// Active forbids a trailing EOS, and Terminal/Complete are final.
    pub fn set_status(&mut self, id: NodeId, status: NodeStatus) -> Result<(), TreeError> {
        let node = self.node(id)?;
        if node.status == status {
            return Ok(());
        }
        if node.status.is_final() {
            return Err(TreeError::contract(
                id,
                format!("{} nodes cannot change status", node.status.as_str()),
            ));
        }
        match status {
            NodeStatus::Terminal if node.score != 0.0 => {
                return Err(TreeError::contract(id, "terminal nodes must have score 0"));
            }
            NodeStatus::Complete if !self.ends_with_eos(node) => {
                return Err(TreeError::contract(id, "complete nodes must end with EOS"));
            }
            NodeStatus::Complete if node.score <= 0.0 => {
                return Err(TreeError::contract(
                    id,
                    "complete nodes must have positive score",
                ));
            }
            NodeStatus::Active if self.ends_with_eos(node) => {
                return Err(TreeError::contract(
                    id,
                    "a finished sequence cannot be active",
                ));
            }
            _ => {}
        }
        let old = node.status;
        if let Some(set) = self.index_mut(old) {
            set.remove(&id);
        }
        if let Some(set) = self.index_mut(status) {
            set.insert(id);
        }
        self.nodes[id.0].status = status;
        Ok(())
    }

    fn index_mut(&mut self, status: NodeStatus) -> Option<&mut BTreeSet<NodeId>> {
        match status {
            NodeStatus::Active => Some(&mut self.active),
            NodeStatus::Complete => Some(&mut self.complete),
            NodeStatus::Terminal => Some(&mut self.terminal),
            NodeStatus::Inactive => None,
        }
    }

    /// Updates a score. Terminal scores stay 0 and Complete scores stay
    /// positive.
    pub fn set_score(&mut self, id: NodeId, score: f64) -> Result<(), TreeError> {
        let node = self.node_mut(id)?;
        let ok = match node.status {
            NodeStatus::Terminal => score == 0.0,
            NodeStatus::Complete => score > 0.0,
            _ => score >= 0.0,
        };
        if !ok || !score.is_finite() {
            return Err(TreeError::contract(
                id,
                format!(
                    "score {score} not allowed for a {} node",
                    node.status.as_str()
                ),
            ));
        }
        node.score = score;
        Ok(())
    }

    /// Marks every Active node Inactive.
    pub fn deactivate_all(&mut self) {
        for id in std::mem::take(&mut self.active) {
            self.nodes[id.0].status = NodeStatus::Inactive;
        }
    }

    /// Node ids from the root down to `id`.
    pub fn lineage(&self, id: NodeId) -> Result<Vec<NodeId>, TreeError> {
        let mut path = vec![id];
        let mut cur = self.node(id)?;
        while let Some(parent) = cur.parent {
            path.push(parent);
            cur = &self.nodes[parent.0];
        }
        path.reverse();
        Ok(path)
    }

    /// Drops cached LM state from every node that is not Active.
    pub fn prune_lm_cache(&mut self) {
        for node in &mut self.nodes {
            if node.status != NodeStatus::Active {
                node.lm_cache = None;
            }
        }
    }

    pub fn snapshot(&self) -> Vec<NodeRecord> {
        self.nodes
            .iter()
            .map(|n| NodeRecord {
                id: n.id,
                tokens: n.tokens.clone(),
                probability: n.probability,
                score: n.score,
                status: n.status,
                parent: n.parent,
                playouts: n.playouts,
                wins: n.wins,
                efg: n.efg,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EOS: TokenId = 2;

    fn tree() -> DecodingTree {
        DecodingTree::new(EOS, vec![], ConstraintState::initial())
    }

    #[test]
    fn fresh_tree_has_active_root() {
        let t = tree();
        let root = t.node(t.root()).unwrap();
        assert_eq!((root.probability, root.score), (1.0, 1.0));
        assert_eq!(
            t.active_nodes().iter().copied().collect::<Vec<_>>(),
            vec![t.root()]
        );
        assert!(t.complete_nodes().is_empty());
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn children_extend_parent_tokens() {
        let mut t = tree();
        let a = t
            .add_child(t.root(), 0, 0.5, 0.5, ConstraintState::initial())
            .unwrap();
        let ab = t
            .add_child(a, 1, 0.25, 0.25, ConstraintState::initial())
            .unwrap();
        assert_eq!(t.node(ab).unwrap().tokens(), &[0, 1]);
        assert_eq!(t.node(ab).unwrap().probability, 0.25);
        for tok in 0..3 {
            t.add_child(ab, tok, 0.1, 0.1, ConstraintState::initial())
                .unwrap();
        }
        assert_eq!(t.node(ab).unwrap().children().len(), 3);
        assert_eq!(t.len(), 6);
        assert_eq!(t.lineage(ab).unwrap(), vec![t.root(), a, ab]);
        assert_eq!(t.lineage(t.root()).unwrap(), vec![t.root()]);
        assert_eq!(t.max_generated_len(), 3);
    }

    #[test]
    fn unknown_parent_is_structural_error() {
        let mut t = tree();
        assert_eq!(
            t.add_child(NodeId(9), 0, 1.0, 1.0, ConstraintState::initial()),
            Err(TreeError::UnknownNode(NodeId(9)))
        );
        assert!(t.lineage(NodeId(9)).is_err());
    }

    #[test]
    fn status_rules() {
        let mut t = tree();
        let a = t
            .add_child(t.root(), 0, 0.0, 0.0, ConstraintState::initial())
            .unwrap();
        t.set_status(a, NodeStatus::Terminal).unwrap();
        assert!(t.terminal_nodes().contains(&a));
        assert!(t.set_status(a, NodeStatus::Active).is_err());

        let done = t
            .add_child(t.root(), EOS, 0.3, 0.3, ConstraintState::initial())
            .unwrap();
        assert!(t.set_status(done, NodeStatus::Active).is_err());
        t.set_status(done, NodeStatus::Complete).unwrap();
        assert!(t.complete_nodes().contains(&done));
        assert!(t.set_status(done, NodeStatus::Active).is_err());
        assert!(t
            .add_child(done, 0, 0.1, 0.1, ConstraintState::initial())
            .is_err());

        let b = t
            .add_child(t.root(), 1, 0.4, 0.4, ConstraintState::initial())
            .unwrap();
        assert!(t.set_status(b, NodeStatus::Terminal).is_err());
        assert!(t.set_status(b, NodeStatus::Complete).is_err());
        t.set_status(b, NodeStatus::Active).unwrap();
        t.set_status(t.root(), NodeStatus::Inactive).unwrap();
        assert_eq!(
            t.active_nodes().iter().copied().collect::<Vec<_>>(),
            vec![b]
        );

        let zero_eos = t
            .add_child(b, EOS, 0.0, 0.0, ConstraintState::initial())
            .unwrap();
        assert!(t.set_status(zero_eos, NodeStatus::Complete).is_err());
    }

    #[test]
    fn prune_keeps_only_active_caches() {
        let mut t = tree();
        let mut ids = vec![t.root()];
        for i in 0..9 {
            let id = t
                .add_child(t.root(), i % 2, 0.1, 0.1, ConstraintState::initial())
                .unwrap();
            ids.push(id);
        }
        for &id in &ids {
            t.node_mut(id).unwrap().lm_cache = Some(LmState::default());
        }
        t.set_status(ids[1], NodeStatus::Active).unwrap();
        t.prune_lm_cache();
        let cached: Vec<_> = ids
            .iter()
            .filter(|&&id| t.node(id).unwrap().lm_cache.is_some())
            .collect();
        assert_eq!(cached.len(), 2);
        let before = t.snapshot();
        t.prune_lm_cache();
        assert_eq!(t.snapshot(), before);
    }

    #[test]
    fn snapshot_serializes() {
        let t = tree();
        let json = serde_json::to_value(t.snapshot()).unwrap();
        assert_eq!(json[0]["status"], "active");
        assert_eq!(json[0]["efg"], 1.0);
        assert_eq!(json[0]["parent"], serde_json::Value::Null);
    }
}
