//! Constraint functions and their product-of-experts composition.
//!
//! A [`Constraint`] scores a (partial or finished) token sequence in `[0, 1]`;
//! zero invalidates the sequence. Constraints are incremental: each
//! evaluation returns a successor [`ConstraintState`] which the engine stores
//! on the node and passes back when scoring that node's children.

mod catalogue;
mod earley;
mod expr;
mod grammar;

pub use catalogue::{
    CfgPrefix, CompletionPredicate, ConstraintSpec, ExpressionPredicate, FnConstraint,
    LexicalForbid, MaxLength, StructuralPrefix,
};
pub use earley::{cfg_viable_prefix, EarleyChart, EarleyRecognizer, Viability};
pub use expr::eval_expression;
pub use grammar::{Grammar, Rule, Symbol};

use std::any::Any;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::lm::TokenId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstraintError {
    #[error("constraint state covers {consumed} tokens but the sequence has only {len}")]
    StateMismatch { consumed: usize, len: usize },
    #[error("state does not belong to constraint `{0}`")]
    ForeignState(String),
    #[error("grammar error on line {line}: {message}")]
    Grammar { line: usize, message: String },
    #[error("unknown terminal `{0}`")]
    UnknownTerminal(String),
    #[error("unknown token `{token}` in constraint `{constraint}`")]
    UnknownToken { constraint: String, token: String },
    #[error("invalid constraint parameters: {0}")]
    Invalid(String),
}

/// One constraint query: the full token sequence (prompt included), where
/// the prompt ends, and whether the last token is the end-of-sequence token.
#[derive(Debug, Clone, Copy)]
pub struct EvalInput<'a> {
    pub tokens: &'a [TokenId],
    pub prefix_length: usize,
    pub finished: bool,
}

impl<'a> EvalInput<'a> {
    pub fn new(tokens: &'a [TokenId], prefix_length: usize, finished: bool) -> Self {
        Self {
            tokens,
            prefix_length,
            finished,
        }
    }

    /// Generated tokens, without the prompt and without a trailing EOS.
    pub fn content(&self) -> &'a [TokenId] {
        let generated = &self.tokens[self.prefix_length.min(self.tokens.len())..];
        if self.finished && !generated.is_empty() {
            &generated[..generated.len() - 1]
        } else {
            generated
        }
    }

    /// Content tokens not yet covered by `prior`.
    pub fn pending(&self, prior: &ConstraintState) -> Result<&'a [TokenId], ConstraintError> {
        let content = self.content();
        if prior.consumed > content.len() {
            return Err(ConstraintError::StateMismatch {
                consumed: prior.consumed,
                len: content.len(),
            });
        }
        Ok(&content[prior.consumed..])
    }
}

/// Payload carried by a [`ConstraintState`].
#[derive(Clone)]
pub enum StateData {
    Empty,
    /// A previous evaluation scored zero; every extension scores zero too.
    Dead,
    Chart(Arc<EarleyChart>),
    Tail(String),
    Members(Vec<ConstraintState>),
    Custom(Arc<dyn Any + Send + Sync>),
}

impl fmt::Debug for StateData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StateData::Empty => f.write_str("Empty"),
            StateData::Dead => f.write_str("Dead"),
            StateData::Chart(c) => write!(f, "Chart(len={})", c.len()),
            StateData::Tail(t) => f.debug_tuple("Tail").field(t).finish(),
            StateData::Members(m) => f.debug_tuple("Members").field(m).finish(),
            StateData::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Opaque per-node constraint state: how many content tokens it covers and
/// the constraint-specific payload.
#[derive(Debug, Clone)]
pub struct ConstraintState {
    consumed: usize,
    data: StateData,
}

impl ConstraintState {
    pub fn new(consumed: usize, data: StateData) -> Self {
        Self { consumed, data }
    }

    pub fn initial() -> Self {
        Self::new(0, StateData::Empty)
    }

    pub fn consumed(&self) -> usize {
        self.consumed
    }

    pub fn data(&self) -> &StateData {
        &self.data
    }

    pub fn is_dead(&self) -> bool {
        matches!(self.data, StateData::Dead)
    }
}

/// Result of one evaluation.
#[derive(Debug, Clone)]
pub struct ConstraintOutcome {
    pub score: f64,
    pub state: ConstraintState,
}

impl ConstraintOutcome {
    pub fn new(score: f64, state: ConstraintState) -> Self {
        Self { score, state }
    }

    /// Zero score with an absorbing state.
    pub fn dead(consumed: usize) -> Self {
        Self::new(0.0, ConstraintState::new(consumed, StateData::Dead))
    }
}

/// A scorer over token sequences.
pub trait Constraint: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    fn initial_state(&self) -> ConstraintState {
        ConstraintState::initial()
    }

    /// Scores `input` given a state produced on a prefix of the same sequence
    /// (or the initial state).
    fn evaluate(
        &self,
        input: &EvalInput<'_>,
        prior: &ConstraintState,
    ) -> Result<ConstraintOutcome, ConstraintError>;
}

/// Product of member constraints. The empty product scores 1 everywhere.
#[derive(Debug, Default)]
pub struct ProductConstraint {
    members: Vec<Box<dyn Constraint>>,
}

/// Composes constraints by multiplying their scores.
pub fn compose_product(members: Vec<Box<dyn Constraint>>) -> ProductConstraint {
    ProductConstraint { members }
}

impl ProductConstraint {
    pub fn members(&self) -> &[Box<dyn Constraint>] {
        &self.members
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Per-member outcomes, in member order.
    pub fn evaluate_members(
        &self,
        input: &EvalInput<'_>,
        prior: &ConstraintState,
    ) -> Result<Vec<ConstraintOutcome>, ConstraintError> {
        let priors = match &prior.data {
            StateData::Members(states) if states.len() == self.members.len() => states.clone(),
            StateData::Empty if prior.consumed == 0 => {
                self.members.iter().map(|m| m.initial_state()).collect()
            }
            _ => return Err(ConstraintError::ForeignState(self.name().to_string())),
        };
        self.members
            .iter()
            .zip(&priors)
            .map(|(member, state)| {
                if state.is_dead() {
                    Ok(ConstraintOutcome::dead(state.consumed))
                } else {
                    member.evaluate(input, state)
                }
            })
            .collect()
    }

    /// Names of members scoring zero on `input`.
    pub fn violations(
        &self,
        input: &EvalInput<'_>,
        prior: &ConstraintState,
    ) -> Result<Vec<String>, ConstraintError> {
        Ok(self
            .evaluate_members(input, prior)?
            .iter()
            .zip(&self.members)
            .filter(|(o, _)| o.score == 0.0)
            .map(|(_, m)| m.name().to_string())
            .collect())
    }
}

impl Constraint for ProductConstraint {
    fn name(&self) -> &str {
        "product"
    }

    fn initial_state(&self) -> ConstraintState {
        ConstraintState::new(
            0,
            StateData::Members(self.members.iter().map(|m| m.initial_state()).collect()),
        )
    }

    fn evaluate(
        &self,
        input: &EvalInput<'_>,
        prior: &ConstraintState,
    ) -> Result<ConstraintOutcome, ConstraintError> {
        let pending = input.pending(prior)?;
        let outcomes = self.evaluate_members(input, prior)?;
        let score = outcomes.iter().map(|o| o.score).product();
        let states = outcomes.into_iter().map(|o| o.state).collect();
        Ok(ConstraintOutcome::new(
            score,
            ConstraintState::new(prior.consumed + pending.len(), StateData::Members(states)),
        ))
    }
}
