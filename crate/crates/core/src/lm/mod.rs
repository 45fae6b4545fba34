//! Next-token distribution providers.
//!
//! A [`LanguageModel`] maps a token prefix to a [`TokenDistribution`] over its
//! [`Vocabulary`]. Models may carry an incremental [`LmState`] per prefix, the
//! analogue of a transformer KV cache: querying through a state must give the
//! same distribution as querying the full prefix from scratch.

mod lookup;
mod ngram;
mod uniform;

pub use lookup::{LookupLm, LookupLmFile};
pub use ngram::{train_ngram, NgramLm, NgramModelFile};
pub use uniform::UniformLm;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index of a token in its vocabulary.
pub type TokenId = usize;

/// Tolerance used when checking that a distribution sums to one.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LmError {
    #[error("token id {token} is outside the vocabulary of size {size}")]
    UnknownTokenId { token: TokenId, size: usize },
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("lm state covers {consumed} tokens but the prefix has only {len}")]
    StateMismatch { consumed: usize, len: usize },
    #[error("batch element {index}: {source}")]
    Batch {
        index: usize,
        #[source]
        source: Box<LmError>,
    },
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),
    #[error("invalid model: {0}")]
    Invalid(String),
}

/// Ordered token strings with a distinguished end-of-sequence token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    eos: TokenId,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn new<S: Into<String>>(tokens: Vec<S>, eos: &str) -> Result<Self, LmError> {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.len() < 2 {
            return Err(LmError::Vocabulary(format!(
                "need at least 2 tokens, got {}",
                tokens.len()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(LmError::Vocabulary(format!("duplicate token `{t}`")));
            }
        }
        let eos = *index
            .get(eos)
            .ok_or_else(|| LmError::Vocabulary(format!("eos token `{eos}` not in vocabulary")))?;
        Ok(Self { tokens, eos, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Looks up every whitespace-separated token of `text`.
    pub fn parse_tokens(&self, text: &str) -> Result<Vec<TokenId>, LmError> {
        text.split_whitespace()
            .map(|t| {
                self.id(t)
                    .ok_or_else(|| LmError::UnknownToken(t.to_string()))
            })
            .collect()
    }

    /// Token strings joined by a single space; the lookup-table context key.
    pub fn context_key(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| self.tokens[t].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Concatenation of token strings with any EOS tokens dropped.
    pub fn decode(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .filter(|&&t| t != self.eos)
            .map(|&t| self.tokens[t].as_str())
            .collect()
    }

    pub fn check(&self, tokens: &[TokenId]) -> Result<(), LmError> {
        match tokens.iter().find(|&&t| t >= self.len()) {
            Some(&token) => Err(LmError::UnknownTokenId {
                token,
                size: self.len(),
            }),
            None => Ok(()),
        }
    }
}

/// Probability vector aligned with vocabulary order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution {
    probabilities: Vec<f64>,
}

impl TokenDistribution {
    /// Wraps a probability vector, checking sign and normalization.
    pub fn new(probabilities: Vec<f64>) -> Result<Self, LmError> {
        if let Some(p) = probabilities.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(LmError::Invalid(format!(
                "negative or non-finite probability {p}"
            )));
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(LmError::Invalid(format!("probabilities sum to {total}")));
        }
        Ok(Self { probabilities })
    }

    pub fn uniform(size: usize) -> Self {
        Self {
            probabilities: vec![1.0 / size as f64; size],
        }
    }

    /// Normalizes nonnegative weights; zero total yields the uniform vector.
    pub(crate) fn from_weights(weights: Vec<f64>) -> Self {
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Self::uniform(weights.len());
        }
        Self {
            probabilities: weights.into_iter().map(|w| w / total).collect(),
        }
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probabilities.get(token).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }
}

/// Incremental evaluation state for one prefix.
///
/// `context` is whatever the model needs to produce the next distribution
/// (the full prefix for a lookup table, the last `order - 1` tokens for an
/// n-gram model). `consumed` is the length of the prefix it summarizes.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LmState {
    consumed: usize,
    context: Vec<TokenId>,
}

impl LmState {
    pub fn consumed(&self) -> usize {
        self.consumed
    }

    pub fn context(&self) -> &[TokenId] {
        &self.context
    }
}

/// An autoregressive model over a fixed vocabulary.
///
/// Implementations provide [`advance`](Self::advance) and
/// [`distribution`](Self::distribution); prefix queries, state reuse and
/// batching are derived from those two.
pub trait LanguageModel: Send + Sync {
    fn vocab(&self) -> &Vocabulary;

    /// Length of the context window kept in [`LmState`], `None` for unbounded.
    fn context_window(&self) -> Option<usize>;

    /// Distribution over the next token given a state's context.
    fn distribution(&self, state: &LmState) -> TokenDistribution;

    fn advance(&self, state: &mut LmState, token: TokenId) {
        state.consumed += 1;
        state.context.push(token);
        if let Some(window) = self.context_window() {
            if state.context.len() > window {
                let excess = state.context.len() - window;
                state.context.drain(..excess);
            }
        }
    }

    /// Next-token distribution for `tokens`, optionally resuming from a state
    /// computed for a prefix of `tokens`. Returns the state for `tokens`.
    fn next_distribution(
        &self,
        tokens: &[TokenId],
        state: Option<&LmState>,
    ) -> Result<(TokenDistribution, LmState), LmError> {
        self.vocab().check(tokens)?;
        let mut state = match state {
            Some(s) if s.consumed > tokens.len() => {
                return Err(LmError::StateMismatch {
                    consumed: s.consumed,
                    len: tokens.len(),
                })
            }
            Some(s) => s.clone(),
            None => LmState::default(),
        };
        for &t in &tokens[state.consumed..] {
            self.advance(&mut state, t);
        }
        Ok((self.distribution(&state), state))
    }

    /// Elementwise [`next_distribution`](Self::next_distribution).
    fn batch_next_distribution(
        &self,
        queries: &[(&[TokenId], Option<&LmState>)],
    ) -> Result<Vec<(TokenDistribution, LmState)>, LmError> {
        queries
            .iter()
            .enumerate()
            .map(|(index, (tokens, state))| {
                self.next_distribution(tokens, *state)
                    .map_err(|e| LmError::Batch {
                        index,
                        source: Box::new(e),
                    })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_rejects_duplicates_and_missing_eos() {
        assert!(Vocabulary::new(vec!["a", "a", "EOS"], "EOS").is_err());
        assert!(Vocabulary::new(vec!["a", "b"], "EOS").is_err());
        assert!(Vocabulary::new(vec!["EOS"], "EOS").is_err());
        let v = Vocabulary::new(vec!["a", "b", "EOS"], "EOS").unwrap();
        assert_eq!(v.eos(), 2);
        assert_eq!(v.parse_tokens("b a").unwrap(), vec![1, 0]);
        assert_eq!(v.decode(&[0, 1, 2]), "ab");
        assert_eq!(v.context_key(&[0, 1]), "a b");
    }

    #[test]
    fn token_distribution_validates() {
        assert!(TokenDistribution::new(vec![0.5, 0.4]).is_err());
        assert!(TokenDistribution::new(vec![1.5, -0.5]).is_err());
        assert!(TokenDistribution::new(vec![0.5, 0.5]).is_ok());
    }
}
