//! Brute-force reference distributions.
//!
//! Everything here walks the full sequence space directly through the LM
//! and constraint interfaces and shares no code with the decoders.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::constraints::{Constraint, ConstraintError, ConstraintState, EvalInput};
use crate::lm::{LanguageModel, LmError, LmState, TokenId, Vocabulary};
use crate::runner::ResultRecord;

/// Largest number of prefixes an enumeration may visit.
pub const ENUMERATION_CAP: u128 = 10_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("enumeration would query about {estimate} prefixes, above the cap of {cap}")]
    TooLarge { estimate: u128, cap: u128 },
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
}

/// Probabilities keyed by generated token sequence.
pub type Distribution = BTreeMap<Vec<TokenId>, f64>;

/// Exact distribution over finished sequences (each ending in EOS).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SequenceDistribution {
    /// Normalized over finished sequences; empty when `mass` is 0.
    pub sequences: Distribution,
    /// Unnormalized mass of finished sequences.
    pub mass: f64,
    /// Mass of sequences still unfinished at the length cap.
    pub truncated_mass: f64,
    /// Mass removed by the constraints.
    pub rejected_mass: f64,
}

impl SequenceDistribution {
    /// Finished sequences at their unnormalized mass plus one extra atom,
    /// keyed by the empty sequence, for all remaining mass.
    pub fn with_failure_atom(&self) -> Distribution {
        let mut out: Distribution = self
            .sequences
            .iter()
            .map(|(s, p)| (s.clone(), p * self.mass))
            .collect();
        let rest = (1.0 - self.mass).max(0.0);
        if rest > 0.0 {
            out.insert(Vec::new(), rest);
        }
        out
    }
}

/// Number of LM queries an enumeration up to `max_len` tokens makes:
/// one per prefix of length below `max_len` that contains no EOS.
pub fn enumeration_size(vocab_size: usize, max_len: usize) -> u128 {
    let branching = vocab_size.saturating_sub(1) as u128;
    let mut total: u128 = 0;
    let mut level: u128 = 1;
    for _ in 0..max_len {
        total = total.saturating_add(level);
        level = level.saturating_mul(branching);
    }
    total
}

fn check_size(lm: &dyn LanguageModel, max_len: usize) -> Result<(), OracleError> {
    let estimate = enumeration_size(lm.vocab().len(), max_len);
    if estimate > ENUMERATION_CAP {
        return Err(OracleError::TooLarge {
            estimate,
            cap: ENUMERATION_CAP,
        });
    }
    Ok(())
}

/// How mass is carried from a prefix to its continuations.
#[derive(Clone, Copy, PartialEq)]
enum Measure {
    /// `p(t|x) * phi(x t)`: the constrained posterior after normalization.
    Global,
    /// `p(t|x) * phi(x t)` renormalized at every prefix, the measure of
    /// sampling one token at a time from the masked distribution.
    Local,
}

struct Walker<'a> {
    lm: &'a dyn LanguageModel,
    constraint: &'a dyn Constraint,
    prompt_len: usize,
    max_len: usize,
    measure: Measure,
    out: SequenceDistribution,
}

impl Walker<'_> {
    fn visit(
        &mut self,
        tokens: &mut Vec<TokenId>,
        mass: f64,
        lm_state: &LmState,
        state: &ConstraintState,
    ) -> Result<(), OracleError> {
        let (dist, next_lm) = self.lm.next_distribution(tokens, Some(lm_state))?;
        let eos = self.lm.vocab().eos();
        let depth = tokens.len() - self.prompt_len + 1;
        let mut branches = Vec::new();
        let mut total = 0.0;
        for (t, &p) in dist.probabilities().iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            tokens.push(t);
            let outcome = self
                .constraint
                .evaluate(&EvalInput::new(tokens, self.prompt_len, t == eos), state)?;
            tokens.pop();
            let w = p * outcome.score;
            total += w;
            branches.push((t, w, outcome.state));
        }
        let scale = match self.measure {
            Measure::Global => {
                self.out.rejected_mass += mass * (1.0 - total);
                1.0
            }
            Measure::Local if total > 0.0 => 1.0 / total,
            Measure::Local => {
                self.out.rejected_mass += mass;
                return Ok(());
            }
        };
        for (t, w, next_state) in branches {
            if w <= 0.0 {
                continue;
            }
            let child_mass = mass * w * scale;
            tokens.push(t);
            if t == eos {
                let generated = tokens[self.prompt_len..].to_vec();
                *self.out.sequences.entry(generated).or_default() += child_mass;
                self.out.mass += child_mass;
            } else if depth >= self.max_len {
                self.out.truncated_mass += child_mass;
            } else {
                self.visit(tokens, child_mass, &next_lm, &next_state)?;
            }
            tokens.pop();
        }
        Ok(())
    }
}

fn enumerate(
    lm: &dyn LanguageModel,
    constraint: &dyn Constraint,
    prompt: &[TokenId],
    max_len: usize,
    measure: Measure,
) -> Result<SequenceDistribution, OracleError> {
    check_size(lm, max_len)?;
    lm.vocab().check(prompt)?;
    let mut walker = Walker {
        lm,
        constraint,
        prompt_len: prompt.len(),
        max_len,
        measure,
        out: SequenceDistribution::default(),
    };
    if max_len > 0 {
        let mut tokens = prompt.to_vec();
        walker.visit(
            &mut tokens,
            1.0,
            &LmState::default(),
            &constraint.initial_state(),
        )?;
    }
    let mut out = walker.out;
    if out.mass > 0.0 {
        for p in out.sequences.values_mut() {
            *p /= out.mass;
        }
    } else {
        out.sequences.clear();
    }
    Ok(out)
}

/// Exact constrained posterior over sequences of at most `max_len`
/// generated tokens (EOS included): every finished sequence weighted by
/// its LM probability times the constraint scores along the way, then
/// normalized over finished sequences.
pub fn enumerate_constrained(
    lm: &dyn LanguageModel,
    constraint: &dyn Constraint,
    prompt: &[TokenId],
    max_len: usize,
) -> Result<SequenceDistribution, OracleError> {
    enumerate(lm, constraint, prompt, max_len, Measure::Global)
}

/// Distribution of token-by-token sampling from the constraint-masked LM.
/// Prefixes whose every continuation is masked end the walk; their mass is
/// reported as `rejected_mass`.
pub fn enumerate_locally_constrained(
    lm: &dyn LanguageModel,
    constraint: &dyn Constraint,
    prompt: &[TokenId],
    max_len: usize,
) -> Result<SequenceDistribution, OracleError> {
    enumerate(lm, constraint, prompt, max_len, Measure::Local)
}

/// The `k` most probable sequences, ties broken by token order.
pub fn exact_top_k(dist: &Distribution, k: usize) -> Vec<(Vec<TokenId>, f64)> {
    let mut entries: Vec<_> = dist.iter().map(|(s, &p)| (s.clone(), p)).collect();
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    entries.truncate(k);
    entries
}

/// Half the L1 distance over the union of supports.
pub fn total_variation(p: &Distribution, q: &Distribution) -> f64 {
    let mut sum = 0.0;
    for (s, &a) in p {
        sum += (a - q.get(s).copied().unwrap_or(0.0)).abs();
    }
    for (s, &b) in q {
        if !p.contains_key(s) {
            sum += b;
        }
    }
    sum / 2.0
}

/// Normalized frequencies of observed sequences.
pub fn empirical<I: IntoIterator<Item = Vec<TokenId>>>(samples: I) -> Distribution {
    let mut counts = Distribution::new();
    let mut n = 0usize;
    for s in samples {
        *counts.entry(s).or_default() += 1.0;
        n += 1;
    }
    for v in counts.values_mut() {
        *v /= n as f64;
    }
    counts
}

/// Output records for a distribution, ranked by probability.
pub fn records(dist: &SequenceDistribution, vocab: &Vocabulary) -> Vec<ResultRecord> {
    exact_top_k(&dist.sequences, dist.sequences.len())
        .into_iter()
        .enumerate()
        .map(|(i, (tokens, p))| ResultRecord {
            rank: i + 1,
            text: vocab.decode(&tokens),
            tokens: tokens.iter().map(|&t| vocab.tokens()[t].clone()).collect(),
            probability: p,
            score: p,
            status: "complete".into(),
            termination_reason: "enumerated".into(),
            expansions: 0,
            elapsed_ms: None,
            seed: 0,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::compose_product;
    use crate::lm::LookupLm;

    fn lm_a() -> LookupLm {
        let v = Vocabulary::new(vec!["a", "b", "EOS"], "EOS").unwrap();
        LookupLm::from_rows(v, [(vec![], vec![0.6, 0.3, 0.1])], vec![0.2, 0.2, 0.6]).unwrap()
    }

    #[test]
    fn lm_a_to_length_two() {
        let lm = lm_a();
        let d = enumerate_constrained(&lm, &compose_product(vec![]), &[], 2).unwrap();
        let get = |s: &[TokenId]| d.sequences[s] * d.mass;
        assert!((get(&[2]) - 0.1).abs() < 1e-12);
        assert!((get(&[0, 2]) - 0.36).abs() < 1e-12);
        assert!((get(&[1, 2]) - 0.18).abs() < 1e-12);
        assert!((d.mass + d.truncated_mass - 1.0).abs() < 1e-12);
        let total: f64 = d.sequences.values().sum();
        assert!((total - 1.0).abs() < 1e-12);
        let top: Vec<_> = exact_top_k(&d.sequences, 2)
            .into_iter()
            .map(|e| e.0)
            .collect();
        assert_eq!(top, vec![vec![0, 2], vec![1, 2]]);
    }

    #[test]
    fn size_estimate_and_cap() {
        assert_eq!(enumeration_size(3, 2), 3);
        assert_eq!(enumeration_size(4, 3), 1 + 3 + 9);
        assert!(enumeration_size(10, 9) > ENUMERATION_CAP);
        let v = Vocabulary::new((0..10).map(|i| i.to_string()).collect(), "0").unwrap();
        let lm = crate::lm::UniformLm::new(v);
        assert!(matches!(
            enumerate_constrained(&lm, &compose_product(vec![]), &[], 9),
            Err(OracleError::TooLarge { .. })
        ));
    }

    #[test]
    fn total_variation_examples() {
        let p: Distribution = [(vec![0], 0.6), (vec![1], 0.4)].into();
        let q: Distribution = [(vec![0], 0.5), (vec![1], 0.5)].into();
        assert!((total_variation(&p, &q) - 0.1).abs() < 1e-12);
        assert_eq!(total_variation(&p, &p), 0.0);
        let r: Distribution = [(vec![2], 1.0)].into();
        assert_eq!(total_variation(&p, &r), 1.0);
    }

    #[test]
    fn top_k_ties_are_lexicographic() {
        let d: Distribution = [(vec![1, 2], 0.25), (vec![0, 2], 0.25), (vec![2], 0.5)].into();
        let top: Vec<_> = exact_top_k(&d, 5).into_iter().map(|e| e.0).collect();
        assert_eq!(top, vec![vec![2], vec![0, 2], vec![1, 2]]);
    }
}
