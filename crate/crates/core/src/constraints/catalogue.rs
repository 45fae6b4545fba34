//! Concrete constraints over a toy token language.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::earley::{EarleyChart, EarleyRecognizer, Viability};
use super::expr::eval_expression;
use super::grammar::Grammar;
use super::{
    Constraint, ConstraintError, ConstraintOutcome, ConstraintState, EvalInput, StateData,
};
use crate::lm::{TokenId, Vocabulary};

/// Declarative constraint description, as found in run configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConstraintSpec {
    /// Grammar given inline (`grammar`) or as a file (`grammar_file`).
    CfgPrefix {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        grammar: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        grammar_file: Option<PathBuf>,
    },
    LexicalForbid {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        substrings: Vec<String>,
    },
    StructuralPrefix {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        #[serde(default)]
        opening: Vec<String>,
        #[serde(default)]
        forbidden: Vec<String>,
        #[serde(default)]
        forbid_uppercase: bool,
    },
    CompletionPredicate {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        equals: i64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_tokens: Option<usize>,
    },
    MaxLength {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        max_tokens: usize,
    },
}

impl ConstraintSpec {
    /// Display name: the explicit `name`, else the kind.
    pub fn name(&self) -> &str {
        let (name, kind) = match self {
            ConstraintSpec::CfgPrefix { name, .. } => (name, "cfg_prefix"),
            ConstraintSpec::LexicalForbid { name, .. } => (name, "lexical_forbid"),
            ConstraintSpec::StructuralPrefix { name, .. } => (name, "structural_prefix"),
            ConstraintSpec::CompletionPredicate { name, .. } => (name, "completion_predicate"),
            ConstraintSpec::MaxLength { name, .. } => (name, "max_length"),
        };
        name.as_deref().unwrap_or(kind)
    }

    /// Validates parameters and builds the constraint. Relative grammar
    /// paths resolve against `base_dir`.
    pub fn build(
        &self,
        vocab: &Vocabulary,
        base_dir: Option<&Path>,
    ) -> Result<Box<dyn Constraint>, ConstraintError> {
        let name = self.name().to_string();
        Ok(match self {
            ConstraintSpec::CfgPrefix {
                grammar,
                grammar_file,
                ..
            } => {
                let text = match (grammar, grammar_file) {
                    (Some(text), None) => text.clone(),
                    (None, Some(path)) => {
                        let path = match base_dir {
                            Some(dir) if path.is_relative() => dir.join(path),
                            _ => path.clone(),
                        };
                        std::fs::read_to_string(&path).map_err(|e| {
                            ConstraintError::Invalid(format!("{}: {e}", path.display()))
                        })?
                    }
                    _ => {
                        return Err(ConstraintError::Invalid(
                            "cfg_prefix needs exactly one of `grammar` and `grammar_file`".into(),
                        ))
                    }
                };
                Box::new(CfgPrefix::new(name, Grammar::parse(&text)?, vocab)?)
            }
            ConstraintSpec::LexicalForbid { substrings, .. } => {
                Box::new(LexicalForbid::new(name, substrings.clone(), vocab)?)
            }
            ConstraintSpec::StructuralPrefix {
                opening,
                forbidden,
                forbid_uppercase,
                ..
            } => Box::new(StructuralPrefix::new(
                name,
                opening,
                forbidden,
                *forbid_uppercase,
                vocab,
            )?),
            ConstraintSpec::CompletionPredicate {
                equals, max_tokens, ..
            } => Box::new(CompletionPredicate::new(
                name,
                ExpressionPredicate {
                    equals: *equals,
                    max_tokens: *max_tokens,
                },
                vocab,
            )),
            ConstraintSpec::MaxLength { max_tokens, .. } => {
                Box::new(MaxLength::new(name, *max_tokens)?)
            }
        })
    }
}

/// Score 1 while the prefix can still be extended to a sentence of the
/// grammar; a finished sequence must be a sentence.
#[derive(Debug)]
pub struct CfgPrefix {
    name: String,
    recognizer: EarleyRecognizer,
    /// Grammar terminal for each vocabulary token, if any.
    terminal_of: Vec<Option<usize>>,
    initial: Arc<EarleyChart>,
}

impl CfgPrefix {
    /// Fails if a grammar terminal is not a vocabulary token.
    pub fn new(
        name: impl Into<String>,
        grammar: Grammar,
        vocab: &Vocabulary,
    ) -> Result<Self, ConstraintError> {
        let name = name.into();
        if let Some(t) = grammar.terminals().iter().find(|t| vocab.id(t).is_none()) {
            return Err(ConstraintError::UnknownToken {
                constraint: name,
                token: t.clone(),
            });
        }
        let terminal_of = vocab
            .tokens()
            .iter()
            .map(|t| grammar.terminal_index(t))
            .collect();
        let recognizer = EarleyRecognizer::new(grammar);
        let initial = Arc::new(recognizer.initial_chart());
        Ok(Self {
            name,
            recognizer,
            terminal_of,
            initial,
        })
    }

    pub fn recognizer(&self) -> &EarleyRecognizer {
        &self.recognizer
    }
}

impl Constraint for CfgPrefix {
    fn name(&self) -> &str {
        &self.name
    }

    fn evaluate(
        &self,
        input: &EvalInput<'_>,
        prior: &ConstraintState,
    ) -> Result<ConstraintOutcome, ConstraintError> {
        let pending = input.pending(prior)?;
        let mut chart = match prior.data() {
            StateData::Chart(chart) => chart.clone(),
            StateData::Empty if prior.consumed() == 0 => self.initial.clone(),
            StateData::Dead => return Ok(ConstraintOutcome::dead(prior.consumed())),
            _ => return Err(ConstraintError::ForeignState(self.name.clone())),
        };
        let consumed = prior.consumed() + pending.len();
        for &token in pending {
            let Some(terminal) = self.terminal_of.get(token).copied().flatten() else {
                return Ok(ConstraintOutcome::dead(consumed));
            };
            chart = Arc::new(self.recognizer.advance(&chart, terminal));
            if self.recognizer.viability(&chart) == Viability::Dead {
                return Ok(ConstraintOutcome::dead(consumed));
            }
        }
        let score = match (self.recognizer.viability(&chart), input.finished) {
            (Viability::Dead, _) | (Viability::Viable, true) => 0.0,
            _ => 1.0,
        };
        Ok(ConstraintOutcome::new(
            score,
            ConstraintState::new(consumed, StateData::Chart(chart)),
        ))
    }
}

/// Score 0 once the decoded text contains any forbidden substring.
#[derive(Debug)]
pub struct LexicalForbid {
    name: String,
    substrings: Vec<String>,
    tokens: Vec<String>,
    eos: TokenId,
    /// Characters of already-checked text that a new match could overlap.
    keep: usize,
}

impl LexicalForbid {
    pub fn new(
        name: impl Into<String>,
        substrings: Vec<String>,
        vocab: &Vocabulary,
    ) -> Result<Self, ConstraintError> {
        if substrings.iter().any(String::is_empty) {
            return Err(ConstraintError::Invalid(
                "forbidden substring is empty".into(),
            ));
        }
        let keep = substrings
            .iter()
            .map(|s| s.chars().count())
            .max()
            .unwrap_or(1)
            - 1;
        Ok(Self {
            name: name.into(),
            substrings,
            tokens: vocab.tokens().to_vec(),
            eos: vocab.eos(),
            keep,
        })
    }
}

impl Constraint for LexicalForbid {
    fn name(&self) -> &str {
        &self.name
    }

    fn evaluate(
        &self,
        input: &EvalInput<'_>,
        prior: &ConstraintState,
    ) -> Result<ConstraintOutcome, ConstraintError> {
        let pending = input.pending(prior)?;
        let mut text = match prior.data() {
            StateData::Tail(tail) => tail.clone(),
            StateData::Empty if prior.consumed() == 0 => String::new(),
            StateData::Dead => return Ok(ConstraintOutcome::dead(prior.consumed())),
            _ => return Err(ConstraintError::ForeignState(self.name.clone())),
        };
        let consumed = prior.consumed() + pending.len();
        for &t in pending {
            if t != self.eos {
                text.push_str(self.tokens.get(t).map(String::as_str).unwrap_or_default());
            }
        }
        if self.substrings.iter().any(|s| text.contains(s.as_str())) {
            return Ok(ConstraintOutcome::dead(consumed));
        }
        let skip = text.chars().count().saturating_sub(self.keep);
        let tail: String = text.chars().skip(skip).collect();
        Ok(ConstraintOutcome::new(
            1.0,
            ConstraintState::new(consumed, StateData::Tail(tail)),
        ))
    }
}

/// Requires the generated content to open with fixed tokens, and forbids a
/// token class after the opening.
#[derive(Debug)]
pub struct StructuralPrefix {
    name: String,
    opening: Vec<TokenId>,
    forbidden: BTreeSet<TokenId>,
}

impl StructuralPrefix {
    /// `forbid_uppercase` adds every token containing an uppercase letter
    /// to the forbidden class.
    pub fn new(
        name: impl Into<String>,
        opening: &[String],
        forbidden: &[String],
        forbid_uppercase: bool,
        vocab: &Vocabulary,
    ) -> Result<Self, ConstraintError> {
        let name = name.into();
        let lookup = |t: &String| {
            vocab.id(t).ok_or_else(|| ConstraintError::UnknownToken {
                constraint: name.clone(),
                token: t.clone(),
            })
        };
        let opening = opening.iter().map(lookup).collect::<Result<Vec<_>, _>>()?;
        let mut forbidden = forbidden
            .iter()
            .map(lookup)
            .collect::<Result<BTreeSet<_>, _>>()?;
        if forbid_uppercase {
            forbidden.extend((0..vocab.len()).filter(|&i| {
                vocab.tokens()[i].chars().any(char::is_uppercase) && i != vocab.eos()
            }));
        }
        Ok(Self {
            name,
            opening,
            forbidden,
        })
    }
}

impl Constraint for StructuralPrefix {
    fn name(&self) -> &str {
        &self.name
    }

    fn evaluate(
        &self,
        input: &EvalInput<'_>,
        prior: &ConstraintState,
    ) -> Result<ConstraintOutcome, ConstraintError> {
        let pending = input.pending(prior)?;
        let consumed = prior.consumed() + pending.len();
        match prior.data() {
            StateData::Empty => {}
            StateData::Dead => return Ok(ConstraintOutcome::dead(prior.consumed())),
            _ => return Err(ConstraintError::ForeignState(self.name.clone())),
        }
        for (offset, &t) in pending.iter().enumerate() {
            let pos = prior.consumed() + offset;
            let ok = match self.opening.get(pos) {
                Some(&expected) => t == expected,
                None => !self.forbidden.contains(&t),
            };
            if !ok {
                return Ok(ConstraintOutcome::dead(consumed));
            }
        }
        if input.finished && consumed < self.opening.len() {
            return Ok(ConstraintOutcome::dead(consumed));
        }
        Ok(ConstraintOutcome::new(
            1.0,
            ConstraintState::new(consumed, StateData::Empty),
        ))
    }
}

/// Target for a finished arithmetic expression.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpressionPredicate {
    /// Required value of the expression.
    pub equals: i64,
    /// Optional cap on the number of generated tokens.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<usize>,
}

impl ExpressionPredicate {
    /// Checks generated content tokens (EOS excluded).
    pub fn check(&self, content: &[TokenId], vocab: &Vocabulary) -> bool {
        if self.max_tokens.is_some_and(|m| content.len() > m) {
            return false;
        }
        eval_expression(&vocab.decode(content)) == Some(self.equals)
    }
}

/// Score 1 for every unfinished sequence; a finished sequence scores 1 iff
/// it evaluates to the target.
#[derive(Debug)]
pub struct CompletionPredicate {
    name: String,
    predicate: ExpressionPredicate,
    vocab: Vocabulary,
}

impl CompletionPredicate {
    pub fn new(
        name: impl Into<String>,
        predicate: ExpressionPredicate,
        vocab: &Vocabulary,
    ) -> Self {
        Self {
            name: name.into(),
            predicate,
            vocab: vocab.clone(),
        }
    }
}

impl Constraint for CompletionPredicate {
    fn name(&self) -> &str {
        &self.name
    }

    fn evaluate(
        &self,
        input: &EvalInput<'_>,
        prior: &ConstraintState,
    ) -> Result<ConstraintOutcome, ConstraintError> {
        let consumed = prior.consumed() + input.pending(prior)?.len();
        let state = ConstraintState::new(consumed, StateData::Empty);
        if !input.finished {
            return Ok(ConstraintOutcome::new(1.0, state));
        }
        let score = if self.predicate.check(input.content(), &self.vocab) {
            1.0
        } else {
            0.0
        };
        Ok(ConstraintOutcome::new(score, state))
    }
}

/// Caps the number of generated tokens, EOS excluded.
#[derive(Debug)]
pub struct MaxLength {
    name: String,
    max_tokens: usize,
}

impl MaxLength {
    pub fn new(name: impl Into<String>, max_tokens: usize) -> Result<Self, ConstraintError> {
        if max_tokens == 0 {
            return Err(ConstraintError::Invalid(
                "max_tokens must be positive".into(),
            ));
        }
        Ok(Self {
            name: name.into(),
            max_tokens,
        })
    }
}

impl Constraint for MaxLength {
    fn name(&self) -> &str {
        &self.name
    }

    fn evaluate(
        &self,
        input: &EvalInput<'_>,
        prior: &ConstraintState,
    ) -> Result<ConstraintOutcome, ConstraintError> {
        let consumed = prior.consumed() + input.pending(prior)?.len();
        if consumed > self.max_tokens {
            return Ok(ConstraintOutcome::dead(consumed));
        }
        Ok(ConstraintOutcome::new(
            1.0,
            ConstraintState::new(consumed, StateData::Empty),
        ))
    }
}

/// A stateless constraint from a function of the generated content (EOS
/// excluded) and whether the sequence is finished.
type ScoreFn = Arc<dyn Fn(&[TokenId], bool) -> f64 + Send + Sync>;

pub struct FnConstraint {
    name: String,
    score: ScoreFn,
}

impl FnConstraint {
    pub fn new(
        name: impl Into<String>,
        score: impl Fn(&[TokenId], bool) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            score: Arc::new(score),
        }
    }
}

impl std::fmt::Debug for FnConstraint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FnConstraint")
            .field("name", &self.name)
            .finish()
    }
}

impl Constraint for FnConstraint {
    fn name(&self) -> &str {
        &self.name
    }

    fn evaluate(
        &self,
        input: &EvalInput<'_>,
        prior: &ConstraintState,
    ) -> Result<ConstraintOutcome, ConstraintError> {
        let consumed = prior.consumed() + input.pending(prior)?.len();
        let score = (self.score)(input.content(), input.finished);
        if !(0.0..=1.0).contains(&score) {
            return Err(ConstraintError::Invalid(format!(
                "{} returned score {score}",
                self.name
            )));
        }
        Ok(ConstraintOutcome::new(
            score,
            ConstraintState::new(consumed, StateData::Empty),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const G1: &str = "S1 -> A B\nA -> a A | \"\"\nB -> b B c | \"\"";

    fn abc() -> Vocabulary {
        Vocabulary::new(vec!["a", "b", "c", "#", "EOS"], "EOS").unwrap()
    }

    fn run(c: &dyn Constraint, v: &Vocabulary, text: &str, finished: bool) -> f64 {
        let mut tokens = v.parse_tokens(text).unwrap();
        if finished {
            tokens.push(v.eos());
        }
        c.evaluate(&EvalInput::new(&tokens, 0, finished), &c.initial_state())
            .unwrap()
            .score
    }

    /// Token-by-token evaluation with chained states.
    fn run_chained(c: &dyn Constraint, v: &Vocabulary, text: &str, finished: bool) -> f64 {
        let mut tokens = v.parse_tokens(text).unwrap();
        let mut state = c.initial_state();
        let mut score = 1.0;
        for i in 1..=tokens.len() {
            let out = c
                .evaluate(&EvalInput::new(&tokens[..i], 0, false), &state)
                .unwrap();
            state = out.state;
            score = out.score;
        }
        if finished {
            tokens.push(v.eos());
            score = c
                .evaluate(&EvalInput::new(&tokens, 0, true), &state)
                .unwrap()
                .score;
        }
        score
    }

    #[test]
    fn cfg_prefix_scores() {
        let v = abc();
        let c = CfgPrefix::new("g1", Grammar::parse(G1).unwrap(), &v).unwrap();
        assert_eq!(run(&c, &v, "a a b", false), 1.0);
        assert_eq!(run(&c, &v, "b a", false), 0.0);
        assert_eq!(run(&c, &v, "a a b", true), 0.0);
        assert_eq!(run(&c, &v, "a b c", true), 1.0);
        assert_eq!(run(&c, &v, "a #", false), 0.0);
        assert_eq!(run_chained(&c, &v, "a b c", true), 1.0);
        assert_eq!(run_chained(&c, &v, "a b c c", false), 0.0);
    }

    #[test]
    fn cfg_prefix_rejects_foreign_terminals() {
        let v = Vocabulary::new(vec!["a", "EOS"], "EOS").unwrap();
        assert!(matches!(
            CfgPrefix::new("g1", Grammar::parse(G1).unwrap(), &v),
            Err(ConstraintError::UnknownToken { .. })
        ));
    }

    #[test]
    fn lexical_forbid_spans_tokens() {
        let v = Vocabulary::new(vec!["a", "b", "ab", "EOS"], "EOS").unwrap();
        let c = LexicalForbid::new("no-ab", vec!["bab".into()], &v).unwrap();
        assert_eq!(run(&c, &v, "a a", false), 1.0);
        assert_eq!(run(&c, &v, "b ab", false), 0.0);
        assert_eq!(run_chained(&c, &v, "b ab", false), 0.0);
        assert_eq!(run_chained(&c, &v, "b a b", false), 0.0);
        assert_eq!(run_chained(&c, &v, "b a a b", true), 1.0);
        let hash = LexicalForbid::new("no-comments", vec!["#".into()], &abc()).unwrap();
        assert_eq!(run(&hash, &abc(), "a b c", false), 1.0);
    }

    #[test]
    fn structural_prefix_requires_opening() {
        let v = Vocabulary::new(vec!["def", "x", "Y", "EOS"], "EOS").unwrap();
        let c = StructuralPrefix::new("shape", &["def".into()], &[], true, &v).unwrap();
        assert_eq!(run(&c, &v, "def x", false), 1.0);
        assert_eq!(run(&c, &v, "x", false), 0.0);
        assert_eq!(run(&c, &v, "def Y", false), 0.0);
        assert_eq!(run(&c, &v, "", true), 0.0);
        assert_eq!(run_chained(&c, &v, "def x x", true), 1.0);
    }

    #[test]
    fn completion_predicate_is_neutral_until_finished() {
        let v = Vocabulary::new(vec!["3", "4", "5", "+", "EOS"], "EOS").unwrap();
        let p = ExpressionPredicate {
            equals: 7,
            max_tokens: None,
        };
        let c = CompletionPredicate::new("tests", p, &v);
        assert_eq!(run(&c, &v, "3 +", false), 1.0);
        assert_eq!(run(&c, &v, "3 + 4", true), 1.0);
        assert_eq!(run(&c, &v, "3 + 5", true), 0.0);
        assert_eq!(run(&c, &v, "3 +", true), 0.0);
    }

    #[test]
    fn max_length_counts_content() {
        let v = abc();
        let c = MaxLength::new("len", 2).unwrap();
        assert_eq!(run(&c, &v, "a b", true), 1.0);
        assert_eq!(run(&c, &v, "a b c", false), 0.0);
    }

    #[test]
    fn spec_json_round_trip() {
        let json = r##"[
            {"kind": "cfg_prefix", "name": "syntax", "grammar": "S -> a"},
            {"kind": "lexical_forbid", "substrings": ["#"]},
            {"kind": "structural_prefix", "opening": ["a"], "forbid_uppercase": true},
            {"kind": "completion_predicate", "equals": 7},
            {"kind": "max_length", "max_tokens": 3}
        ]"##;
        let specs: Vec<ConstraintSpec> = serde_json::from_str(json).unwrap();
        assert_eq!(specs[0].name(), "syntax");
        assert_eq!(specs[3].name(), "completion_predicate");
        let back: Vec<ConstraintSpec> =
            serde_json::from_str(&serde_json::to_string(&specs).unwrap()).unwrap();
        assert_eq!(back, specs);
        for spec in &specs {
            spec.build(&abc(), None).unwrap();
        }
        let bad = r#"{"kind": "max_length", "max_tokens": 3, "extra": 1}"#;
        assert!(serde_json::from_str::<ConstraintSpec>(bad).is_err());
        let both = ConstraintSpec::CfgPrefix {
            name: None,
            grammar: None,
            grammar_file: None,
        };
        assert!(both.build(&abc(), None).is_err());
    }
}
