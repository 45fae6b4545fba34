use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LanguageModel, LmError, LmState, TokenDistribution, Vocabulary};

/// Row-sum tolerance accepted when loading a table.
const ROW_TOLERANCE: f64 = 1e-6;

/// On-disk form of a [`LookupLm`]. Context keys are token strings joined by a
/// single space; the empty string is the root context.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LookupLmFile {
    pub vocab: Vec<String>,
    pub eos: String,
    pub rows: BTreeMap<String, Vec<f64>>,
    pub default: Vec<f64>,
}

/// A conditional probability table keyed by the full context.
#[derive(Debug, Clone)]
pub struct LookupLm {
    vocab: Vocabulary,
    rows: HashMap<Vec<usize>, TokenDistribution>,
    default: TokenDistribution,
}

impl LookupLm {
    pub fn from_file_data(file: LookupLmFile) -> Result<Self, LmError> {
        let vocab = Vocabulary::new(file.vocab, &file.eos)?;
        let default = check_row(&vocab, "default", file.default)?;
        let mut rows = HashMap::with_capacity(file.rows.len());
        for (key, row) in file.rows {
            let context = vocab
                .parse_tokens(&key)
                .map_err(|e| LmError::Invalid(format!("row `{key}`: {e}")))?;
            let row = check_row(&vocab, &key, row)?;
            rows.insert(context, row);
        }
        Ok(Self {
            vocab,
            rows,
            default,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, LmError> {
        let file: LookupLmFile =
            serde_json::from_str(text).map_err(|e| LmError::Invalid(e.to_string()))?;
        Self::from_file_data(file)
    }

    pub fn load(path: &Path) -> Result<Self, LmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LmError::Invalid(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Builds a table directly from token-id contexts.
    pub fn from_rows(
        vocab: Vocabulary,
        rows: impl IntoIterator<Item = (Vec<usize>, Vec<f64>)>,
        default: Vec<f64>,
    ) -> Result<Self, LmError> {
        let default = check_row(&vocab, "default", default)?;
        let mut table = HashMap::new();
        for (context, row) in rows {
            vocab.check(&context)?;
            let key = vocab.context_key(&context);
            table.insert(context, check_row(&vocab, &key, row)?);
        }
        Ok(Self {
            vocab,
            rows: table,
            default,
        })
    }

    pub fn to_file_data(&self) -> LookupLmFile {
        LookupLmFile {
            vocab: self.vocab.tokens().to_vec(),
            eos: self.vocab.tokens()[self.vocab.eos()].clone(),
            rows: self
                .rows
                .iter()
                .map(|(ctx, row)| (self.vocab.context_key(ctx), row.probabilities().to_vec()))
                .collect(),
            default: self.default.probabilities().to_vec(),
        }
    }
}

fn check_row(vocab: &Vocabulary, key: &str, row: Vec<f64>) -> Result<TokenDistribution, LmError> {
    if row.len() != vocab.len() {
        return Err(LmError::Invalid(format!(
            "row `{key}` has {} entries, vocabulary has {}",
            row.len(),
            vocab.len()
        )));
    }
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(LmError::Invalid(format!(
            "row `{key}` has a negative entry"
        )));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > ROW_TOLERANCE {
        return Err(LmError::Invalid(format!("row `{key}` sums to {total}")));
    }
    // Rows outside the runtime tolerance but within the load tolerance are
    // renormalized; others are kept exactly as written.
    if (total - 1.0).abs() > super::NORMALIZATION_TOLERANCE {
        return Ok(TokenDistribution::from_weights(row));
    }
    TokenDistribution::new(row)
}

impl LanguageModel for LookupLm {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn context_window(&self) -> Option<usize> {
        None
    }

    fn distribution(&self, state: &LmState) -> TokenDistribution {
        self.rows
            .get(state.context())
            .unwrap_or(&self.default)
            .clone()
    }
}
