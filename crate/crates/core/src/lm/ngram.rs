use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LanguageModel, LmError, LmState, TokenDistribution, TokenId, Vocabulary};

/// End-of-sequence symbol appended to every training sequence.
pub const NGRAM_EOS: &str = "EOS";

/// Serialized n-gram model. Counts are keyed by space-joined context.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NgramModelFile {
    pub vocab: Vec<String>,
    pub eos: String,
    pub order: usize,
    pub smoothing_k: f64,
    pub counts: BTreeMap<String, Vec<u64>>,
}

/// Add-k smoothed n-gram model.
///
/// The context is the last `order - 1` tokens, shorter at the start of a
/// sequence. A context never seen in training has all counts zero and so
/// yields the uniform distribution.
#[derive(Debug, Clone)]
pub struct NgramLm {
    vocab: Vocabulary,
    order: usize,
    smoothing_k: f64,
    counts: HashMap<Vec<TokenId>, Vec<u64>>,
}

/// Trains on whitespace-tokenized sequences; `EOS` is appended to each.
pub fn train_ngram<S: AsRef<str>>(
    corpus: &[S],
    order: usize,
    smoothing_k: f64,
) -> Result<NgramLm, LmError> {
    if order == 0 {
        return Err(LmError::Invalid("n-gram order must be at least 1".into()));
    }
    if !(smoothing_k > 0.0 && smoothing_k.is_finite()) {
        return Err(LmError::Invalid(format!(
            "smoothing k must be positive, got {smoothing_k}"
        )));
    }
    let sequences: Vec<Vec<&str>> = corpus
        .iter()
        .map(|line| line.as_ref().split_whitespace().collect::<Vec<_>>())
        .filter(|toks| !toks.is_empty())
        .collect();
    if sequences.is_empty() {
        return Err(LmError::Invalid("training corpus is empty".into()));
    }

    let symbols: BTreeSet<&str> = sequences
        .iter()
        .flatten()
        .copied()
        .filter(|t| *t != NGRAM_EOS)
        .collect();
    let mut tokens: Vec<String> = symbols.into_iter().map(str::to_string).collect();
    tokens.push(NGRAM_EOS.to_string());
    if tokens.len() < 2 {
        return Err(LmError::Invalid(
            "training corpus has no tokens besides EOS".into(),
        ));
    }
    let vocab = Vocabulary::new(tokens, NGRAM_EOS)?;

    let window = order - 1;
    let mut counts: HashMap<Vec<TokenId>, Vec<u64>> = HashMap::new();
    for seq in &sequences {
        let mut ids: Vec<TokenId> = seq.iter().map(|t| vocab.id(t).expect("in vocab")).collect();
        ids.push(vocab.eos());
        for i in 0..ids.len() {
            let context = ids[i.saturating_sub(window)..i].to_vec();
            counts
                .entry(context)
                .or_insert_with(|| vec![0; vocab.len()])[ids[i]] += 1;
        }
    }
    Ok(NgramLm {
        vocab,
        order,
        smoothing_k,
        counts,
    })
}

impl NgramLm {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing_k(&self) -> f64 {
        self.smoothing_k
    }

    pub fn to_file_data(&self) -> NgramModelFile {
        NgramModelFile {
            vocab: self.vocab.tokens().to_vec(),
            eos: self.vocab.tokens()[self.vocab.eos()].clone(),
            order: self.order,
            smoothing_k: self.smoothing_k,
            counts: self
                .counts
                .iter()
                .map(|(ctx, c)| (self.vocab.context_key(ctx), c.clone()))
                .collect(),
        }
    }

    pub fn from_file_data(file: NgramModelFile) -> Result<Self, LmError> {
        if file.order == 0 || file.smoothing_k.is_nan() || file.smoothing_k <= 0.0 {
            return Err(LmError::Invalid(
                "order and smoothing k must be positive".into(),
            ));
        }
        let vocab = Vocabulary::new(file.vocab, &file.eos)?;
        let mut counts = HashMap::with_capacity(file.counts.len());
        for (key, row) in file.counts {
            let ctx = vocab.parse_tokens(&key)?;
            if ctx.len() >= file.order || row.len() != vocab.len() {
                return Err(LmError::Invalid(format!("count row `{key}` is malformed")));
            }
            counts.insert(ctx, row);
        }
        Ok(Self {
            vocab,
            order: file.order,
            smoothing_k: file.smoothing_k,
            counts,
        })
    }

    pub fn load(path: &Path) -> Result<Self, LmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LmError::Invalid(format!("{}: {e}", path.display())))?;
        let file: NgramModelFile =
            serde_json::from_str(&text).map_err(|e| LmError::Invalid(e.to_string()))?;
        Self::from_file_data(file)
    }
}

impl LanguageModel for NgramLm {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn context_window(&self) -> Option<usize> {
        Some(self.order - 1)
    }

    fn distribution(&self, state: &LmState) -> TokenDistribution {
        let size = self.vocab.len();
        match self.counts.get(state.context()) {
            None => TokenDistribution::uniform(size),
            Some(row) => {
                let total: u64 = row.iter().sum();
                let denom = total as f64 + self.smoothing_k * size as f64;
                TokenDistribution::from_weights(
                    row.iter()
                        .map(|&c| (c as f64 + self.smoothing_k) / denom)
                        .collect(),
                )
            }
        }
    }
}
