use super::{LanguageModel, LmState, TokenDistribution, Vocabulary};

/// Assigns the same probability to every token regardless of context.
#[derive(Debug, Clone)]
pub struct UniformLm {
    vocab: Vocabulary,
}

impl UniformLm {
    pub fn new(vocab: Vocabulary) -> Self {
        Self { vocab }
    }
}

impl LanguageModel for UniformLm {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn context_window(&self) -> Option<usize> {
        Some(0)
    }

    fn distribution(&self, _state: &LmState) -> TokenDistribution {
        TokenDistribution::uniform(self.vocab.len())
    }
}
