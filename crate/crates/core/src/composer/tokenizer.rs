//! Tokenizer contract and the whitespace fallback used for desk-scale runs.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::dataset::McqaExample;
use crate::Result;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;

const SPECIALS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Text to token ids and back. Ids below 4 are reserved for the special
/// tokens above.
pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Result<Vec<u32>>;
    fn decode(&self, ids: &[u32]) -> String;
    fn vocab_size(&self) -> usize;
}

/// Lowercasing whitespace tokenizer over a closed vocabulary. Unknown words
/// map to `[UNK]`; stopwords are dropped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WhitespaceTokenizer {
    vocab: Vec<String>,
    #[serde(default)]
    stopwords: BTreeSet<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl WhitespaceTokenizer {
    /// Builds a vocabulary from `texts`, most frequent words first (ties by
    /// word), optionally capped at `max_words` non-special entries.
    /// Vocabulary over every passage, question and option of `examples`.
    pub fn for_examples(examples: &[McqaExample]) -> Self {
        Self::fit(
            examples.iter().flat_map(|e| {
                [e.passage.as_str(), e.question.as_str()]
                    .into_iter()
                    .chain(e.options.iter().map(String::as_str))
            }),
            None,
        )
    }

    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>, max_words: Option<usize>) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for word in words(text) {
                *counts.entry(word).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !SPECIALS.contains(&w.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        if let Some(cap) = max_words {
            ranked.truncate(cap);
        }
        Self::from_words(ranked.into_iter().map(|(w, _)| w))
    }

    pub fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(words).collect();
        let mut tok = Self {
            vocab,
            stopwords: BTreeSet::new(),
            index: HashMap::new(),
        };
        tok.rebuild_index();
        tok
    }

    /// Words removed before lookup (compared after lowercasing).
    pub fn with_stopwords<S: AsRef<str>>(mut self, words: impl IntoIterator<Item = S>) -> Self {
        self.stopwords = words.into_iter().map(|w| w.as_ref().to_lowercase()).collect();
        self
    }

    pub fn stopwords(&self) -> impl Iterator<Item = &str> {
        self.stopwords.iter().map(String::as_str)
    }

    /// Restores the lookup table after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    /// Id of a single word after normalization.
    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(&word.to_lowercase()).copied()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(&word.to_lowercase())
    }
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// The normal form the whitespace tokenizer sees: lowercased, single spaces.
pub fn normalize(text: &str) -> String {
    words(text).collect::<Vec<_>>().join(" ")
}

impl Tokenizer for WhitespaceTokenizer {
    fn encode(&self, text: &str) -> Result<Vec<u32>> {
        Ok(words(text)
            .filter(|w| !self.stopwords.contains(w))
            .map(|w| self.index.get(&w).copied().unwrap_or(UNK_ID))
            .collect())
    }

    fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.vocab.get(id as usize).map(String::as_str).unwrap_or("[UNK]"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }
}
