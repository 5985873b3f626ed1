//! Corpus types, tokenization and id encoding.
//!
//! Text flows through two stages: [`RawCandidateSet`] holds lowercased,
//! tokenized and truncated strings as read from disk (or produced by the
//! synthetic generator); [`CandidateSet`] holds the padded id sequences the
//! model consumes.

pub mod formats;
pub mod synthetic;
pub mod vocab;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CsnError, Result};
pub use crate::graph::PAD_ID;
pub use formats::{load_dataset, read_records, write_records, DatasetFormat};
pub use synthetic::{generate_synthetic_corpus, SyntheticOptions};
pub use vocab::{build_vocabulary, Vocabulary, UNK_ID};

/// Number of candidates per set (one positive, nineteen negatives).
pub const CANDIDATES_PER_SET: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Maximum context turns kept (the most recent ones).
    pub max_turns: usize,
    /// Maximum document sentences kept (the first ones).
    pub max_sentences: usize,
    /// Maximum tokens per utterance, sentence or response (the first ones).
    pub max_tokens: usize,
    pub min_count: usize,
    pub max_vocab: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            max_turns: 4,
            max_sentences: 4,
            max_tokens: 16,
            min_count: 1,
            max_vocab: 50_000,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("max_turns", self.max_turns),
            ("max_sentences", self.max_sentences),
            ("max_tokens", self.max_tokens),
            ("min_count", self.min_count),
            ("max_vocab", self.max_vocab),
        ] {
            if v == 0 {
                return Err(CsnError::Config(format!("corpus.{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// Lowercases, splits on whitespace and separates trailing punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let lower = word.to_lowercase();
        let trimmed = lower.trim_end_matches(is_terminal_punct);
        if trimmed.is_empty() {
            out.extend(lower.chars().map(String::from));
            continue;
        }
        let tail = &lower[trimmed.len()..];
        out.push(trimmed.to_string());
        out.extend(tail.chars().map(String::from));
    }
    out
}

fn is_terminal_punct(c: char) -> bool {
    matches!(c, '.' | ',' | '!' | '?' | ';' | ':')
}

fn truncate_tokens(mut tokens: Vec<String>, max: usize) -> Vec<String> {
    tokens.truncate(max);
    tokens
}

/// One candidate set as token strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCandidateSet {
    pub context: Vec<Vec<String>>,
    pub document: Vec<Vec<String>>,
    pub candidates: Vec<Vec<String>>,
    pub positive_index: usize,
    /// Index of the document sentence the positive response is grounded in,
    /// when known (synthetic corpora).
    pub planted: Option<usize>,
}

impl RawCandidateSet {
    /// Applies the corpus truncation policy: last `n` turns, first `m`
    /// sentences, first `L` tokens of every text.
    pub fn truncated(mut self, config: &CorpusConfig) -> Self {
        let n = config.max_turns;
        if self.context.len() > n {
            self.context.drain(..self.context.len() - n);
        }
        self.document.truncate(config.max_sentences);
        if let Some(p) = self.planted {
            if p >= self.document.len() {
                self.planted = None;
            }
        }
        let l = config.max_tokens;
        self.context = self.context.into_iter().map(|t| truncate_tokens(t, l)).collect();
        self.document = self.document.into_iter().map(|t| truncate_tokens(t, l)).collect();
        self.candidates = self.candidates.into_iter().map(|t| truncate_tokens(t, l)).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.candidates.len() != CANDIDATES_PER_SET {
            return Err(CsnError::MalformedSet(format!(
                "{} candidates, expected {CANDIDATES_PER_SET}",
                self.candidates.len()
            )));
        }
        if self.positive_index >= self.candidates.len() {
            return Err(CsnError::MalformedSet("positive index out of range".into()));
        }
        if self.context.is_empty() || self.document.is_empty() {
            return Err(CsnError::MalformedSet("empty context or document".into()));
        }
        Ok(())
    }

    pub fn tokens(&self) -> impl Iterator<Item = &String> {
        self.context
            .iter()
            .chain(&self.document)
            .chain(&self.candidates)
            .flatten()
    }
}

/// A padded id sequence: an utterance, a document sentence or a response.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    /// Exactly `L` ids; positions at or beyond `true_length` hold [`PAD_ID`].
    pub ids: Vec<usize>,
    pub true_length: usize,
}

pub type Utterance = TokenSeq;
pub type DocumentSentence = TokenSeq;

impl TokenSeq {
    pub fn encode(tokens: &[String], vocab: &Vocabulary, max_tokens: usize) -> Self {
        let mut ids: Vec<usize> = tokens.iter().take(max_tokens).map(|t| vocab.id(t)).collect();
        let true_length = ids.len();
        ids.resize(max_tokens, PAD_ID);
        Self { ids, true_length }
    }

    pub fn from_ids(mut ids: Vec<usize>, max_tokens: usize) -> Self {
        ids.truncate(max_tokens);
        let true_length = ids.len();
        ids.resize(max_tokens, PAD_ID);
        Self { ids, true_length }
    }

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }
}

/// One (context, document, response, label) instance.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub context: &'a [Utterance],
    pub document: &'a [DocumentSentence],
    pub response: &'a Utterance,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub context: Vec<Utterance>,
    pub document: Vec<DocumentSentence>,
    pub candidates: Vec<Utterance>,
    pub positive_index: usize,
    pub planted: Option<usize>,
}

impl CandidateSet {
    pub fn encode(raw: &RawCandidateSet, vocab: &Vocabulary, config: &CorpusConfig) -> Result<Self> {
        raw.validate()?;
        let l = config.max_tokens;
        let enc = |t: &Vec<String>| TokenSeq::encode(t, vocab, l);
        let mut context: Vec<Utterance> = raw.context.iter().map(enc).collect();
        if context.len() > config.max_turns {
            context.drain(..context.len() - config.max_turns);
        }
        let mut document: Vec<DocumentSentence> = raw.document.iter().map(enc).collect();
        document.truncate(config.max_sentences);
        Ok(Self {
            context,
            document,
            candidates: raw.candidates.iter().map(enc).collect(),
            positive_index: raw.positive_index,
            planted: raw.planted.filter(|&p| p < config.max_sentences),
        })
    }

    pub fn sample(&self, candidate: usize) -> Sample<'_> {
        Sample {
            context: &self.context,
            document: &self.document,
            response: &self.candidates[candidate],
            label: u8::from(candidate == self.positive_index),
        }
    }

    pub fn samples(&self) -> impl Iterator<Item = Sample<'_>> {
        (0..self.candidates.len()).map(|i| self.sample(i))
    }

    /// Permutes the candidates, keeping `positive_index` on the true response.
    pub fn shuffle_candidates<R: Rng>(&mut self, rng: &mut R) {
        let mut order: Vec<usize> = (0..self.candidates.len()).collect();
        order.shuffle(rng);
        let old = std::mem::take(&mut self.candidates);
        self.candidates = order.iter().map(|&i| old[i].clone()).collect();
        self.positive_index = order
            .iter()
            .position(|&i| i == self.positive_index)
            .expect("positive survives permutation");
    }

    pub fn validate(&self) -> Result<()> {
        if self.candidates.len() != CANDIDATES_PER_SET {
            return Err(CsnError::MalformedSet(format!(
                "{} candidates, expected {CANDIDATES_PER_SET}",
                self.candidates.len()
            )));
        }
        if self.positive_index >= self.candidates.len() {
            return Err(CsnError::MalformedSet("positive index out of range".into()));
        }
        if self.context.is_empty() || self.document.is_empty() {
            return Err(CsnError::MalformedSet("empty context or document".into()));
        }
        Ok(())
    }
}

pub fn encode_sets(
    raw: &[RawCandidateSet],
    vocab: &Vocabulary,
    config: &CorpusConfig,
) -> Result<Vec<CandidateSet>> {
    raw.iter().map(|r| CandidateSet::encode(r, vocab, config)).collect()
}

/// Splits sets into consecutive train/validation/test slices by fractions.
pub fn split_sets<T: Clone>(sets: &[T], valid_frac: f64, test_frac: f64) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = sets.len();
    let n_test = ((n as f64) * test_frac).round() as usize;
    let n_valid = ((n as f64) * valid_frac).round() as usize;
    let n_train = n.saturating_sub(n_test + n_valid);
    (
        sets[..n_train].to_vec(),
        sets[n_train..n_train + n_valid].to_vec(),
        sets[n_train + n_valid..].to_vec(),
    )
}
