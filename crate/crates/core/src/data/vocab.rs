use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::data::{RawCandidateSet, PAD_ID};
use crate::error::{CsnError, Result};

pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
const RESERVED: usize = 2;

/// Token ↔ id mapping with `<pad>` = 0 and `<unk>` = 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from non-reserved tokens in id order.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut index = HashMap::new();
        index.insert(PAD_TOKEN.to_string(), PAD_ID);
        index.insert(UNK_TOKEN.to_string(), UNK_ID);
        for t in tokens {
            let t = t.into();
            if index.contains_key(&t) {
                continue;
            }
            index.insert(t.clone(), all.len());
            all.push(t);
        }
        Self { tokens: all, index }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN).to_string())
            .collect()
    }

    /// Non-reserved tokens in id order.
    pub fn entries(&self) -> &[String] {
        &self.tokens[RESERVED..]
    }

    /// One token per line; line `k` (0-based) holds id `k + 2`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.entries().join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| CsnError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CsnError::io(path, e))?;
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() || line.contains(char::is_whitespace) {
                return Err(CsnError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("invalid vocabulary entry {line:?}"),
                });
            }
            tokens.push(line.to_string());
        }
        let vocab = Self::from_tokens(tokens.iter().cloned());
        if vocab.size() != tokens.len() + RESERVED {
            return Err(CsnError::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: "duplicate or reserved tokens in vocabulary file".into(),
            });
        }
        Ok(vocab)
    }
}

/// Frequency-ranked vocabulary over every text in the corpus. Ties are broken
/// by token order so the result is deterministic.
pub fn build_vocabulary(
    sets: &[RawCandidateSet],
    min_count: usize,
    max_size: usize,
) -> Result<Vocabulary> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for set in sets {
        for t in set.tokens() {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(CsnError::EmptyCorpus);
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, c)| c >= min_count && t != PAD_TOKEN && t != UNK_TOKEN)
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.truncate(max_size);
    Ok(Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t)))
}
