//! Human-readable view of which document content the selector keeps.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::data::{CandidateSet, Vocabulary};
use crate::error::Result;
use crate::model::CsnModel;
use crate::selection::SelectionLevel;
use crate::tensor::sigmoid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordView {
    pub token: String,
    pub score: f64,
    pub keep: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceView {
    pub index: usize,
    pub planted: bool,
    /// Fused score (sentence level) or its maximum over words (word level).
    pub score: f64,
    pub keep: bool,
    /// Empty at sentence level.
    pub words: Vec<WordView>,
}

/// Selection outcome for every document sentence of `set`, in order.
pub fn selection_view(model: &CsnModel, vocab: &Vocabulary, set: &CandidateSet) -> Result<Vec<SentenceView>> {
    let result = model.inspect(set)?;
    let level = model.config.selection.level;
    Ok(result
        .units
        .iter()
        .zip(&set.document)
        .enumerate()
        .map(|(index, (unit, sentence))| {
            let planted = set.planted == Some(index);
            match level {
                SelectionLevel::Sentence => SentenceView {
                    index,
                    planted,
                    score: unit.scores[0],
                    keep: unit.keep[0],
                    words: Vec::new(),
                },
                SelectionLevel::Word => {
                    let tokens = vocab.decode(&sentence.ids[..sentence.true_length]);
                    let words: Vec<WordView> = tokens
                        .into_iter()
                        .zip(unit.scores.iter().zip(&unit.keep))
                        .map(|(token, (&score, &keep))| WordView { token, score, keep })
                        .collect();
                    SentenceView {
                        index,
                        planted,
                        score: words.iter().map(|w| w.score).fold(f64::NEG_INFINITY, f64::max),
                        keep: words.iter().any(|w| w.keep),
                        words,
                    }
                }
            }
        })
        .collect())
}

/// Renders one line per sentence: score, σ(score), keep flag, and at word
/// level each token prefixed with `+` (kept) or `-` (blocked).
pub fn render(views: &[SentenceView], vocab: &Vocabulary, set: &CandidateSet) -> String {
    let mut out = String::new();
    for v in views {
        let mark = if v.keep { "kept" } else { "blocked" };
        let planted = if v.planted { " (planted)" } else { "" };
        let _ = write!(
            out,
            "sentence {} {mark}{planted} S={:+.4} sigma={:.4}",
            v.index,
            v.score,
            sigmoid(v.score)
        );
        if v.words.is_empty() {
            let s = &set.document[v.index];
            let _ = writeln!(out, " | {}", vocab.decode(&s.ids[..s.true_length]).join(" "));
        } else {
            let kept = v.words.iter().filter(|w| w.keep).count();
            let _ = write!(out, " words {kept}/{} |", v.words.len());
            for w in &v.words {
                let sign = if w.keep { '+' } else { '-' };
                let _ = write!(out, " {sign}{}({:.2})", w.token, sigmoid(w.score));
            }
            out.push('\n');
        }
    }
    out
}

/// Share of sets with a known planted sentence in which that sentence is
/// kept; `None` when no set records one.
pub fn planted_kept_rate(model: &CsnModel, vocab: &Vocabulary, sets: &[CandidateSet]) -> Result<Option<f64>> {
    let mut seen = 0usize;
    let mut kept = 0usize;
    for set in sets.iter().filter(|s| s.planted.is_some()) {
        let views = selection_view(model, vocab, set)?;
        seen += 1;
        kept += usize::from(views.iter().any(|v| v.planted && v.keep));
    }
    Ok((seen > 0).then(|| kept as f64 / seen as f64))
}
