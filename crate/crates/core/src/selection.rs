//! Context-conditioned content selection over the grounding document.
//!
//! Each document sentence (or each of its words) is scored against every
//! context utterance, the per-utterance signals are fused with learned
//! weights and an optional recency decay, and units whose sigmoid score falls
//! below the gate threshold are zeroed out. Kept units are scaled by their
//! fused score.
//!
//! Fusion weights are allocated for the maximum number of turns and contexts
//! are right-aligned, so the most recent utterance always uses the last
//! weight and decays by `eta^0 = 1`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::SeqRep;
use crate::error::{CsnError, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{sigmoid, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionLevel {
    Sentence,
    Word,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// Plain learned linear combination (no decay).
    LearnedLinear,
    /// Learned linear combination of signals scaled by `eta^(n - i)`.
    DecayedLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub level: SelectionLevel,
    /// Gate threshold on the sigmoid of the fused score.
    pub gamma: f64,
    /// Decay factor for older utterances.
    pub eta: f64,
    pub fusion: FusionKind,
    /// Attention feature width of the word-level matching map.
    pub h: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            level: SelectionLevel::Word,
            gamma: 0.3,
            eta: 0.9,
            fusion: FusionKind::DecayedLinear,
            h: 8,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(CsnError::Config(format!("selection.gamma = {} not in [0, 1]", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(CsnError::Config(format!("selection.eta = {} not in [0, 1]", self.eta)));
        }
        if self.level == SelectionLevel::Word && self.h == 0 {
            return Err(CsnError::Config("selection.h must be >= 1".into()));
        }
        Ok(())
    }

    /// Right-aligned weight offset and per-utterance decay for a context of
    /// `turns` utterances out of at most `max_turns`.
    pub fn decay(&self, turns: usize, max_turns: usize) -> (usize, Vec<f64>) {
        assert!(turns >= 1 && turns <= max_turns, "context of {turns} turns, max {max_turns}");
        let factors = (0..turns)
            .map(|i| match self.fusion {
                FusionKind::LearnedLinear => 1.0,
                FusionKind::DecayedLinear => self.eta.powi((turns - 1 - i) as i32),
            })
            .collect();
        (max_turns - turns, factors)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SelectionParams {
    /// Fusion weights `w_1..w_n`.
    pub fusion: ParamId,
    /// Word-level map parameters `(W1, b1, v)`.
    pub word: Option<WordMapParams>,
}

#[derive(Debug, Clone, Copy)]
pub struct WordMapParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub v: ParamId,
}

impl SelectionParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        config: &SelectionConfig,
        max_turns: usize,
        rep_width: usize,
        rng: &mut R,
    ) -> Self {
        let fusion = store.add("selection.fusion", ParamKind::Bias, Tensor::full(&[max_turns], 1.0));
        let word = (config.level == SelectionLevel::Word).then(|| {
            let h = config.h;
            let bound = 1.0 / (rep_width as f64);
            WordMapParams {
                w1: store.add_uniform("selection.w1", ParamKind::Weight, &[rep_width, rep_width, h], bound, rng),
                b1: store.add("selection.b1", ParamKind::Bias, Tensor::zeros(&[h])),
                v: store.add_uniform("selection.v", ParamKind::Weight, &[h], 1.0 / (h as f64).sqrt(), rng),
            }
        });
        Self { fusion, word }
    }
}

/// Cosine similarity between the masked mean of each utterance and the masked
/// mean of the sentence; one scalar node per utterance.
pub fn sentence_match_scores(g: &mut Graph<'_>, context: &[SeqRep], sentence: &SeqRep) -> Vec<NodeId> {
    let s_bar = g.masked_mean(sentence.states, sentence.len);
    context
        .iter()
        .map(|u| {
            let c_bar = g.masked_mean(u.states, u.len);
            g.cosine(c_bar, s_bar)
        })
        .collect()
}

/// Fuses per-utterance signals (scalars or vectors of equal length).
pub fn fuse(g: &mut Graph<'_>, signals: &[NodeId], weights: NodeId, offset: usize, decay: &[f64]) -> NodeId {
    g.fuse(signals, weights, offset, decay)
}

/// Keep decisions `sigmoid(s) >= gamma` for each score entry.
///
/// The sigmoid never reaches 1, so `gamma = 1` blocks everything even where
/// the floating-point sigmoid rounds up to 1.0.
pub fn keep_mask(scores: &[f64], gamma: f64) -> Vec<bool> {
    scores.iter().map(|&s| gamma < 1.0 && sigmoid(s) >= gamma).collect()
}

/// Per-unit outcome of the gate.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedUnit {
    pub rep: SeqRep,
    /// Fused score(s) before gating: one entry (sentence level) or `L` entries.
    pub scores: Vec<f64>,
    /// Scores after gating (`S * keep`).
    pub retained: Vec<f64>,
    pub keep: Vec<bool>,
}

fn gate_unit(g: &mut Graph<'_>, score: NodeId, gamma: f64, sentence: &SeqRep) -> GatedUnit {
    let scores = g.value(score).data().to_vec();
    let keep = keep_mask(&scores, gamma);
    let retained = scores
        .iter()
        .zip(&keep)
        .map(|(&s, &k)| if k { s } else { 0.0 })
        .collect();
    let states = g.gate(score, sentence.states, &keep);
    GatedUnit {
        rep: SeqRep {
            states,
            len: sentence.len,
        },
        scores,
        retained,
        keep,
    }
}

/// Sentence-level gate on a scalar fused score.
pub fn gate_sentence(g: &mut Graph<'_>, score: NodeId, gamma: f64, sentence: &SeqRep) -> GatedUnit {
    assert_eq!(g.value(score).len(), 1, "sentence gate needs a scalar score");
    gate_unit(g, score, gamma, sentence)
}

/// Word-level gate on an `L`-vector of fused scores.
pub fn gate_word(g: &mut Graph<'_>, scores: NodeId, gamma: f64, sentence: &SeqRep) -> GatedUnit {
    assert_eq!(
        g.value(scores).len(),
        g.value(sentence.states).rows(),
        "word gate needs one score per position"
    );
    gate_unit(g, scores, gamma, sentence)
}

/// Word alignment maps `B_i` (`L_s × L_c`) between the sentence and each
/// utterance.
pub fn word_match_map(
    g: &mut Graph<'_>,
    context: &[SeqRep],
    sentence: &SeqRep,
    params: &WordMapParams,
) -> Result<Vec<NodeId>> {
    let width = g.value(sentence.states).cols();
    let wshape = g.store().value(params.w1).shape().to_vec();
    if wshape.len() != 3 || wshape[0] != width || wshape[1] != width {
        return Err(CsnError::Shape(format!(
            "W1 has shape {wshape:?}, representations have width {width}"
        )));
    }
    if let Some(u) = context.iter().find(|u| g.value(u.states).cols() != width) {
        return Err(CsnError::Shape(format!(
            "utterance width {} differs from sentence width {width}",
            g.value(u.states).cols()
        )));
    }
    let (w1, b1, v) = (g.param(params.w1), g.param(params.b1), g.param(params.v));
    Ok(context
        .iter()
        .map(|u| g.bilinear_map(sentence.states, u.states, w1, b1, v))
        .collect())
}

/// Max-pools each map over the utterance's unmasked words and fuses the
/// resulting per-word signals.
pub fn word_scores(
    g: &mut Graph<'_>,
    maps: &[NodeId],
    context: &[SeqRep],
    sentence: &SeqRep,
    weights: NodeId,
    offset: usize,
    decay: &[f64],
) -> NodeId {
    let pooled: Vec<NodeId> = maps
        .iter()
        .zip(context)
        .map(|(&b, u)| g.max_cols(b, sentence.len, u.len))
        .collect();
    g.fuse(&pooled, weights, offset, decay)
}

/// Gated document plus the per-unit selection diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub units: Vec<GatedUnit>,
}

impl SelectionResult {
    pub fn gated(&self) -> Vec<SeqRep> {
        self.units.iter().map(|u| u.rep).collect()
    }
}

/// Runs sentence- or word-level selection over every document sentence.
pub fn select_document(
    g: &mut Graph<'_>,
    config: &SelectionConfig,
    params: &SelectionParams,
    max_turns: usize,
    context: &[SeqRep],
    document: &[SeqRep],
) -> Result<SelectionResult> {
    if context.is_empty() {
        return Err(CsnError::MalformedSet("empty context".into()));
    }
    let (offset, decay) = config.decay(context.len(), max_turns);
    let weights = g.param(params.fusion);
    let mut units = Vec::with_capacity(document.len());
    for sentence in document {
        let unit = match config.level {
            SelectionLevel::Sentence => {
                let a = sentence_match_scores(g, context, sentence);
                let s = fuse(g, &a, weights, offset, &decay);
                gate_sentence(g, s, config.gamma, sentence)
            }
            SelectionLevel::Word => {
                let wp = params
                    .word
                    .as_ref()
                    .ok_or_else(|| CsnError::Config("word-level selection without map parameters".into()))?;
                let maps = word_match_map(g, context, sentence, wp)?;
                let s = word_scores(g, &maps, context, sentence, weights, offset, &decay);
                gate_word(g, s, config.gamma, sentence)
            }
        };
        units.push(unit);
    }
    Ok(SelectionResult { units })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(fusion: FusionKind, eta: f64) -> SelectionConfig {
        SelectionConfig {
            fusion,
            eta,
            ..SelectionConfig::default()
        }
    }

    #[test]
    fn decay_factors_right_align() {
        let (off, d) = config(FusionKind::DecayedLinear, 0.9).decay(3, 3);
        assert_eq!(off, 0);
        assert!((d[0] - 0.81).abs() < 1e-15 && d[1] == 0.9 && d[2] == 1.0);
        let (off, d) = config(FusionKind::DecayedLinear, 0.5).decay(2, 4);
        assert_eq!(off, 2);
        assert_eq!(d, vec![0.5, 1.0]);
        let (_, d) = config(FusionKind::DecayedLinear, 0.0).decay(3, 3);
        assert_eq!(d, vec![0.0, 0.0, 1.0]);
        let (_, d) = config(FusionKind::LearnedLinear, 0.2).decay(3, 3);
        assert_eq!(d, vec![1.0; 3]);
    }

    #[test]
    fn keep_mask_boundaries() {
        assert_eq!(keep_mask(&[0.0], 0.5), vec![true]);
        assert_eq!(keep_mask(&[2.0, -2.0], 0.6), vec![true, false]);
        assert_eq!(keep_mask(&[40.0, -3.0], 1.0), vec![false, false]);
        assert_eq!(keep_mask(&[-800.0], 0.0), vec![true]);
    }

    #[test]
    fn out_of_range_thresholds_are_rejected() {
        let mut c = SelectionConfig::default();
        c.gamma = 1.5;
        assert!(c.validate().is_err());
        c.gamma = 0.3;
        c.eta = -0.1;
        assert!(c.validate().is_err());
    }
}
