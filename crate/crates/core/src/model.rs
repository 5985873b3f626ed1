//! The full network: shared encoder, content selection and dual matching.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CandidateSet, Sample, TokenSeq};
use crate::encoder::{encode_tokens, EncoderParams, SeqRep};
use crate::error::{CsnError, Result};
use crate::graph::{Graph, NodeId};
use crate::matching::{
    aggregate_and_score, build_cubes, cnn_extract, feature_width, loss, CnnParams, CubeParams, ScorerParams,
    MIN_SEQ_LEN,
};
use crate::params::{Gradients, ParamStore};
use crate::selection::{select_document, SelectionConfig, SelectionParams, SelectionResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Embedding width `d_e`.
    pub embed_dim: usize,
    /// Recurrent hidden width `d` per direction.
    pub hidden: usize,
    /// Context turns `n`.
    pub max_turns: usize,
    /// Document sentences `m`.
    pub max_sentences: usize,
    /// Tokens per text `L`.
    pub max_tokens: usize,
    pub selection: SelectionConfig,
    /// Use one CNN for both matching streams instead of one per stream.
    pub share_cnn: bool,
    pub embed_dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_tokens < MIN_SEQ_LEN {
            return Err(CsnError::Config(format!(
                "max_tokens = {} is too small for the CNN, need at least {MIN_SEQ_LEN}",
                self.max_tokens
            )));
        }
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("max_turns", self.max_turns),
            ("max_sentences", self.max_sentences),
        ] {
            if v == 0 {
                return Err(CsnError::Config(format!("model.{name} must be >= 1")));
            }
        }
        if self.vocab_size < 2 {
            return Err(CsnError::Config("vocabulary needs the two reserved ids".into()));
        }
        if !(0.0..1.0).contains(&self.embed_dropout) {
            return Err(CsnError::Config(format!("embed_dropout = {} not in [0, 1)", self.embed_dropout)));
        }
        self.selection.validate()
    }
}

/// Encoded context plus the gated document, shared by all candidates of a set.
#[derive(Debug, Clone)]
pub struct Grounding {
    pub context: Vec<SeqRep>,
    pub selection: SelectionResult,
}

#[derive(Debug, Clone)]
pub struct CsnModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub selection: SelectionParams,
    pub cubes: CubeParams,
    pub cnn_context: CnnParams,
    pub cnn_document: CnnParams,
    pub scorer: ScorerParams,
}

impl CsnModel {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let width = 2 * config.hidden;
        let encoder = EncoderParams::new(&mut store, config.vocab_size, config.embed_dim, config.hidden, rng);
        let selection = SelectionParams::new(&mut store, &config.selection, config.max_turns, width, rng);
        let cubes = CubeParams::new(&mut store, width, rng);
        let (cnn_context, cnn_document) = if config.share_cnn {
            let shared = CnnParams::new(&mut store, "cnn", rng);
            (shared, shared)
        } else {
            (
                CnnParams::new(&mut store, "cnn.context", rng),
                CnnParams::new(&mut store, "cnn.document", rng),
            )
        };
        let scorer = ScorerParams::new(&mut store, feature_width(config.max_tokens), config.hidden, rng);
        Ok(Self {
            config,
            store,
            encoder,
            selection,
            cubes,
            cnn_context,
            cnn_document,
            scorer,
        })
    }

    fn check_seq(&self, seq: &TokenSeq) -> Result<()> {
        if seq.ids.len() != self.config.max_tokens {
            return Err(CsnError::Shape(format!(
                "sequence of {} ids, model expects {}",
                seq.ids.len(),
                self.config.max_tokens
            )));
        }
        Ok(())
    }

    fn encode(&self, g: &mut Graph<'_>, seq: &TokenSeq, rng: Option<&mut ChaCha8Rng>) -> Result<SeqRep> {
        self.check_seq(seq)?;
        encode_tokens(g, seq, &self.encoder, self.config.embed_dropout, rng)
    }

    /// Encodes the context and document and runs content selection. The
    /// document is padded with empty sentences up to `m` so every set feeds
    /// the same number of units to the document aggregator.
    pub fn ground(
        &self,
        g: &mut Graph<'_>,
        context: &[TokenSeq],
        document: &[TokenSeq],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Grounding> {
        let (n, m) = (self.config.max_turns, self.config.max_sentences);
        if context.is_empty() || context.len() > n {
            return Err(CsnError::MalformedSet(format!("{} context turns, expected 1..={n}", context.len())));
        }
        if document.len() > m {
            return Err(CsnError::MalformedSet(format!("{} document sentences, expected at most {m}", document.len())));
        }
        let ctx = context
            .iter()
            .map(|u| self.encode(g, u, rng.as_deref_mut()))
            .collect::<Result<Vec<_>>>()?;
        let empty = TokenSeq::from_ids(Vec::new(), self.config.max_tokens);
        let mut doc = Vec::with_capacity(m);
        for s in document.iter().chain(std::iter::repeat(&empty).take(m - document.len())) {
            doc.push(self.encode(g, s, rng.as_deref_mut())?);
        }
        let selection = select_document(g, &self.config.selection, &self.selection, n, &ctx, &doc)?;
        Ok(Grounding { context: ctx, selection })
    }

    /// Matching probability node for one response against a grounding.
    pub fn score(
        &self,
        g: &mut Graph<'_>,
        grounding: &Grounding,
        response: &TokenSeq,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let r = self.encode(g, response, rng)?;
        let gated = grounding.selection.gated();
        let (cr, dr) = build_cubes(g, &grounding.context, &gated, &r, &self.cubes)?;
        let vc: Vec<NodeId> = cr.iter().map(|&c| cnn_extract(g, c, &self.cnn_context)).collect();
        let vd: Vec<NodeId> = dr.iter().map(|&c| cnn_extract(g, c, &self.cnn_document)).collect();
        Ok(aggregate_and_score(g, &vc, &vd, &self.scorer))
    }

    /// Loss node of one sample; dropout is applied when `rng` is given.
    pub fn sample_loss(&self, g: &mut Graph<'_>, sample: &Sample<'_>, mut rng: Option<&mut ChaCha8Rng>) -> Result<NodeId> {
        let grounding = self.ground(g, sample.context, sample.document, rng.as_deref_mut())?;
        let p = self.score(g, &grounding, sample.response, rng)?;
        Ok(loss(g, p, sample.label))
    }

    /// Summed loss over samples and its gradients, one graph per sample.
    pub fn batch_gradients(
        &self,
        samples: &[Sample<'_>],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, Gradients)> {
        let mut total = 0.0;
        let mut grads = Gradients::zeros_like(&self.store);
        for s in samples {
            let mut g = Graph::new(&self.store);
            let l = self.sample_loss(&mut g, s, rng.as_deref_mut())?;
            total += g.value(l).item();
            grads.accumulate(&g.backward(l));
        }
        Ok((total, grads))
    }

    /// Summed loss over samples in eval mode.
    pub fn batch_loss(&self, samples: &[Sample<'_>]) -> Result<f64> {
        let mut total = 0.0;
        for s in samples {
            let mut g = Graph::new(&self.store);
            let l = self.sample_loss(&mut g, s, None)?;
            total += g.value(l).item();
        }
        Ok(total)
    }

    /// Eval-mode probabilities for every candidate of a set, sharing the
    /// context and document encoding.
    pub fn score_set(&self, set: &CandidateSet) -> Result<Vec<f64>> {
        set.validate()?;
        let mut g = Graph::new(&self.store);
        let grounding = self.ground(&mut g, &set.context, &set.document, None)?;
        set.candidates
            .iter()
            .map(|c| {
                let p = self.score(&mut g, &grounding, c, None)?;
                Ok(g.value(p).item())
            })
            .collect()
    }

    /// Eval-mode probability of a single sample.
    pub fn score_sample(&self, sample: &Sample<'_>) -> Result<f64> {
        let mut g = Graph::new(&self.store);
        let grounding = self.ground(&mut g, sample.context, sample.document, None)?;
        let p = self.score(&mut g, &grounding, sample.response, None)?;
        Ok(g.value(p).item())
    }

    /// Eval-mode selection outcome for a set's document (padding sentences
    /// removed).
    pub fn inspect(&self, set: &CandidateSet) -> Result<SelectionResult> {
        let mut g = Graph::new(&self.store);
        let mut grounding = self.ground(&mut g, &set.context, &set.document, None)?;
        grounding.selection.units.truncate(set.document.len());
        Ok(grounding.selection)
    }
}
