//! Context-response and document-response matching.
//!
//! For every context utterance and every gated document sentence a six
//! channel cube of word-word similarities against the response is built
//! (sequential, self-attended and cross-attended representations, each with a
//! bilinear and a cosine map). A small CNN turns each cube into a feature
//! vector, one LSTM per stream aggregates the vectors in order, and an MLP
//! over both final states yields the matching probability.

use rand::Rng;

use crate::data::CANDIDATES_PER_SET;
use crate::encoder::{LstmParams, SeqRep};
use crate::error::{CsnError, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const CUBE_CHANNELS: usize = 6;
pub const CONV1_FILTERS: usize = 32;
pub const CONV2_FILTERS: usize = 64;
const CONV1_KERNEL: usize = 3;
const CONV2_KERNEL: usize = 2;
const POOL1: usize = 3;
const POOL2: usize = 2;

/// Smallest sequence length the CNN geometry accepts.
pub const MIN_SEQ_LEN: usize = 4;

/// Width of the flattened CNN output for sequences of length `l`.
pub fn feature_width(l: usize) -> usize {
    let side = l.div_ceil(POOL1).div_ceil(POOL2);
    CONV2_FILTERS * side * side
}

/// Scaled dot-product attention: `softmax(q kᵀ / sqrt(D)) v` with keys at or
/// beyond `key_len` excluded and query rows at or beyond `query_len` zeroed.
/// With no valid key the output is zero.
pub fn attentive(
    g: &mut Graph<'_>,
    query: NodeId,
    query_len: usize,
    key: NodeId,
    value: NodeId,
    key_len: usize,
) -> NodeId {
    let width = g.value(query).cols();
    debug_assert_eq!(g.value(key).rows(), g.value(value).rows());
    let logits = g.matmul_t(query, key, false, true);
    let logits = g.scale(logits, 1.0 / (width as f64).sqrt());
    let weights = g.masked_softmax(logits, key_len);
    let out = g.matmul(weights, value);
    g.mask_rows(out, query_len)
}

/// Bilinear (`x H yᵀ`) and cosine similarity maps between two sequences.
pub fn similarity_pair(g: &mut Graph<'_>, x: NodeId, y: NodeId, h: NodeId) -> (NodeId, NodeId) {
    let xh = g.matmul(x, h);
    let bil = g.matmul_t(xh, y, false, true);
    let cos = g.pair_cosine(x, y);
    (bil, cos)
}

/// Similarity matrices `H1`, `H2`, `H3`.
#[derive(Debug, Clone, Copy)]
pub struct CubeParams {
    pub h: [ParamId; 3],
}

impl CubeParams {
    pub fn new<R: Rng>(store: &mut ParamStore, width: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (width as f64).sqrt();
        let mut mk = |i: usize| {
            store.add_uniform(format!("matching.h{i}"), ParamKind::Weight, &[width, width], bound, rng)
        };
        Self {
            h: [mk(1), mk(2), mk(3)],
        }
    }
}

fn check_widths(g: &Graph<'_>, reps: &[&SeqRep], width: usize, rows: usize) -> Result<()> {
    for r in reps {
        let shape = g.value(r.states).shape();
        if shape != [rows, width] {
            return Err(CsnError::Shape(format!(
                "representation of shape {shape:?}, expected [{rows}, {width}]"
            )));
        }
    }
    Ok(())
}

/// Cubes for each unit of one stream: `[6, L, L]` with unit words as rows
/// and response words as columns.
fn stream_cubes(
    g: &mut Graph<'_>,
    units: &[SeqRep],
    response: &SeqRep,
    r_self: NodeId,
    h: [NodeId; 3],
) -> Vec<NodeId> {
    units
        .iter()
        .map(|u| {
            let (m1b, m1c) = similarity_pair(g, u.states, response.states, h[0]);
            let u_self = attentive(g, u.states, u.len, u.states, u.states, u.len);
            let (m2b, m2c) = similarity_pair(g, u_self, r_self, h[1]);
            let u_cross = attentive(g, u.states, u.len, response.states, response.states, response.len);
            let r_cross = attentive(g, response.states, response.len, u.states, u.states, u.len);
            let (m3b, m3c) = similarity_pair(g, u_cross, r_cross, h[2]);
            g.stack(&[m1b, m1c, m2b, m2c, m3b, m3c])
        })
        .collect()
}

/// Builds the context-response and document-response cubes.
pub fn build_cubes(
    g: &mut Graph<'_>,
    context: &[SeqRep],
    document: &[SeqRep],
    response: &SeqRep,
    params: &CubeParams,
) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
    let shape = g.value(response.states).shape().to_vec();
    let (rows, width) = (shape[0], shape[1]);
    let hs = g.store().value(params.h[0]).shape().to_vec();
    if hs != [width, width] {
        return Err(CsnError::Shape(format!("H has shape {hs:?}, representations have width {width}")));
    }
    let all: Vec<&SeqRep> = context.iter().chain(document).collect();
    check_widths(g, &all, width, rows)?;
    let h = [g.param(params.h[0]), g.param(params.h[1]), g.param(params.h[2])];
    let r_self = attentive(g, response.states, response.len, response.states, response.states, response.len);
    let cr = stream_cubes(g, context, response, r_self, h);
    let dr = stream_cubes(g, document, response, r_self, h);
    Ok((cr, dr))
}

#[derive(Debug, Clone, Copy)]
pub struct CnnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl CnnParams {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, rng: &mut R) -> Self {
        let fan1 = (CUBE_CHANNELS * CONV1_KERNEL * CONV1_KERNEL) as f64;
        let fan2 = (CONV1_FILTERS * CONV2_KERNEL * CONV2_KERNEL) as f64;
        let (b1, b2) = ((6.0 / fan1).sqrt(), (6.0 / fan2).sqrt());
        Self {
            w1: store.add_uniform(
                format!("{prefix}.conv1.w"),
                ParamKind::Weight,
                &[CONV1_FILTERS, CUBE_CHANNELS, CONV1_KERNEL, CONV1_KERNEL],
                b1,
                rng,
            ),
            b1: store.add_uniform(format!("{prefix}.conv1.b"), ParamKind::Bias, &[CONV1_FILTERS], b1, rng),
            w2: store.add_uniform(
                format!("{prefix}.conv2.w"),
                ParamKind::Weight,
                &[CONV2_FILTERS, CONV1_FILTERS, CONV2_KERNEL, CONV2_KERNEL],
                b2,
                rng,
            ),
            b2: store.add_uniform(format!("{prefix}.conv2.b"), ParamKind::Bias, &[CONV2_FILTERS], b2, rng),
        }
    }
}

/// conv 3×3 → ReLU → pool 3 → conv 2×2 → ReLU → pool 2 → flatten.
pub fn cnn_extract(g: &mut Graph<'_>, cube: NodeId, params: &CnnParams) -> NodeId {
    let (w1, b1, w2, b2) = (g.param(params.w1), g.param(params.b1), g.param(params.w2), g.param(params.b2));
    let x = g.conv2d(cube, w1, b1);
    let x = g.relu(x);
    let x = g.max_pool(x, POOL1);
    let x = g.conv2d(x, w2, b2);
    let x = g.relu(x);
    let x = g.max_pool(x, POOL2);
    g.flatten(x)
}

#[derive(Debug, Clone, Copy)]
pub struct ScorerParams {
    pub context_lstm: LstmParams,
    pub document_lstm: LstmParams,
    pub hidden_w: ParamId,
    pub hidden_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl ScorerParams {
    pub fn new<R: Rng>(store: &mut ParamStore, feature: usize, hidden: usize, rng: &mut R) -> Self {
        let context_lstm = LstmParams::new(store, "aggregate.context", feature, hidden, rng);
        let document_lstm = LstmParams::new(store, "aggregate.document", feature, hidden, rng);
        let (input, width) = (2 * hidden, 4 * hidden);
        let bh = 1.0 / (input as f64).sqrt();
        let bo = 1.0 / (width as f64).sqrt();
        Self {
            context_lstm,
            document_lstm,
            hidden_w: store.add_uniform("mlp.hidden.w", ParamKind::Weight, &[input, width], bh, rng),
            hidden_b: store.add_uniform("mlp.hidden.b", ParamKind::Bias, &[width], bh, rng),
            out_w: store.add_uniform("mlp.out.w", ParamKind::Weight, &[width, 1], bo, rng),
            out_b: store.add("mlp.out.b", ParamKind::Bias, Tensor::scalar(prior_logit())),
        }
    }
}

/// Log-odds of a positive under one positive per candidate set. Starting the
/// output bias here keeps the first updates from being spent on (and the
/// ReLUs from dying while) fitting the label prior.
pub fn prior_logit() -> f64 {
    (1.0 / (CANDIDATES_PER_SET - 1) as f64).ln()
}

fn final_state(g: &mut Graph<'_>, features: &[NodeId], lstm: &LstmParams) -> NodeId {
    let seq = g.stack(features);
    let states = lstm.run(g, seq, features.len(), false);
    g.row(states, features.len() - 1)
}

/// Aggregates both feature sequences and returns the probability node.
pub fn aggregate_and_score(
    g: &mut Graph<'_>,
    context_features: &[NodeId],
    document_features: &[NodeId],
    params: &ScorerParams,
) -> NodeId {
    assert!(!context_features.is_empty() && !document_features.is_empty());
    let h1 = final_state(g, context_features, &params.context_lstm);
    let h2 = final_state(g, document_features, &params.document_lstm);
    let joint = g.concat(&[h1, h2]);
    let (hw, hb, ow, ob) = (
        g.param(params.hidden_w),
        g.param(params.hidden_b),
        g.param(params.out_w),
        g.param(params.out_b),
    );
    let hidden = g.linear(joint, hw, hb);
    let hidden = g.tanh(hidden);
    let logit = g.linear(hidden, ow, ob);
    g.sigmoid(logit)
}

/// Cross-entropy of one probability against its label.
pub fn loss(g: &mut Graph<'_>, prob: NodeId, label: u8) -> NodeId {
    g.bce(prob, f64::from(label))
}
