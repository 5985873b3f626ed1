//! Word embeddings and the shared bidirectional LSTM encoder.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::data::{TokenSeq, Vocabulary, PAD_ID};
use crate::error::{CsnError, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Initialization range for embedding rows without a pretrained vector.
pub const EMBED_INIT: f64 = 0.1;

#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub wih: ParamId,
    pub whh: ParamId,
    pub bias: ParamId,
}

impl LstmParams {
    /// Input weights are scaled by the input width and recurrent weights by
    /// the hidden width; biases start at zero so that early states depend on
    /// the input rather than on a shared offset.
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let (bi, bh) = (1.0 / (input as f64).sqrt(), 1.0 / (hidden as f64).sqrt());
        Self {
            wih: store.add_uniform(format!("{prefix}.w_ih"), ParamKind::Weight, &[input, 4 * hidden], bi, rng),
            whh: store.add_uniform(format!("{prefix}.w_hh"), ParamKind::Weight, &[hidden, 4 * hidden], bh, rng),
            bias: store.add(format!("{prefix}.bias"), ParamKind::Bias, Tensor::zeros(&[4 * hidden])),
        }
    }

    pub fn hidden(&self, store: &ParamStore) -> usize {
        store.value(self.whh).rows()
    }

    /// Runs the recurrence over the first `len` rows of `x`.
    pub fn run(&self, g: &mut Graph<'_>, x: NodeId, len: usize, reverse: bool) -> NodeId {
        let (wih, whh, b) = (g.param(self.wih), g.param(self.whh), g.param(self.bias));
        g.lstm(x, wih, whh, b, len, reverse)
    }
}

/// Encoder output: `L × 2d` hidden states whose rows at or beyond `len` are zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqRep {
    pub states: NodeId,
    pub len: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderParams {
    pub embedding: ParamId,
    pub forward: LstmParams,
    pub backward: LstmParams,
}

impl EncoderParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        vocab_size: usize,
        embed_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let mut table = Tensor::zeros(&[vocab_size, embed_dim]);
        for row in 1..vocab_size {
            for j in 0..embed_dim {
                table.data_mut()[row * embed_dim + j] = rng.gen_range(-EMBED_INIT..=EMBED_INIT);
            }
        }
        let embedding = store.add("embedding", ParamKind::Embedding, table);
        Self {
            embedding,
            forward: LstmParams::new(store, "encoder.fwd", embed_dim, hidden, rng),
            backward: LstmParams::new(store, "encoder.bwd", embed_dim, hidden, rng),
        }
    }
}

/// Draws an inverted-dropout multiplier mask: 0 with probability `rate`,
/// `1 / (1 - rate)` otherwise.
pub fn dropout_mask<R: Rng>(len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

/// Embeds a padded id sequence as an `L × d_e` matrix. Dropout is applied
/// only when an rng is supplied (training mode) and `rate > 0`.
pub fn embed<R: Rng>(
    g: &mut Graph<'_>,
    table: ParamId,
    ids: &[usize],
    dropout_rate: f64,
    rng: Option<&mut R>,
) -> Result<NodeId> {
    let t = g.store().value(table);
    let (size, width) = (t.rows(), t.cols());
    if let Some(&id) = ids.iter().find(|&&id| id >= size) {
        return Err(CsnError::IdOutOfRange { id, size });
    }
    let mask = match rng {
        Some(rng) if dropout_rate > 0.0 => Some(dropout_mask(ids.len() * width, dropout_rate, rng)),
        _ => None,
    };
    Ok(g.embed(table, ids, mask))
}

/// Bidirectional encoding of an `L × d_e` input; output is `L × 2d`.
pub fn encode_sequence(g: &mut Graph<'_>, embeddings: NodeId, len: usize, params: &EncoderParams) -> SeqRep {
    let fwd = params.forward.run(g, embeddings, len, false);
    let bwd = params.backward.run(g, embeddings, len, true);
    SeqRep {
        states: g.concat_cols(fwd, bwd),
        len,
    }
}

/// Embeds and encodes one token sequence.
pub fn encode_tokens<R: Rng>(
    g: &mut Graph<'_>,
    seq: &TokenSeq,
    params: &EncoderParams,
    dropout_rate: f64,
    rng: Option<&mut R>,
) -> Result<SeqRep> {
    let e = embed(g, params.embedding, &seq.ids, dropout_rate, rng)?;
    Ok(encode_sequence(g, e, seq.true_length, params))
}

/// Reads a text embedding file (`token v1 v2 ...` per line).
pub fn read_pretrained(path: &Path) -> Result<HashMap<String, Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| CsnError::io(path, e))?;
    let mut out = HashMap::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values: std::result::Result<Vec<f64>, _> = parts.map(str::parse).collect();
        let values = values.map_err(|e| CsnError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: format!("bad embedding value: {e}"),
        })?;
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(CsnError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("expected {w} values, found {}", values.len()),
                })
            }
            _ => {}
        }
        out.insert(token.to_string(), values);
    }
    Ok(out)
}

/// Fills embedding rows from one or more pretrained tables whose vectors are
/// concatenated per token. The combined width must equal the table width;
/// tokens missing from a source keep their random initialization in that
/// column block. Returns the number of rows touched.
pub fn load_pretrained(
    store: &mut ParamStore,
    table: ParamId,
    vocab: &Vocabulary,
    sources: &[HashMap<String, Vec<f64>>],
) -> Result<usize> {
    let width = store.value(table).cols();
    let widths: Vec<usize> = sources
        .iter()
        .map(|s| s.values().next().map_or(0, Vec::len))
        .collect();
    if widths.iter().sum::<usize>() != width {
        return Err(CsnError::Shape(format!(
            "pretrained widths {widths:?} do not add up to embedding width {width}"
        )));
    }
    let t = store.value_mut(table);
    let mut touched = 0;
    for (id, token) in vocab.entries().iter().enumerate().map(|(i, t)| (i + 2, t)) {
        let mut hit = false;
        let mut off = 0;
        for (src, &w) in sources.iter().zip(&widths) {
            if let Some(v) = src.get(token) {
                t.data_mut()[id * width + off..id * width + off + w].copy_from_slice(v);
                hit = true;
            }
            off += w;
        }
        touched += usize::from(hit);
    }
    debug_assert!(t.row(PAD_ID).iter().all(|&x| x == 0.0));
    Ok(touched)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sigmoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(vocab: usize, de: usize, d: usize) -> (ParamStore, EncoderParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let enc = EncoderParams::new(&mut store, vocab, de, d, &mut rng);
        (store, enc)
    }

    #[test]
    fn padding_rows_embed_to_zero() {
        let (store, enc) = setup(6, 3, 2);
        let mut g = Graph::new(&store);
        let e = embed::<ChaCha8Rng>(&mut g, enc.embedding, &[PAD_ID, PAD_ID], 0.2, None).unwrap();
        assert!(g.value(e).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn out_of_range_id_is_an_error() {
        let (store, enc) = setup(6, 3, 2);
        let mut g = Graph::new(&store);
        let err = embed::<ChaCha8Rng>(&mut g, enc.embedding, &[2, 6], 0.0, None).unwrap_err();
        assert!(matches!(err, CsnError::IdOutOfRange { id: 6, size: 6 }));
    }

    #[test]
    fn zero_rate_dropout_matches_eval_mode() {
        let (store, enc) = setup(6, 3, 2);
        let mut g = Graph::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = embed(&mut g, enc.embedding, &[2, 3, 4], 0.0, Some(&mut rng)).unwrap();
        let b = embed::<ChaCha8Rng>(&mut g, enc.embedding, &[2, 3, 4], 0.0, None).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn dropout_rate_is_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mask = dropout_mask(100_000, 0.2, &mut rng);
        let zeros = mask.iter().filter(|&&m| m == 0.0).count() as f64 / mask.len() as f64;
        assert!((zeros - 0.2).abs() <= 0.01, "zero rate {zeros}");
        assert!(mask.iter().all(|&m| m == 0.0 || (m - 1.25).abs() < 1e-12));
    }

    #[test]
    fn output_width_and_masking() {
        let (store, enc) = setup(8, 3, 2);
        let mut g = Graph::new(&store);
        let a = TokenSeq::from_ids(vec![2, 3, 4], 5);
        let b = TokenSeq::from_ids(vec![2, 3, 4], 7);
        let ra = encode_tokens::<ChaCha8Rng>(&mut g, &a, &enc, 0.0, None).unwrap();
        let rb = encode_tokens::<ChaCha8Rng>(&mut g, &b, &enc, 0.0, None).unwrap();
        let (va, vb) = (g.value(ra.states), g.value(rb.states));
        assert_eq!(va.shape(), &[5, 4]);
        assert_eq!(vb.shape(), &[7, 4]);
        for t in 0..3 {
            assert_eq!(va.row(t), vb.row(t));
        }
        for t in 3..5 {
            assert!(va.row(t).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn all_masked_input_gives_zero_representation() {
        let (store, enc) = setup(8, 3, 2);
        let mut g = Graph::new(&store);
        let seq = TokenSeq::from_ids(vec![], 4);
        let r = encode_tokens::<ChaCha8Rng>(&mut g, &seq, &enc, 0.0, None).unwrap();
        assert!(g.value(r.states).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_step_directions_agree_with_tied_weights() {
        let (mut store, enc) = setup(8, 3, 2);
        for (f, b) in [
            (enc.forward.wih, enc.backward.wih),
            (enc.forward.whh, enc.backward.whh),
            (enc.forward.bias, enc.backward.bias),
        ] {
            let v = store.value(f).clone();
            *store.value_mut(b) = v;
        }
        let mut g = Graph::new(&store);
        let seq = TokenSeq::from_ids(vec![5], 1);
        let r = encode_tokens::<ChaCha8Rng>(&mut g, &seq, &enc, 0.0, None).unwrap();
        let row = g.value(r.states).row(0).to_vec();
        assert_eq!(row.len(), 4);
        assert_eq!(row[..2], row[2..]);
    }

    /// Step-by-step scalar LSTM used as an independent reference.
    fn reference_lstm(x: &[Vec<f64>], wih: &Tensor, whh: &Tensor, b: &Tensor, reverse: bool) -> Vec<Vec<f64>> {
        let hd = whh.rows();
        let mut h = vec![0.0; hd];
        let mut c = vec![0.0; hd];
        let mut out = vec![vec![0.0; hd]; x.len()];
        let order: Vec<usize> = if reverse { (0..x.len()).rev().collect() } else { (0..x.len()).collect() };
        for t in order {
            let mut z = vec![0.0; 4 * hd];
            for (j, zj) in z.iter_mut().enumerate() {
                *zj = b.data()[j];
                for (p, xp) in x[t].iter().enumerate() {
                    *zj += xp * wih.at2(p, j);
                }
                for (p, hp) in h.iter().enumerate() {
                    *zj += hp * whh.at2(p, j);
                }
            }
            for j in 0..hd {
                let i = sigmoid(z[j]);
                let f = sigmoid(z[hd + j]);
                let gg = z[2 * hd + j].tanh();
                let o = sigmoid(z[3 * hd + j]);
                c[j] = f * c[j] + i * gg;
                h[j] = o * c[j].tanh();
            }
            out[t] = h.clone();
        }
        out
    }

    #[test]
    fn matches_reference_recurrence() {
        let (store, enc) = setup(10, 2, 2);
        let seq = TokenSeq::from_ids(vec![3, 7, 2], 3);
        let mut g = Graph::new(&store);
        let r = encode_tokens::<ChaCha8Rng>(&mut g, &seq, &enc, 0.0, None).unwrap();
        let table = store.value(enc.embedding);
        let x: Vec<Vec<f64>> = seq.ids.iter().map(|&i| table.row(i).to_vec()).collect();
        let p = |id| store.value(id);
        let f = reference_lstm(&x, p(enc.forward.wih), p(enc.forward.whh), p(enc.forward.bias), false);
        let b = reference_lstm(&x, p(enc.backward.wih), p(enc.backward.whh), p(enc.backward.bias), true);
        let got = g.value(r.states);
        for t in 0..3 {
            let expect: Vec<f64> = f[t].iter().chain(&b[t]).copied().collect();
            for (a, e) in got.row(t).iter().zip(&expect) {
                assert!((a - e).abs() <= 1e-6, "t={t}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn pretrained_vectors_are_concatenated() {
        let (mut store, enc) = setup(4, 3, 2);
        let vocab = Vocabulary::from_tokens(["x", "y"]);
        let mut a = HashMap::new();
        a.insert("x".to_string(), vec![1.0, 2.0]);
        let mut b = HashMap::new();
        b.insert("x".to_string(), vec![3.0]);
        b.insert("y".to_string(), vec![4.0]);
        let before_y = store.value(enc.embedding).row(3).to_vec();
        let n = load_pretrained(&mut store, enc.embedding, &vocab, &[a, b]).unwrap();
        assert_eq!(n, 2);
        let t = store.value(enc.embedding);
        assert_eq!(t.row(2), &[1.0, 2.0, 3.0]);
        assert_eq!(&t.row(3)[..2], &before_y[..2]);
        assert_eq!(t.row(3)[2], 4.0);
        assert!(t.row(0).iter().all(|&x| x == 0.0));
    }
}
