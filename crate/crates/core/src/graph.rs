//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied during a forward pass. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradients of every parameter that took part in the computation.
//!
//! Masks are always prefix masks expressed as a true length: positions at or
//! beyond the length are padding.

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{cosine, dot, gemm_acc, norm, sigmoid, Tensor};

pub const PAD_ID: usize = 0;
const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Embed {
        table: ParamId,
        ids: Vec<usize>,
        dropout: Option<Vec<f64>>,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
        trans_a: bool,
        trans_b: bool,
    },
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    MaskRows(NodeId, usize),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Lstm(Box<LstmCache>),
    ConcatCols(NodeId, NodeId),
    MaskedMean(NodeId, usize),
    Cosine(NodeId, NodeId),
    PairCosine(NodeId, NodeId),
    MaskedSoftmax(NodeId, usize),
    Bilinear(Box<BilinearCache>),
    MaxCols {
        a: NodeId,
        argmax: Vec<Option<usize>>,
    },
    Fuse {
        signals: Vec<NodeId>,
        weights: NodeId,
        offset: usize,
        decay: Vec<f64>,
    },
    Gate {
        score: NodeId,
        rep: NodeId,
        keep: Vec<bool>,
    },
    Stack(Vec<NodeId>),
    Conv2d(Box<ConvCache>),
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Reshape(NodeId),
    Row(NodeId, usize),
    Concat(Vec<NodeId>),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Bce {
        prob: NodeId,
        label: f64,
    },
    Sum(Vec<NodeId>),
}

#[derive(Debug)]
struct LstmCache {
    x: NodeId,
    wih: NodeId,
    whh: NodeId,
    b: NodeId,
    len: usize,
    reverse: bool,
    /// Activated gates (i, f, g, o) per processed step, in time order.
    gates: Vec<f64>,
    cells: Vec<f64>,
}

#[derive(Debug)]
struct BilinearCache {
    s: NodeId,
    c: NodeId,
    w: NodeId,
    b1: NodeId,
    v: NodeId,
    /// `proj[a, q, k] = sum_p s[a, p] * w[p, q, k]`
    proj: Vec<f64>,
    /// `act[a, b, k] = tanh(pre-activation)`
    act: Vec<f64>,
}

#[derive(Debug)]
struct ConvCache {
    x: NodeId,
    w: NodeId,
    b: NodeId,
    kernel: usize,
    cols: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    /// One leaf per parameter, created on first use.
    params: Vec<Option<NodeId>>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = match op {
            Op::Constant => false,
            Op::Param(_) | Op::Embed { .. } => true,
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant, &[])
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(node) = self.params[id.0] {
            return node;
        }
        let value = self.store.value(id).clone();
        let node = self.push(value, Op::Param(id), &[]);
        self.params[id.0] = Some(node);
        node
    }

    /// Looks up embedding rows; `dropout` is an optional per-element multiplier
    /// (already scaled by `1 / (1 - rate)` for kept entries).
    pub fn embed(&mut self, table: ParamId, ids: &[usize], dropout: Option<Vec<f64>>) -> NodeId {
        let t = self.store.value(table);
        let width = t.cols();
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id == PAD_ID {
                data.extend(std::iter::repeat_n(0.0, width));
            } else {
                data.extend_from_slice(t.row(id));
            }
        }
        if let Some(mask) = &dropout {
            assert_eq!(mask.len(), data.len());
            for (v, m) in data.iter_mut().zip(mask) {
                *v *= m;
            }
        }
        let value = Tensor::matrix(ids.len(), width, data);
        self.push(
            value,
            Op::Embed {
                table,
                ids: ids.to_vec(),
                dropout,
            },
            &[],
        )
    }

    /// Matrix product of two matrices, either optionally transposed.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, trans_a: bool, trans_b: bool) -> NodeId {
        let (ar, ac) = (self.shape(a)[0], self.shape(a)[1]);
        let (br, bc) = (self.shape(b)[0], self.shape(b)[1]);
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dimensions differ");
        let mut out = vec![0.0; m * n];
        gemm_acc(
            m,
            k,
            n,
            self.value(a).data(),
            trans_a,
            self.value(b).data(),
            trans_b,
            &mut out,
        );
        self.push(
            Tensor::matrix(m, n, out),
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
            &[a, b],
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_t(a, b, false, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b));
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let mut v = self.value(a).clone();
        v.data_mut().iter_mut().for_each(|x| *x *= factor);
        self.push(v, Op::Scale(a, factor), &[a])
    }

    /// Zeroes every row at or beyond `len`.
    pub fn mask_rows(&mut self, a: NodeId, len: usize) -> NodeId {
        let mut v = self.value(a).clone();
        let c = v.cols();
        let r = v.rows();
        for x in &mut v.data_mut()[len.min(r) * c..] {
            *x = 0.0;
        }
        self.push(v, Op::MaskRows(a, len), &[a])
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let mut v = self.value(a).clone();
        v.data_mut().iter_mut().for_each(|x| *x = f(*x));
        self.push(v, op, &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    /// Single-direction LSTM over the first `len` rows of `x` (`T × I`).
    ///
    /// Weights: `wih` is `I × 4H`, `whh` is `H × 4H`, `b` is `4H`, gate order
    /// (input, forget, cell, output). Output is `T × H` with rows at or beyond
    /// `len` zero. With `reverse` the recurrence starts at row `len - 1`.
    pub fn lstm(
        &mut self,
        x: NodeId,
        wih: NodeId,
        whh: NodeId,
        b: NodeId,
        len: usize,
        reverse: bool,
    ) -> NodeId {
        let xv = self.value(x);
        let (t_max, input) = (xv.rows(), xv.cols());
        let hidden = self.shape(whh)[0];
        let g4 = 4 * hidden;
        assert_eq!(self.shape(wih), &[input, g4]);
        assert_eq!(self.shape(whh), &[hidden, g4]);
        assert_eq!(self.shape(b), &[g4]);
        let len = len.min(t_max);
        let (xd, wi, wh, bd) = (
            xv.data(),
            self.value(wih).data(),
            self.value(whh).data(),
            self.value(b).data(),
        );
        let mut out = vec![0.0; t_max * hidden];
        let mut gates = vec![0.0; t_max * g4];
        let mut cells = vec![0.0; t_max * hidden];
        let mut h = vec![0.0; hidden];
        let mut c = vec![0.0; hidden];
        let mut z = vec![0.0; g4];
        for step in 0..len {
            let t = if reverse { len - 1 - step } else { step };
            z.copy_from_slice(bd);
            let xt = &xd[t * input..(t + 1) * input];
            for (p, &xp) in xt.iter().enumerate() {
                if xp != 0.0 {
                    let row = &wi[p * g4..(p + 1) * g4];
                    for (zj, wj) in z.iter_mut().zip(row) {
                        *zj += xp * wj;
                    }
                }
            }
            for (p, &hp) in h.iter().enumerate() {
                let row = &wh[p * g4..(p + 1) * g4];
                for (zj, wj) in z.iter_mut().zip(row) {
                    *zj += hp * wj;
                }
            }
            let gt = &mut gates[t * g4..(t + 1) * g4];
            for j in 0..hidden {
                let i_g = sigmoid(z[j]);
                let f_g = sigmoid(z[hidden + j]);
                let c_g = z[2 * hidden + j].tanh();
                let o_g = sigmoid(z[3 * hidden + j]);
                gt[j] = i_g;
                gt[hidden + j] = f_g;
                gt[2 * hidden + j] = c_g;
                gt[3 * hidden + j] = o_g;
                c[j] = f_g * c[j] + i_g * c_g;
                h[j] = o_g * c[j].tanh();
            }
            cells[t * hidden..(t + 1) * hidden].copy_from_slice(&c);
            out[t * hidden..(t + 1) * hidden].copy_from_slice(&h);
        }
        let cache = LstmCache {
            x,
            wih,
            whh,
            b,
            len,
            reverse,
            gates,
            cells,
        };
        self.push(
            Tensor::matrix(t_max, hidden, out),
            Op::Lstm(Box::new(cache)),
            &[x, wih, whh, b],
        )
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows(), bv.rows());
        let (r, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        self.push(Tensor::matrix(r, ca + cb, data), Op::ConcatCols(a, b), &[a, b])
    }

    /// Mean over the first `len` rows; zero vector when `len == 0`.
    pub fn masked_mean(&mut self, a: NodeId, len: usize) -> NodeId {
        let av = self.value(a);
        let c = av.cols();
        let len = len.min(av.rows());
        let mut out = vec![0.0; c];
        if len > 0 {
            for i in 0..len {
                for (o, x) in out.iter_mut().zip(av.row(i)) {
                    *o += x;
                }
            }
            let inv = len as f64;
            out.iter_mut().for_each(|o| *o /= inv);
        }
        self.push(Tensor::vector(out), Op::MaskedMean(a, len), &[a])
    }

    /// Cosine similarity of two vectors; 0 when either has zero norm.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = cosine(self.value(a).data(), self.value(b).data());
        self.push(Tensor::scalar(v), Op::Cosine(a, b), &[a, b])
    }

    /// Pairwise row cosine similarities: `out[i, j] = cos(x_i, y_j)`.
    pub fn pair_cosine(&mut self, x: NodeId, y: NodeId) -> NodeId {
        let (xv, yv) = (self.value(x), self.value(y));
        let (rx, ry) = (xv.rows(), yv.rows());
        let mut out = vec![0.0; rx * ry];
        let ny: Vec<f64> = (0..ry).map(|j| norm(yv.row(j))).collect();
        for i in 0..rx {
            let xi = xv.row(i);
            let nx = norm(xi);
            if nx == 0.0 {
                continue;
            }
            for j in 0..ry {
                if ny[j] != 0.0 {
                    out[i * ry + j] = dot(xi, yv.row(j)) / (nx * ny[j]);
                }
            }
        }
        self.push(Tensor::matrix(rx, ry, out), Op::PairCosine(x, y), &[x, y])
    }

    /// Row-wise softmax over the first `key_len` columns; remaining columns
    /// (and every column when `key_len == 0`) are zero.
    pub fn masked_softmax(&mut self, a: NodeId, key_len: usize) -> NodeId {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let key_len = key_len.min(c);
        let mut out = vec![0.0; r * c];
        if key_len > 0 {
            for i in 0..r {
                let row = &av.row(i)[..key_len];
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let o = &mut out[i * c..i * c + key_len];
                let mut total = 0.0;
                for (oj, x) in o.iter_mut().zip(row) {
                    *oj = (x - mx).exp();
                    total += *oj;
                }
                o.iter_mut().for_each(|v| *v /= total);
            }
        }
        self.push(
            Tensor::matrix(r, c, out),
            Op::MaskedSoftmax(a, key_len),
            &[a],
        )
    }

    /// Word alignment map `out[a, b] = sum_k v[k] tanh(s_a^T W[:, :, k] c_b + b1[k])`.
    ///
    /// `s` is `Ls × D`, `c` is `Lc × D`, `w` is `D × D × h`.
    pub fn bilinear_map(
        &mut self,
        s: NodeId,
        c: NodeId,
        w: NodeId,
        b1: NodeId,
        v: NodeId,
    ) -> NodeId {
        let (sv, cv, wv) = (self.value(s), self.value(c), self.value(w));
        let (ls, dim) = (sv.rows(), sv.cols());
        let lc = cv.rows();
        assert_eq!(cv.cols(), dim, "bilinear map: width mismatch");
        assert_eq!(&wv.shape()[..2], &[dim, dim], "bilinear map: W1 shape");
        let h = wv.shape()[2];
        assert_eq!(self.shape(b1), &[h]);
        assert_eq!(self.shape(v), &[h]);
        // proj[a, (q, k)] = s[a, :] · W[:, (q, k)]
        let mut proj = vec![0.0; ls * dim * h];
        gemm_acc(ls, dim, dim * h, sv.data(), false, wv.data(), false, &mut proj);
        let (bd, vd) = (self.value(b1).data(), self.value(v).data());
        let mut act = vec![0.0; ls * lc * h];
        let mut out = vec![0.0; ls * lc];
        let cd = cv.data();
        for a in 0..ls {
            let pa = &proj[a * dim * h..(a + 1) * dim * h];
            for bb in 0..lc {
                let cb = &cd[bb * dim..(bb + 1) * dim];
                let cell = &mut act[(a * lc + bb) * h..(a * lc + bb + 1) * h];
                cell.copy_from_slice(bd);
                for (q, &cq) in cb.iter().enumerate() {
                    if cq != 0.0 {
                        for (ck, pk) in cell.iter_mut().zip(&pa[q * h..(q + 1) * h]) {
                            *ck += pk * cq;
                        }
                    }
                }
                let mut acc = 0.0;
                for (ck, vk) in cell.iter_mut().zip(vd) {
                    *ck = ck.tanh();
                    acc += vk * *ck;
                }
                out[a * lc + bb] = acc;
            }
        }
        let cache = BilinearCache {
            s,
            c,
            w,
            b1,
            v,
            proj,
            act,
        };
        self.push(
            Tensor::matrix(ls, lc, out),
            Op::Bilinear(Box::new(cache)),
            &[s, c, w, b1, v],
        )
    }

    /// Row-wise max over the first `col_len` columns for the first `row_len`
    /// rows; every other output entry is 0.
    pub fn max_cols(&mut self, a: NodeId, row_len: usize, col_len: usize) -> NodeId {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let col_len = col_len.min(c);
        let mut out = vec![0.0; r];
        let mut argmax = vec![None; r];
        if col_len > 0 {
            for i in 0..row_len.min(r) {
                let row = av.row(i);
                let mut best = 0;
                for j in 1..col_len {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                out[i] = row[best];
                argmax[i] = Some(best);
            }
        }
        self.push(Tensor::vector(out), Op::MaxCols { a, argmax }, &[a])
    }

    /// Weighted combination `sum_i weights[offset + i] * decay[i] * signals[i]`.
    pub fn fuse(
        &mut self,
        signals: &[NodeId],
        weights: NodeId,
        offset: usize,
        decay: &[f64],
    ) -> NodeId {
        assert!(!signals.is_empty());
        assert_eq!(signals.len(), decay.len());
        assert!(offset + signals.len() <= self.value(weights).len());
        let k = self.value(signals[0]).len();
        let wv = self.value(weights).data();
        let mut out = vec![0.0; k];
        for (i, &sig) in signals.iter().enumerate() {
            let coef = wv[offset + i] * decay[i];
            let sv = self.value(sig).data();
            assert_eq!(sv.len(), k);
            for (o, x) in out.iter_mut().zip(sv) {
                *o += coef * x;
            }
        }
        let shape = self.shape(signals[0]).to_vec();
        let mut inputs = signals.to_vec();
        inputs.push(weights);
        self.push(
            Tensor::new(shape, out),
            Op::Fuse {
                signals: signals.to_vec(),
                weights,
                offset,
                decay: decay.to_vec(),
            },
            &inputs,
        )
    }

    /// Hard gate: row `t` of the output is `score_t * rep_t` when `keep[t]`
    /// and exactly zero otherwise. A one-element `score`/`keep` applies to
    /// every row. `keep` is treated as a constant during differentiation.
    pub fn gate(&mut self, score: NodeId, rep: NodeId, keep: &[bool]) -> NodeId {
        let rv = self.value(rep);
        let (r, c) = (rv.rows(), rv.cols());
        let sv = self.value(score).data();
        let per_row = sv.len() != 1;
        if per_row {
            assert_eq!(sv.len(), r);
        }
        assert_eq!(keep.len(), sv.len());
        let mut out = vec![0.0; r * c];
        for t in 0..r {
            let idx = if per_row { t } else { 0 };
            if keep[idx] {
                let s = sv[idx];
                for (o, x) in out[t * c..(t + 1) * c].iter_mut().zip(rv.row(t)) {
                    *o = s * x;
                }
            }
        }
        self.push(
            Tensor::matrix(r, c, out),
            Op::Gate {
                score,
                rep,
                keep: keep.to_vec(),
            },
            &[score, rep],
        )
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let inner = self.shape(parts[0]).to_vec();
        let mut data = Vec::with_capacity(parts.len() * self.value(parts[0]).len());
        for &p in parts {
            assert_eq!(self.shape(p), inner.as_slice(), "stack: shape mismatch");
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        self.push(Tensor::new(shape, data), Op::Stack(parts.to_vec()), parts)
    }

    /// Size-preserving 2-D convolution of a `C × H × W` input with an
    /// `F × C × k × k` kernel. Odd kernels pad symmetrically; even kernels pad
    /// `k/2 - 1` before and `k/2` after.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "conv2d input must be C×H×W");
        assert_eq!(ws.len(), 4, "conv2d kernel must be F×C×k×k");
        let (ch, hh, ww) = (xs[0], xs[1], xs[2]);
        let (f, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], ch, "conv2d channel mismatch");
        assert_eq!(ws[3], k);
        let cols = im2col(self.value(x).data(), ch, hh, ww, k);
        let hw = hh * ww;
        let mut out = vec![0.0; f * hw];
        let bd = self.value(b).data();
        for (fi, bias) in bd.iter().enumerate() {
            out[fi * hw..(fi + 1) * hw].fill(*bias);
        }
        gemm_acc(f, ch * k * k, hw, self.value(w).data(), false, &cols, false, &mut out);
        let cache = ConvCache {
            x,
            w,
            b,
            kernel: k,
            cols,
        };
        self.push(
            Tensor::new(vec![f, hh, ww], out),
            Op::Conv2d(Box::new(cache)),
            &[x, w, b],
        )
    }

    /// Non-overlapping `p × p` max pooling; partial windows at the bottom and
    /// right edges are kept (output size `ceil(H / p) × ceil(W / p)`).
    pub fn max_pool(&mut self, x: NodeId, p: usize) -> NodeId {
        let xs = self.shape(x).to_vec();
        let (ch, hh, ww) = (xs[0], xs[1], xs[2]);
        let (oh, ow) = (hh.div_ceil(p), ww.div_ceil(p));
        let xd = self.value(x).data();
        let mut out = vec![0.0; ch * oh * ow];
        let mut argmax = vec![0; ch * oh * ow];
        for c in 0..ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = usize::MAX;
                    for y in oy * p..(oy * p + p).min(hh) {
                        for xx in ox * p..(ox * p + p).min(ww) {
                            let idx = (c * hh + y) * ww + xx;
                            if best == usize::MAX || xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    let o = (c * oh + oy) * ow + ox;
                    out[o] = xd[best];
                    argmax[o] = best;
                }
            }
        }
        self.push(
            Tensor::new(vec![ch, oh, ow], out),
            Op::MaxPool { x, argmax },
            &[x],
        )
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        let v = self.value(a).clone().reshaped(shape);
        self.push(v, Op::Reshape(a), &[a])
    }

    pub fn flatten(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len();
        self.reshape(a, vec![n])
    }

    pub fn row(&mut self, a: NodeId, i: usize) -> NodeId {
        let v = Tensor::vector(self.value(a).row(i).to_vec());
        self.push(v, Op::Row(a, i), &[a])
    }

    /// Concatenates tensors into one flat vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), parts)
    }

    /// Affine map of a vector: `x (in) · w (in × out) + b (out)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (i, o) = (wv.rows(), wv.cols());
        assert_eq!(xv.len(), i, "linear: input width");
        assert_eq!(bv.len(), o, "linear: bias width");
        let mut out = bv.data().to_vec();
        gemm_acc(1, i, o, xv.data(), false, wv.data(), false, &mut out);
        self.push(Tensor::vector(out), Op::Linear { x, w, b }, &[x, w, b])
    }

    /// Binary cross-entropy of a probability against a 0/1 label, with the
    /// probability clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, prob: NodeId, label: f64) -> NodeId {
        let g = self.value(prob).item().clamp(BCE_EPS, 1.0 - BCE_EPS);
        let loss = -(label * g.ln() + (1.0 - label) * (1.0 - g).ln());
        self.push(Tensor::scalar(loss), Op::Bce { prob, label }, &[prob])
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn sum(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let mut v = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            v.add_assign(self.value(p));
        }
        self.push(v, Op::Sum(parts.to_vec()), parts)
    }

    /// Reverse pass from a scalar node; returns parameter gradients.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::new(self.shape(root).to_vec(), vec![1.0]));
        let mut out = Gradients::zeros_like(self.store);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads, &mut out);
        }
        out
    }

    fn backward_node(
        &self,
        node: &Node,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        out: &mut Gradients,
    ) {
        let gd = g.data();
        match &node.op {
            Op::Constant => {}
            Op::Param(pid) => {
                out.entry(*pid, node.value.shape()).add_assign(g);
            }
            Op::Embed {
                table,
                ids,
                dropout,
            } => {
                let width = node.value.cols();
                let shape = self.store.value(*table).shape().to_vec();
                let acc = out.entry(*table, &shape);
                let ad = acc.data_mut();
                for (t, &id) in ids.iter().enumerate() {
                    if id == PAD_ID {
                        continue;
                    }
                    for j in 0..width {
                        let mut v = gd[t * width + j];
                        if let Some(m) = dropout {
                            v *= m[t * width + j];
                        }
                        ad[id * width + j] += v;
                    }
                }
            }
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, n) = (node.value.rows(), node.value.cols());
                let k = if *trans_a { av.rows() } else { av.cols() };
                if self.nodes[a.0].requires_grad {
                    // dA = dC · Bᵀ (or its transpose)
                    let da = slot(grads, *a, av.shape());
                    if *trans_a {
                        // A stored k×m: dA = B · dCᵀ  (k×n · n×m)
                        gemm_acc(k, n, m, bv.data(), *trans_b, gd, true, da);
                    } else {
                        gemm_acc(m, n, k, gd, false, bv.data(), !*trans_b, da);
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let db = slot(grads, *b, bv.shape());
                    if *trans_b {
                        // B stored n×k: dB = dCᵀ · A  (n×m · m×k)
                        gemm_acc(n, m, k, gd, true, av.data(), *trans_a, db);
                    } else {
                        gemm_acc(k, m, n, av.data(), !*trans_a, gd, false, db);
                    }
                }
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.shape(), gd);
                acc(grads, *b, g.shape(), gd);
            }
            Op::Scale(a, f) => {
                let v: Vec<f64> = gd.iter().map(|x| x * f).collect();
                acc(grads, *a, g.shape(), &v);
            }
            Op::MaskRows(a, len) => {
                let mut v = gd.to_vec();
                let c = node.value.cols();
                let r = node.value.rows();
                for x in &mut v[(*len).min(r) * c..] {
                    *x = 0.0;
                }
                acc(grads, *a, g.shape(), &v);
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let v: Vec<f64> = gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                acc(grads, *a, g.shape(), &v);
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let v: Vec<f64> = gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                acc(grads, *a, g.shape(), &v);
            }
            Op::Relu(a) => {
                let y = node.value.data();
                let v: Vec<f64> = gd
                    .iter()
                    .zip(y)
                    .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(grads, *a, g.shape(), &v);
            }
            Op::Lstm(cache) => self.backward_lstm(cache, node, gd, grads),
            Op::ConcatCols(a, b) => {
                let (r, ca) = (self.value(*a).rows(), self.value(*a).cols());
                let cb = self.value(*b).cols();
                let mut ga = Vec::with_capacity(r * ca);
                let mut gb = Vec::with_capacity(r * cb);
                for i in 0..r {
                    let row = &gd[i * (ca + cb)..(i + 1) * (ca + cb)];
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                acc(grads, *a, &[r, ca], &ga);
                acc(grads, *b, &[r, cb], &gb);
            }
            Op::MaskedMean(a, len) => {
                let av = self.value(*a);
                let (r, c) = (av.rows(), av.cols());
                let mut v = vec![0.0; r * c];
                if *len > 0 {
                    let inv = 1.0 / *len as f64;
                    for i in 0..*len {
                        for j in 0..c {
                            v[i * c + j] = gd[j] * inv;
                        }
                    }
                }
                acc(grads, *a, av.shape(), &v);
            }
            Op::Cosine(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let (na, nb) = (norm(ad), norm(bd));
                if na == 0.0 || nb == 0.0 {
                    return;
                }
                let cval = node.value.item();
                let gs = gd[0];
                let ga: Vec<f64> = ad
                    .iter()
                    .zip(bd)
                    .map(|(x, y)| gs * (y / (na * nb) - cval * x / (na * na)))
                    .collect();
                let gb: Vec<f64> = ad
                    .iter()
                    .zip(bd)
                    .map(|(x, y)| gs * (x / (na * nb) - cval * y / (nb * nb)))
                    .collect();
                acc(grads, *a, self.shape(*a), &ga);
                acc(grads, *b, self.shape(*b), &gb);
            }
            Op::PairCosine(x, y) => {
                let (xv, yv) = (self.value(*x), self.value(*y));
                let (rx, ry, c) = (xv.rows(), yv.rows(), xv.cols());
                let nx: Vec<f64> = (0..rx).map(|i| norm(xv.row(i))).collect();
                let ny: Vec<f64> = (0..ry).map(|j| norm(yv.row(j))).collect();
                let cos = node.value.data();
                let mut gx = vec![0.0; rx * c];
                let mut gy = vec![0.0; ry * c];
                for i in 0..rx {
                    if nx[i] == 0.0 {
                        continue;
                    }
                    let xi = xv.row(i);
                    for j in 0..ry {
                        if ny[j] == 0.0 {
                            continue;
                        }
                        let gij = gd[i * ry + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let yj = yv.row(j);
                        let cij = cos[i * ry + j];
                        let inv = 1.0 / (nx[i] * ny[j]);
                        for p in 0..c {
                            gx[i * c + p] += gij * (yj[p] * inv - cij * xi[p] / (nx[i] * nx[i]));
                            gy[j * c + p] += gij * (xi[p] * inv - cij * yj[p] / (ny[j] * ny[j]));
                        }
                    }
                }
                acc(grads, *x, xv.shape(), &gx);
                acc(grads, *y, yv.shape(), &gy);
            }
            Op::MaskedSoftmax(a, key_len) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                let p = node.value.data();
                let mut v = vec![0.0; r * c];
                for i in 0..r {
                    let pi = &p[i * c..i * c + key_len];
                    let gi = &gd[i * c..i * c + key_len];
                    let s = dot(pi, gi);
                    for j in 0..*key_len {
                        v[i * c + j] = pi[j] * (gi[j] - s);
                    }
                }
                acc(grads, *a, &[r, c], &v);
            }
            Op::Bilinear(cache) => self.backward_bilinear(cache, node, gd, grads),
            Op::MaxCols { a, argmax } => {
                let av = self.value(*a);
                let c = av.cols();
                let mut v = vec![0.0; av.len()];
                for (i, am) in argmax.iter().enumerate() {
                    if let Some(j) = am {
                        v[i * c + j] += gd[i];
                    }
                }
                acc(grads, *a, av.shape(), &v);
            }
            Op::Fuse {
                signals,
                weights,
                offset,
                decay,
            } => {
                let wv = self.value(*weights).data();
                let mut gw = vec![0.0; wv.len()];
                for (i, &sig) in signals.iter().enumerate() {
                    let sv = self.value(sig).data();
                    gw[offset + i] = decay[i] * dot(gd, sv);
                    if self.nodes[sig.0].requires_grad {
                        let coef = wv[offset + i] * decay[i];
                        let v: Vec<f64> = gd.iter().map(|x| x * coef).collect();
                        acc(grads, sig, self.shape(sig), &v);
                    }
                }
                acc(grads, *weights, self.shape(*weights), &gw);
            }
            Op::Gate { score, rep, keep } => {
                let rv = self.value(*rep);
                let (r, c) = (rv.rows(), rv.cols());
                let sv = self.value(*score).data();
                let per_row = sv.len() != 1;
                let mut gs = vec![0.0; sv.len()];
                let mut gr = vec![0.0; r * c];
                for t in 0..r {
                    let idx = if per_row { t } else { 0 };
                    if !keep[idx] {
                        continue;
                    }
                    let grow = &gd[t * c..(t + 1) * c];
                    gs[idx] += dot(grow, rv.row(t));
                    for (o, x) in gr[t * c..(t + 1) * c].iter_mut().zip(grow) {
                        *o = sv[idx] * x;
                    }
                }
                acc(grads, *score, self.shape(*score), &gs);
                acc(grads, *rep, rv.shape(), &gr);
            }
            Op::Stack(parts) => {
                let each = self.value(parts[0]).len();
                for (i, &p) in parts.iter().enumerate() {
                    acc(grads, p, self.shape(p), &gd[i * each..(i + 1) * each]);
                }
            }
            Op::Conv2d(cache) => self.backward_conv(cache, node, gd, grads),
            Op::MaxPool { x, argmax } => {
                let v = slot(grads, *x, self.shape(*x));
                for (o, &src) in argmax.iter().enumerate() {
                    v[src] += gd[o];
                }
            }
            Op::Reshape(a) => acc(grads, *a, self.shape(*a), gd),
            Op::Row(a, i) => {
                let c = self.value(*a).cols();
                let v = slot(grads, *a, self.shape(*a));
                for (dst, src) in v[i * c..(i + 1) * c].iter_mut().zip(gd) {
                    *dst += src;
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    acc(grads, p, self.shape(p), &gd[off..off + n]);
                    off += n;
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (i, o) = (wv.rows(), wv.cols());
                if self.nodes[x.0].requires_grad {
                    gemm_acc(1, o, i, gd, false, wv.data(), true, slot(grads, *x, xv.shape()));
                }
                gemm_acc(i, 1, o, xv.data(), false, gd, false, slot(grads, *w, wv.shape()));
                acc(grads, *b, &[o], gd);
            }
            Op::Bce { prob, label } => {
                let p = self.value(*prob).item();
                if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                    return;
                }
                let d = -label / p + (1.0 - label) / (1.0 - p);
                acc(grads, *prob, self.shape(*prob), &[gd[0] * d]);
            }
            Op::Sum(parts) => {
                for &p in parts {
                    acc(grads, p, g.shape(), gd);
                }
            }
        }
    }

    fn backward_lstm(&self, cache: &LstmCache, node: &Node, gd: &[f64], grads: &mut [Option<Tensor>]) {
        let xv = self.value(cache.x);
        let (t_max, input) = (xv.rows(), xv.cols());
        let hidden = node.value.cols();
        let g4 = 4 * hidden;
        let (xd, wi, wh) = (
            xv.data(),
            self.value(cache.wih).data(),
            self.value(cache.whh).data(),
        );
        let hs = node.value.data();
        let mut gx = vec![0.0; t_max * input];
        let mut gwi = vec![0.0; input * g4];
        let mut gwh = vec![0.0; hidden * g4];
        let mut gb = vec![0.0; g4];
        let mut dh_next = vec![0.0; hidden];
        let mut dc_next = vec![0.0; hidden];
        let mut dz = vec![0.0; g4];
        let len = cache.len;
        for step in (0..len).rev() {
            let t = if cache.reverse { len - 1 - step } else { step };
            let prev = if step == 0 {
                None
            } else if cache.reverse {
                Some(t + 1)
            } else {
                Some(t - 1)
            };
            let gt = &cache.gates[t * g4..(t + 1) * g4];
            let ct = &cache.cells[t * hidden..(t + 1) * hidden];
            for j in 0..hidden {
                let (ig, fg, cg, og) = (gt[j], gt[hidden + j], gt[2 * hidden + j], gt[3 * hidden + j]);
                let tc = ct[j].tanh();
                let dh = gd[t * hidden + j] + dh_next[j];
                let dc = dh * og * (1.0 - tc * tc) + dc_next[j];
                let c_prev = prev.map_or(0.0, |p| cache.cells[p * hidden + j]);
                dz[j] = dc * cg * ig * (1.0 - ig);
                dz[hidden + j] = dc * c_prev * fg * (1.0 - fg);
                dz[2 * hidden + j] = dc * ig * (1.0 - cg * cg);
                dz[3 * hidden + j] = dh * tc * og * (1.0 - og);
                dc_next[j] = dc * fg;
            }
            for (b, d) in gb.iter_mut().zip(&dz) {
                *b += d;
            }
            let xt = &xd[t * input..(t + 1) * input];
            for p in 0..input {
                let xp = xt[p];
                let row = &wi[p * g4..(p + 1) * g4];
                let grow = &mut gwi[p * g4..(p + 1) * g4];
                let mut s = 0.0;
                for j in 0..g4 {
                    grow[j] += xp * dz[j];
                    s += row[j] * dz[j];
                }
                gx[t * input + p] = s;
            }
            for p in 0..hidden {
                let hp = prev.map_or(0.0, |q| hs[q * hidden + p]);
                let row = &wh[p * g4..(p + 1) * g4];
                let grow = &mut gwh[p * g4..(p + 1) * g4];
                let mut s = 0.0;
                for j in 0..g4 {
                    grow[j] += hp * dz[j];
                    s += row[j] * dz[j];
                }
                dh_next[p] = s;
            }
        }
        acc(grads, cache.x, xv.shape(), &gx);
        acc(grads, cache.wih, &[input, g4], &gwi);
        acc(grads, cache.whh, &[hidden, g4], &gwh);
        acc(grads, cache.b, &[g4], &gb);
    }

    fn backward_bilinear(
        &self,
        cache: &BilinearCache,
        node: &Node,
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (sv, cv, wv) = (self.value(cache.s), self.value(cache.c), self.value(cache.w));
        let (ls, dim) = (sv.rows(), sv.cols());
        let lc = node.value.cols();
        let h = wv.shape()[2];
        let vd = self.value(cache.v).data();
        let cd = cv.data();
        let mut gv = vec![0.0; h];
        let mut gb1 = vec![0.0; h];
        let mut gproj = vec![0.0; ls * dim * h];
        let mut gc = vec![0.0; lc * dim];
        let mut gpre = vec![0.0; h];
        for a in 0..ls {
            let pa = &cache.proj[a * dim * h..(a + 1) * dim * h];
            for bb in 0..lc {
                let go = gd[a * lc + bb];
                if go == 0.0 {
                    continue;
                }
                let cell = &cache.act[(a * lc + bb) * h..(a * lc + bb + 1) * h];
                for k in 0..h {
                    gv[k] += go * cell[k];
                    gpre[k] = go * vd[k] * (1.0 - cell[k] * cell[k]);
                    gb1[k] += gpre[k];
                }
                let cb = &cd[bb * dim..(bb + 1) * dim];
                let gpa = &mut gproj[a * dim * h..(a + 1) * dim * h];
                let gcb = &mut gc[bb * dim..(bb + 1) * dim];
                for q in 0..dim {
                    let pq = &pa[q * h..(q + 1) * h];
                    let gpq = &mut gpa[q * h..(q + 1) * h];
                    let mut s = 0.0;
                    for k in 0..h {
                        gpq[k] += gpre[k] * cb[q];
                        s += gpre[k] * pq[k];
                    }
                    gcb[q] += s;
                }
            }
        }
        // proj = s · W  (ls × dim) · (dim × dim*h)
        let mut gw = vec![0.0; dim * dim * h];
        gemm_acc(dim, ls, dim * h, sv.data(), true, &gproj, false, &mut gw);
        let mut gs = vec![0.0; ls * dim];
        gemm_acc(ls, dim * h, dim, &gproj, false, wv.data(), true, &mut gs);
        acc(grads, cache.s, sv.shape(), &gs);
        acc(grads, cache.c, cv.shape(), &gc);
        acc(grads, cache.w, wv.shape(), &gw);
        acc(grads, cache.b1, &[h], &gb1);
        acc(grads, cache.v, &[h], &gv);
    }

    fn backward_conv(&self, cache: &ConvCache, node: &Node, gd: &[f64], grads: &mut [Option<Tensor>]) {
        let xs = self.shape(cache.x).to_vec();
        let (ch, hh, ww) = (xs[0], xs[1], xs[2]);
        let k = cache.kernel;
        let f = node.value.shape()[0];
        let hw = hh * ww;
        let ckk = ch * k * k;
        let wd = self.value(cache.w).data();
        gemm_acc(f, hw, ckk, gd, false, &cache.cols, true, slot(grads, cache.w, &[f, ch, k, k]));
        let gb: Vec<f64> = (0..f).map(|fi| gd[fi * hw..(fi + 1) * hw].iter().sum()).collect();
        if self.nodes[cache.x.0].requires_grad {
            let mut gcols = vec![0.0; ckk * hw];
            gemm_acc(ckk, f, hw, wd, true, gd, false, &mut gcols);
            let gx = col2im(&gcols, ch, hh, ww, k);
            acc(grads, cache.x, &xs, &gx);
        }
        acc(grads, cache.b, &[f], &gb);
    }
}

/// Gradient buffer of `id`, zero-initialised on first use.
fn slot<'g>(grads: &'g mut [Option<Tensor>], id: NodeId, shape: &[usize]) -> &'g mut [f64] {
    grads[id.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
}

fn acc(grads: &mut [Option<Tensor>], id: NodeId, shape: &[usize], g: &[f64]) {
    match &mut grads[id.0] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape.to_vec(), g.to_vec())),
    }
}

fn pad_before(k: usize) -> usize {
    (k - 1) / 2
}

fn im2col(x: &[f64], ch: usize, hh: usize, ww: usize, k: usize) -> Vec<f64> {
    let pad = pad_before(k);
    let hw = hh * ww;
    let mut cols = vec![0.0; ch * k * k * hw];
    for c in 0..ch {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..hh {
                    let sy = y + ki;
                    if sy < pad || sy - pad >= hh {
                        continue;
                    }
                    let sy = sy - pad;
                    for xx in 0..ww {
                        let sx = xx + kj;
                        if sx < pad || sx - pad >= ww {
                            continue;
                        }
                        dst[y * ww + xx] = x[(c * hh + sy) * ww + sx - pad];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], ch: usize, hh: usize, ww: usize, k: usize) -> Vec<f64> {
    let pad = pad_before(k);
    let hw = hh * ww;
    let mut x = vec![0.0; ch * hw];
    for c in 0..ch {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..hh {
                    let sy = y + ki;
                    if sy < pad || sy - pad >= hh {
                        continue;
                    }
                    let sy = sy - pad;
                    for xx in 0..ww {
                        let sx = xx + kj;
                        if sx < pad || sx - pad >= ww {
                            continue;
                        }
                        x[(c * hh + sy) * ww + sx - pad] += src[y * ww + xx];
                    }
                }
            }
        }
    }
    x
}
