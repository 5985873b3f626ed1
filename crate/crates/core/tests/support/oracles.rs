//! Brute-force loop implementations checked against the graph operations.
//! Every check panics on the first disagreement.

use csn_core::encoder::SeqRep;
use csn_core::graph::Graph;
use csn_core::matching::{aggregate_and_score, attentive, build_cubes, similarity_pair, CubeParams, ScorerParams};
use csn_core::params::{ParamKind, ParamStore};
use csn_core::selection::{sentence_match_scores, word_match_map, word_scores, WordMapParams};
use csn_core::tensor::{sigmoid, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CASES: usize = 120;
const TOL: f64 = 1e-6;

type Mat = Vec<Vec<f64>>;

/// `rows × cols` matrix whose rows at or beyond `len` are zero, like encoder
/// output.
fn states(rng: &mut ChaCha8Rng, rows: usize, cols: usize, len: usize) -> Mat {
    (0..rows)
        .map(|r| (0..cols).map(|_| if r < len { rng.gen_range(-1.5..1.5) } else { 0.0 }).collect())
        .collect()
}

fn tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m)
}

fn mean(m: &Mat, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; m[0].len()];
    for row in &m[..len] {
        for (o, x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    if len > 0 {
        for o in &mut out {
            *o /= len as f64;
        }
    }
    out
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

fn assert_close(got: &[f64], want: &[f64], what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length");
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!((g - w).abs() <= TOL, "{what}[{i}]: {g} vs {w}");
    }
}

fn attend_loop(q: &Mat, qlen: usize, k: &Mat, v: &Mat, klen: usize) -> Mat {
    let d = q[0].len();
    let mut out = vec![vec![0.0; v[0].len()]; q.len()];
    if klen == 0 {
        return out;
    }
    for i in 0..qlen {
        let logits: Vec<f64> = (0..klen)
            .map(|j| (0..d).map(|t| q[i][t] * k[j][t]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|x| (x - mx).exp()).sum();
        for j in 0..klen {
            let a = (logits[j] - mx).exp() / z;
            for t in 0..v[0].len() {
                out[i][t] += a * v[j][t];
            }
        }
    }
    out
}

fn bilinear_loop(x: &Mat, h: &Mat, y: &Mat) -> Vec<f64> {
    let d = h.len();
    let mut out = Vec::with_capacity(x.len() * y.len());
    for xi in x {
        for yj in y {
            let mut acc = 0.0;
            for p in 0..d {
                for q in 0..d {
                    acc += xi[p] * h[p][q] * yj[q];
                }
            }
            out.push(acc);
        }
    }
    out
}

fn cosine_loop(x: &Mat, y: &Mat) -> Vec<f64> {
    x.iter().flat_map(|xi| y.iter().map(move |yj| cos(xi, yj))).collect()
}

struct Case {
    l: usize,
    width: usize,
    sentence: Mat,
    sentence_len: usize,
    context: Vec<(Mat, usize)>,
}

fn case(rng: &mut ChaCha8Rng) -> Case {
    let l = rng.gen_range(1..=6);
    let width = rng.gen_range(1..=5);
    let turns = rng.gen_range(1..=4);
    // lengths may be 0: empty padding sentences occur in practice
    let sentence_len = rng.gen_range(0..=l);
    let context = (0..turns)
        .map(|_| {
            let len = rng.gen_range(1..=l);
            (states(rng, l, width, len), len)
        })
        .collect();
    Case {
        l,
        width,
        sentence: states(rng, l, width, sentence_len),
        sentence_len,
        context,
    }
}

pub fn sentence_match_scores_equal_loop_cosines() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..CASES {
        let c = case(&mut rng);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let s = SeqRep {
            states: g.constant(tensor(&c.sentence)),
            len: c.sentence_len,
        };
        let ctx: Vec<SeqRep> = c
            .context
            .iter()
            .map(|(m, len)| SeqRep {
                states: g.constant(tensor(m)),
                len: *len,
            })
            .collect();
        let got: Vec<f64> = sentence_match_scores(&mut g, &ctx, &s)
            .into_iter()
            .map(|n| g.value(n).item())
            .collect();
        let s_bar = mean(&c.sentence, c.sentence_len);
        let want: Vec<f64> = c.context.iter().map(|(m, len)| cos(&mean(m, *len), &s_bar)).collect();
        assert_close(&got, &want, "sentence match");
    }
}

struct WordParams {
    w1: Vec<f64>,
    b1: Vec<f64>,
    v: Vec<f64>,
    h: usize,
}

fn word_params(rng: &mut ChaCha8Rng, width: usize) -> WordParams {
    let h = rng.gen_range(1..=4);
    let mut r = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    WordParams {
        w1: r(width * width * h),
        b1: r(h),
        v: r(h),
        h,
    }
}

fn store_word_params(store: &mut ParamStore, p: &WordParams, width: usize) -> WordMapParams {
    WordMapParams {
        w1: store.add(
            "w1",
            ParamKind::Weight,
            Tensor::new(vec![width, width, p.h], p.w1.clone()),
        ),
        b1: store.add("b1", ParamKind::Bias, Tensor::vector(p.b1.clone())),
        v: store.add("v", ParamKind::Weight, Tensor::vector(p.v.clone())),
    }
}

/// `B[a][b] = sum_k v[k] * tanh(sum_{p,q} s[a][p] W[p][q][k] c[b][q] + b1[k])`.
fn word_map_oracle(s: &Mat, c: &Mat, p: &WordParams) -> Mat {
    let d = s[0].len();
    let mut out = vec![vec![0.0; c.len()]; s.len()];
    for a in 0..s.len() {
        for b in 0..c.len() {
            let mut total = 0.0;
            for k in 0..p.h {
                let mut z = p.b1[k];
                for pi in 0..d {
                    for q in 0..d {
                        z += s[a][pi] * p.w1[(pi * d + q) * p.h + k] * c[b][q];
                    }
                }
                total += p.v[k] * z.tanh();
            }
            out[a][b] = total;
        }
    }
    out
}

pub fn word_match_map_equals_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..CASES {
        let c = case(&mut rng);
        let p = word_params(&mut rng, c.width);
        let mut store = ParamStore::new();
        let params = store_word_params(&mut store, &p, c.width);
        let mut g = Graph::new(&store);
        let s = SeqRep {
            states: g.constant(tensor(&c.sentence)),
            len: c.sentence_len,
        };
        let ctx: Vec<SeqRep> = c
            .context
            .iter()
            .map(|(m, len)| SeqRep {
                states: g.constant(tensor(m)),
                len: *len,
            })
            .collect();
        let maps = word_match_map(&mut g, &ctx, &s, &params).unwrap();
        for (map, (m, _)) in maps.iter().zip(&c.context) {
            let want: Vec<f64> = word_map_oracle(&c.sentence, m, &p).concat();
            assert_eq!(g.value(*map).shape(), &[c.l, c.l]);
            assert_close(g.value(*map).data(), &want, "word map");
        }
    }
}

pub fn word_scores_equal_masked_max_then_fusion() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..CASES {
        let c = case(&mut rng);
        let p = word_params(&mut rng, c.width);
        let max_turns = c.context.len() + rng.gen_range(0..=2);
        let weights: Vec<f64> = (0..max_turns).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let decay: Vec<f64> = (0..c.context.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let offset = max_turns - c.context.len();

        let mut store = ParamStore::new();
        let params = store_word_params(&mut store, &p, c.width);
        let wid = store.add("fusion", ParamKind::Bias, Tensor::vector(weights.clone()));
        let mut g = Graph::new(&store);
        let s = SeqRep {
            states: g.constant(tensor(&c.sentence)),
            len: c.sentence_len,
        };
        let ctx: Vec<SeqRep> = c
            .context
            .iter()
            .map(|(m, len)| SeqRep {
                states: g.constant(tensor(m)),
                len: *len,
            })
            .collect();
        let maps = word_match_map(&mut g, &ctx, &s, &params).unwrap();
        let w = g.param(wid);
        let got = word_scores(&mut g, &maps, &ctx, &s, w, offset, &decay);

        let mut want = vec![0.0; c.l];
        for (i, (m, len)) in c.context.iter().enumerate() {
            let map = word_map_oracle(&c.sentence, m, &p);
            for a in 0..c.sentence_len {
                let mut best = f64::NEG_INFINITY;
                for value in &map[a][..*len] {
                    best = best.max(*value);
                }
                want[a] += weights[offset + i] * decay[i] * best;
            }
        }
        assert_close(g.value(got).data(), &want, "word scores");
    }
}

pub fn attentive_equals_loop_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..CASES {
        let lq = rng.gen_range(1..=6);
        let lk = rng.gen_range(1..=6);
        let d = rng.gen_range(1..=5);
        let qlen = rng.gen_range(0..=lq);
        let klen = rng.gen_range(0..=lk);
        let q = states(&mut rng, lq, d, lq);
        let k = states(&mut rng, lk, d, lk);
        let v = states(&mut rng, lk, d, lk);

        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let (qn, kn, vn) = (g.constant(tensor(&q)), g.constant(tensor(&k)), g.constant(tensor(&v)));
        let out = attentive(&mut g, qn, qlen, kn, vn, klen);

        let want = attend_loop(&q, qlen, &k, &v, klen);
        assert_close(g.value(out).data(), &want.concat(), "attentive");
    }
}

pub fn similarity_pair_equals_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..CASES {
        let (lx, ly, d) = (rng.gen_range(1..=6), rng.gen_range(1..=6), rng.gen_range(1..=5));
        let (xlen, ylen) = (rng.gen_range(0..=lx), rng.gen_range(0..=ly));
        let x = states(&mut rng, lx, d, xlen);
        let y = states(&mut rng, ly, d, ylen);
        let hm = states(&mut rng, d, d, d);

        let mut store = ParamStore::new();
        let hid = store.add("h", ParamKind::Weight, tensor(&hm));
        let mut g = Graph::new(&store);
        let (xn, yn, hn) = (g.constant(tensor(&x)), g.constant(tensor(&y)), g.param(hid));
        let (bil, cosn) = similarity_pair(&mut g, xn, yn, hn);

        let want_bil = bilinear_loop(&x, &hm, &y);
        let want_cos = cosine_loop(&x, &y);
        assert_close(g.value(bil).data(), &want_bil, "bilinear");
        assert_close(g.value(cosn).data(), &want_cos, "cosine");
    }
}

pub fn convolution_and_pooling_match_hand_computed_values() {
    let mut store = ParamStore::new();
    // 3×3 kernel with only the top-left tap set shifts the image down-right.
    let mut k3 = vec![0.0; 9];
    k3[0] = 1.0;
    let w3 = store.add("w3", ParamKind::Weight, Tensor::new(vec![1, 1, 3, 3], k3));
    let b3 = store.add("b3", ParamKind::Bias, Tensor::vector(vec![0.0]));
    // 2×2 diagonal kernel, bias 0.5; padding only after.
    let w2 = store.add("w2", ParamKind::Weight, Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]));
    let b2 = store.add("b2", ParamKind::Bias, Tensor::vector(vec![0.5]));
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
    let (w3, b3, w2, b2) = (g.param(w3), g.param(b3), g.param(w2), g.param(b2));

    let shifted = g.conv2d(x, w3, b3);
    assert_eq!(g.value(shifted).data(), &[0.0, 0.0, 0.0, 1.0]);
    let diag = g.conv2d(x, w2, b2);
    assert_eq!(g.value(diag).data(), &[5.5, 2.5, 3.5, 4.5]);

    let grid = g.constant(Tensor::new(vec![1, 4, 4], (0..16).map(f64::from).collect()));
    let pooled = g.max_pool(grid, 3);
    assert_eq!(g.value(pooled).shape(), &[1, 2, 2]);
    assert_eq!(g.value(pooled).data(), &[10.0, 11.0, 14.0, 15.0]);
}

pub fn laplacian_filter_on_four_by_four_map() {
    let mut store = ParamStore::new();
    let kernel = vec![0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];
    let w = store.add("w", ParamKind::Weight, Tensor::new(vec![1, 1, 3, 3], kernel));
    let b = store.add("b", ParamKind::Bias, Tensor::vector(vec![0.0]));
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::new(vec![1, 4, 4], (1..=16).map(f64::from).collect()));
    let (w, b) = (g.param(w), g.param(b));
    let y = g.conv2d(x, w, b);
    #[rustfmt::skip]
    let want = [
        3.0, 2.0, 1.0, -5.0,
        -4.0, 0.0, 0.0, -9.0,
        -8.0, 0.0, 0.0, -13.0,
        -29.0, -18.0, -19.0, -37.0,
    ];
    assert_eq!(g.value(y).data(), &want);
}

/// Six channels for one unit, built from the loop oracles.
fn cube_loop(u: &Mat, ulen: usize, r: &Mat, rlen: usize, r_self: &Mat, h: &[Mat; 3]) -> Vec<f64> {
    let u_self = attend_loop(u, ulen, u, u, ulen);
    let u_cross = attend_loop(u, ulen, r, r, rlen);
    let r_cross = attend_loop(r, rlen, u, u, ulen);
    [
        bilinear_loop(u, &h[0], r),
        cosine_loop(u, r),
        bilinear_loop(&u_self, &h[1], r_self),
        cosine_loop(&u_self, r_self),
        bilinear_loop(&u_cross, &h[2], &r_cross),
        cosine_loop(&u_cross, &r_cross),
    ]
    .concat()
}

pub fn cubes_equal_step_by_step_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..CASES {
        let l = rng.gen_range(1..=5);
        let d = rng.gen_range(1..=4);
        let unit = |rng: &mut ChaCha8Rng, min: usize| {
            let len = rng.gen_range(min..=l);
            (states(rng, l, d, len), len)
        };
        let context: Vec<(Mat, usize)> = (0..rng.gen_range(1..=3)).map(|_| unit(&mut rng, 1)).collect();
        // gated-out sentences are all zero, so lengths of 0 rows are allowed
        let document: Vec<(Mat, usize)> = (0..rng.gen_range(1..=3)).map(|_| unit(&mut rng, 0)).collect();
        let (r, rlen) = unit(&mut rng, 1);
        let hm: [Mat; 3] = [states(&mut rng, d, d, d), states(&mut rng, d, d, d), states(&mut rng, d, d, d)];

        let mut store = ParamStore::new();
        let ids = [0, 1, 2].map(|i| store.add(format!("h{i}"), ParamKind::Weight, tensor(&hm[i])));
        let params = CubeParams { h: ids };
        let mut g = Graph::new(&store);
        let mut rep = |m: &Mat, len: usize| SeqRep {
            states: g.constant(tensor(m)),
            len,
        };
        let ctx: Vec<SeqRep> = context.iter().map(|(m, len)| rep(m, *len)).collect();
        let doc: Vec<SeqRep> = document.iter().map(|(m, len)| rep(m, *len)).collect();
        let resp = rep(&r, rlen);
        let (cr, dr) = build_cubes(&mut g, &ctx, &doc, &resp, &params).unwrap();

        let r_self = attend_loop(&r, rlen, &r, &r, rlen);
        for (node, (u, ulen)) in cr.iter().zip(&context).chain(dr.iter().zip(&document)) {
            assert_eq!(g.value(*node).shape(), &[6, l, l]);
            let want = cube_loop(u, *ulen, &r, rlen, &r_self, &hm);
            assert_close(g.value(*node).data(), &want, "cube");
        }
    }
}

fn lstm_final(x: &Mat, wih: &Tensor, whh: &Tensor, b: &Tensor) -> Vec<f64> {
    let hd = whh.rows();
    let (mut h, mut c) = (vec![0.0; hd], vec![0.0; hd]);
    for xt in x {
        let mut z = b.data().to_vec();
        for (j, zj) in z.iter_mut().enumerate() {
            for (p, xp) in xt.iter().enumerate() {
                *zj += xp * wih.at2(p, j);
            }
            for (p, hp) in h.iter().enumerate() {
                *zj += hp * whh.at2(p, j);
            }
        }
        for j in 0..hd {
            let (i, f, gg, o) = (sigmoid(z[j]), sigmoid(z[hd + j]), z[2 * hd + j].tanh(), sigmoid(z[3 * hd + j]));
            c[j] = f * c[j] + i * gg;
            h[j] = o * c[j].tanh();
        }
    }
    h
}

pub fn score_equals_reference_recurrence_and_mlp() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let (feature, hidden) = (rng.gen_range(1..=6), rng.gen_range(1..=3));
        let mut store = ParamStore::new();
        let params = ScorerParams::new(&mut store, feature, hidden, &mut rng);
        // non-zero biases so they are exercised too
        for id in [params.context_lstm.bias, params.document_lstm.bias] {
            for x in store.value_mut(id).data_mut() {
                *x = rng.gen_range(-0.5..0.5);
            }
        }
        let (nc, nd) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let cf = states(&mut rng, nc, feature, usize::MAX);
        let df = states(&mut rng, nd, feature, usize::MAX);

        let mut g = Graph::new(&store);
        let cn: Vec<_> = cf.iter().map(|v| g.constant(Tensor::vector(v.clone()))).collect();
        let dn: Vec<_> = df.iter().map(|v| g.constant(Tensor::vector(v.clone()))).collect();
        let prob = aggregate_and_score(&mut g, &cn, &dn, &params);

        let p = |id| store.value(id);
        let cl = &params.context_lstm;
        let dl = &params.document_lstm;
        let joint: Vec<f64> = [
            lstm_final(&cf, p(cl.wih), p(cl.whh), p(cl.bias)),
            lstm_final(&df, p(dl.wih), p(dl.whh), p(dl.bias)),
        ]
        .concat();
        let (hw, hb) = (p(params.hidden_w), p(params.hidden_b));
        let hid: Vec<f64> = (0..hw.cols())
            .map(|j| (hb.data()[j] + (0..joint.len()).map(|i| joint[i] * hw.at2(i, j)).sum::<f64>()).tanh())
            .collect();
        let (ow, ob) = (p(params.out_w), p(params.out_b));
        let logit = ob.item() + (0..hid.len()).map(|j| hid[j] * ow.at2(j, 0)).sum::<f64>();
        let want = sigmoid(logit);
        assert!((g.value(prob).item() - want).abs() <= TOL);
        assert!(want > 0.0 && want < 1.0);
    }
}
