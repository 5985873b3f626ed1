//! Deterministic synthetic corpora with a known grounding sentence per set.
//!
//! Every document sentence carries four content tokens: two "key" tokens and
//! two "value" tokens. The planted sentence's keys appear in the last two
//! context turns; its values appear in the positive response, which shares no
//! value token with the context. Negatives are the positive responses of
//! other sets, and some distractor sentences reuse the values of those
//! negatives, so a model that grounds on the whole document cannot tell them
//! apart from the positive without selecting the right sentence.
//!
//! The conversation drifts: older turns talk about one distractor, and the
//! last turn also mentions the keys of another distractor alongside the
//! planted keys. Only the last two turns together single out the planted
//! sentence.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CorpusConfig, RawCandidateSet, CANDIDATES_PER_SET};

const FILLERS: [&str; 6] = ["i", "the", "a", "is", "and", "to"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticOptions {
    /// Size of the content-token pool.
    pub content_tokens: usize,
    /// Distractor sentences that reuse the values of a negative's grounding.
    pub hard_distractors: usize,
    /// Probability that the positive response repeats one planted key token.
    pub key_in_response: f64,
    /// Filler tokens added to every text.
    pub fillers_per_text: usize,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        Self {
            content_tokens: 600,
            hard_distractors: 1,
            key_in_response: 0.6,
            fillers_per_text: 2,
        }
    }
}

struct Grounding {
    keys: [usize; 2],
    values: [usize; 2],
    response: Vec<String>,
}

pub fn generate_synthetic_corpus(seed: u64, sets: usize, config: &CorpusConfig) -> Vec<RawCandidateSet> {
    generate_with(seed, sets, config, &SyntheticOptions::default())
}

pub fn generate_with(
    seed: u64,
    sets: usize,
    config: &CorpusConfig,
    opts: &SyntheticOptions,
) -> Vec<RawCandidateSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = opts.content_tokens.max(16);
    let word = |i: usize| format!("w{i}");

    let groundings: Vec<Grounding> = (0..sets)
        .map(|_| {
            let picked = distinct(&mut rng, pool, 5, &[]);
            let (keys, values, extra) = ([picked[0], picked[1]], [picked[2], picked[3]], picked[4]);
            let mut response = vec![word(values[0]), word(values[1]), word(extra)];
            if rng.gen_bool(opts.key_in_response) {
                response.push(word(keys[0]));
            }
            let response = with_fillers(&mut rng, response, opts.fillers_per_text);
            Grounding {
                keys,
                values,
                response,
            }
        })
        .collect();

    let m = config.max_sentences;
    let n = config.max_turns;
    let mut out = Vec::with_capacity(sets);
    for (s, g) in groundings.iter().enumerate() {
        let negatives = pick_negatives(&mut rng, s, sets);
        let mut used: Vec<usize> = g.keys.iter().chain(&g.values).copied().collect();

        // distractor sentences as (keys, values)
        let mut distractors: Vec<([usize; 2], [usize; 2])> = Vec::new();
        for &t in &negatives {
            if distractors.len() + 1 >= m || distractors.len() >= opts.hard_distractors {
                break;
            }
            let Some(t) = t else { continue };
            let vals = groundings[t].values;
            if vals.iter().any(|v| used.contains(v)) {
                continue;
            }
            let keys = distinct(&mut rng, pool, 2, &used);
            used.extend(keys.iter().chain(&vals));
            distractors.push(([keys[0], keys[1]], vals));
        }
        while distractors.len() + 1 < m {
            let fresh = distinct(&mut rng, pool, 4, &used);
            used.extend(&fresh);
            distractors.push(([fresh[0], fresh[1]], [fresh[2], fresh[3]]));
        }

        let sentence = |rng: &mut ChaCha8Rng, keys: [usize; 2], values: [usize; 2]| {
            let toks = keys.iter().chain(&values).map(|&i| word(i)).collect();
            with_fillers(rng, toks, opts.fillers_per_text)
        };
        let mut document: Vec<Vec<String>> = Vec::with_capacity(m);
        document.push(sentence(&mut rng, g.keys, g.values));
        for &(k, v) in &distractors {
            document.push(sentence(&mut rng, k, v));
        }
        let mut order: Vec<usize> = (0..document.len()).collect();
        order.shuffle(&mut rng);
        let planted = order.iter().position(|&i| i == 0).expect("planted sentence present");
        let document: Vec<Vec<String>> = order.iter().map(|&i| document[i].clone()).collect();

        // context, oldest first
        let recent_other = distractors.first().map(|d| d.0);
        let old_topic = distractors.get(1).or(distractors.first()).map(|d| d.0);
        let mut context = Vec::with_capacity(n);
        for turn in 0..n {
            let from_end = n - 1 - turn;
            let mut toks: Vec<String> = match from_end {
                0 => {
                    let mut t: Vec<String> = g.keys.iter().map(|&i| word(i)).collect();
                    if let Some(k) = recent_other {
                        t.extend(k.iter().map(|&i| word(i)));
                    }
                    t
                }
                1 => {
                    let mut t: Vec<String> = g.keys.iter().map(|&i| word(i)).collect();
                    t.push(word(distinct(&mut rng, pool, 1, &used)[0]));
                    t
                }
                _ => match old_topic {
                    Some(k) => k.iter().map(|&i| word(i)).collect(),
                    None => distinct(&mut rng, pool, 2, &used).into_iter().map(word).collect(),
                },
            };
            toks = with_fillers(&mut rng, std::mem::take(&mut toks), opts.fillers_per_text);
            context.push(toks);
        }

        let positive_index = rng.gen_range(0..CANDIDATES_PER_SET);
        let mut negative_texts = negatives.iter().map(|t| match t {
            Some(t) => groundings[*t].response.clone(),
            None => {
                let toks = distinct(&mut rng, pool, 3, &used).into_iter().map(word).collect();
                with_fillers(&mut rng, toks, opts.fillers_per_text)
            }
        });
        let candidates: Vec<Vec<String>> = (0..CANDIDATES_PER_SET)
            .map(|i| {
                if i == positive_index {
                    g.response.clone()
                } else {
                    negative_texts.next().expect("19 negatives")
                }
            })
            .collect();
        drop(negative_texts);

        out.push(
            RawCandidateSet {
                context,
                document,
                candidates,
                positive_index,
                planted: Some(planted),
            }
            .truncated(config),
        );
    }
    out
}

/// Nineteen negative sources for set `s`: other sets without replacement when
/// possible, with replacement when there are fewer than nineteen, and `None`
/// (a fresh random response) when `s` is the only set.
fn pick_negatives(rng: &mut ChaCha8Rng, s: usize, sets: usize) -> Vec<Option<usize>> {
    let others: Vec<usize> = (0..sets).filter(|&t| t != s).collect();
    let need = CANDIDATES_PER_SET - 1;
    if others.is_empty() {
        vec![None; need]
    } else if others.len() >= need {
        others.choose_multiple(rng, need).map(|&t| Some(t)).collect()
    } else {
        (0..need).map(|_| Some(*others.choose(rng).expect("non-empty"))).collect()
    }
}

fn distinct(rng: &mut ChaCha8Rng, pool: usize, k: usize, exclude: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let c = rng.gen_range(0..pool);
        if !exclude.contains(&c) && !out.contains(&c) {
            out.push(c);
        }
    }
    out
}

fn with_fillers(rng: &mut ChaCha8Rng, mut tokens: Vec<String>, fillers: usize) -> Vec<String> {
    for _ in 0..fillers {
        tokens.push(FILLERS.choose(rng).expect("fillers").to_string());
    }
    tokens.shuffle(rng);
    tokens
}
