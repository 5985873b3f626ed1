//! Gate and decay properties on random tiny inputs, written against
//! proptest's error type so they run under `proptest!` and `TestRunner` alike.

use csn_core::data::{CandidateSet, TokenSeq, CANDIDATES_PER_SET};
use csn_core::eval::evaluate;
use csn_core::model::{CsnModel, ModelConfig};
use csn_core::seeding::{stream_rng, Stream};
use csn_core::selection::{keep_mask, FusionKind, SelectionConfig, SelectionLevel};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<(), TestCaseError>;

const L: usize = 4;
const VOCAB: usize = 12;

pub fn config(level: SelectionLevel, gamma: f64, eta: f64, fusion: FusionKind) -> ModelConfig {
    ModelConfig {
        vocab_size: VOCAB,
        embed_dim: 4,
        hidden: 3,
        max_turns: 3,
        max_sentences: 3,
        max_tokens: L,
        selection: SelectionConfig {
            level,
            gamma,
            eta,
            fusion,
            h: 2,
        },
        share_cnn: false,
        embed_dropout: 0.0,
    }
}

pub fn model(level: SelectionLevel, gamma: f64, seed: u64) -> CsnModel {
    CsnModel::new(config(level, gamma, 0.9, FusionKind::DecayedLinear), &mut stream_rng(seed, Stream::Init)).unwrap()
}

fn seq(rng: &mut ChaCha8Rng) -> TokenSeq {
    let len = rng.gen_range(1..=L);
    TokenSeq::from_ids((0..len).map(|_| rng.gen_range(2..VOCAB)).collect(), L)
}

fn document(rng: &mut ChaCha8Rng) -> Vec<TokenSeq> {
    let m = rng.gen_range(1..=3);
    (0..m).map(|_| seq(rng)).collect()
}

pub fn random_set(seed: u64, min_turns: usize) -> CandidateSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let turns = rng.gen_range(min_turns..=3);
    CandidateSet {
        context: (0..turns).map(|_| seq(&mut rng)).collect(),
        document: document(&mut rng),
        candidates: (0..CANDIDATES_PER_SET).map(|_| seq(&mut rng)).collect(),
        positive_index: rng.gen_range(0..CANDIDATES_PER_SET),
        planted: None,
    }
}

pub fn level() -> impl Strategy<Value = SelectionLevel> {
    prop_oneof![Just(SelectionLevel::Sentence), Just(SelectionLevel::Word)]
}

fn ordered(a: f64, b: f64) -> (f64, f64) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

pub fn keep_masks_shrink_as_gamma_grows(scores: &[f64], a: f64, b: f64) -> Check {
    let (lo, hi) = ordered(a, b);
    for (l, h) in keep_mask(scores, lo).iter().zip(&keep_mask(scores, hi)) {
        prop_assert!(!h || *l);
    }
    Ok(())
}

pub fn model_keep_sets_are_nested(seed: u64, level: SelectionLevel, a: f64, b: f64) -> Check {
    let (lo, hi) = ordered(a, b);
    let set = random_set(seed, 1);
    let mut m = model(level, lo, seed % 7);
    let low = m.inspect(&set).unwrap();
    m.config.selection.gamma = hi;
    let high = m.inspect(&set).unwrap();
    for (ul, uh) in low.units.iter().zip(&high.units) {
        prop_assert_eq!(&ul.scores, &uh.scores);
        for (l, h) in ul.keep.iter().zip(&uh.keep) {
            prop_assert!(!h || *l);
        }
    }
    Ok(())
}

pub fn gamma_zero_keeps_everything_unchanged(seed: u64, level: SelectionLevel) -> Check {
    let set = random_set(seed, 1);
    let result = model(level, 0.0, seed % 7).inspect(&set).unwrap();
    for unit in &result.units {
        prop_assert!(unit.keep.iter().all(|&k| k));
        prop_assert_eq!(&unit.retained, &unit.scores);
    }
    Ok(())
}

pub fn gamma_one_makes_scores_document_blind(seed: u64, level: SelectionLevel) -> Check {
    let set = random_set(seed, 1);
    let mut other = set.clone();
    other.document = document(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let m = model(level, 1.0, seed % 7);
    let result = m.inspect(&set).unwrap();
    prop_assert!(result.units.iter().all(|u| u.keep.iter().all(|&k| !k)));
    prop_assert_eq!(m.score_set(&set).unwrap(), m.score_set(&other).unwrap());
    Ok(())
}

fn bits(xs: &[f64]) -> Vec<u64> {
    xs.iter().map(|x| x.to_bits()).collect()
}

pub fn unit_decay_equals_learned_fusion(seed: u64, level: SelectionLevel, gamma: f64) -> Check {
    let set = random_set(seed, 1);
    let init = seed % 7;
    let build = |eta, fusion| CsnModel::new(config(level, gamma, eta, fusion), &mut stream_rng(init, Stream::Init)).unwrap();
    let decayed = build(1.0, FusionKind::DecayedLinear);
    let learned = build(0.3, FusionKind::LearnedLinear);
    prop_assert_eq!(bits(&decayed.score_set(&set).unwrap()), bits(&learned.score_set(&set).unwrap()));
    Ok(())
}

pub fn zero_decay_listens_only_to_the_last_utterance(seed: u64, level: SelectionLevel, gamma: f64) -> Check {
    let set = random_set(seed, 2);
    let mut other = set.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(!seed);
    let last = other.context.len() - 1;
    for u in &mut other.context[..last] {
        *u = seq(&mut rng);
    }
    let m = CsnModel::new(
        config(level, gamma, 0.0, FusionKind::DecayedLinear),
        &mut stream_rng(seed % 7, Stream::Init),
    )
    .unwrap();
    let (a, b) = (m.inspect(&set).unwrap(), m.inspect(&other).unwrap());
    for (ua, ub) in a.units.iter().zip(&b.units) {
        prop_assert_eq!(bits(&ua.scores), bits(&ub.scores));
        prop_assert_eq!(&ua.keep, &ub.keep);
    }
    Ok(())
}

pub fn scoring_is_deterministic(seed: u64, level: SelectionLevel) -> Check {
    let set = random_set(seed, 1);
    let (a, b) = (model(level, 0.3, seed % 7), model(level, 0.3, seed % 7));
    prop_assert_eq!(a.score_set(&set).unwrap(), b.score_set(&set).unwrap());
    prop_assert_eq!(a.score_set(&set).unwrap(), a.score_set(&set).unwrap());
    Ok(())
}

pub fn candidate_order_does_not_change_ranks(seed: u64) -> Check {
    let set = random_set(seed, 1);
    let mut shuffled = set.clone();
    shuffled.shuffle_candidates(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)));
    let m = model(SelectionLevel::Word, 0.3, seed % 7);
    let ra = evaluate(&m, std::slice::from_ref(&set)).unwrap();
    let rb = evaluate(&m, std::slice::from_ref(&shuffled)).unwrap();
    prop_assert_eq!(ra.ranks, rb.ranks);
    Ok(())
}
