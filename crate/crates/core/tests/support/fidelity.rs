//! Finite-difference check of every parameter group on the tiny configuration
//! (n = 2, m = 2, L = 4, d = 3, h = 2, d_e = 4).

use csn_core::data::{build_vocabulary, encode_sets, generate_synthetic_corpus, CorpusConfig};
use csn_core::gradcheck::{gradient_check, GradCheckConfig, GradCheckReport};
use csn_core::model::{CsnModel, ModelConfig};
use csn_core::seeding::{stream_rng, Stream};
use csn_core::selection::{SelectionConfig, SelectionLevel};

pub const TOLERANCE: f64 = 1e-4;

pub fn tiny_gradient_check(level: SelectionLevel) -> GradCheckReport {
    let cc = CorpusConfig {
        max_turns: 2,
        max_sentences: 2,
        max_tokens: 4,
        ..CorpusConfig::default()
    };
    let raw = generate_synthetic_corpus(3, 3, &cc);
    let vocab = build_vocabulary(&raw, 1, 50_000).unwrap();
    let sets = encode_sets(&raw, &vocab, &cc).unwrap();
    let config = ModelConfig {
        vocab_size: vocab.size(),
        embed_dim: 4,
        hidden: 3,
        max_turns: 2,
        max_sentences: 2,
        max_tokens: 4,
        selection: SelectionConfig {
            level,
            h: 2,
            ..SelectionConfig::default()
        },
        share_cnn: false,
        embed_dropout: 0.0,
    };
    let mut model = CsnModel::new(config, &mut stream_rng(1, Stream::Init)).unwrap();
    let set = &sets[0];
    let samples = vec![set.sample(set.positive_index), set.sample((set.positive_index + 1) % set.candidates.len())];
    let check = GradCheckConfig {
        max_entries: usize::MAX,
        ..GradCheckConfig::default()
    };
    gradient_check(&mut model, &samples, &check).unwrap()
}
