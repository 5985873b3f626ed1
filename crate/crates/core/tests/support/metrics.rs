//! Recall@k against hand-computed ranks and the closed form of a random scorer.

use std::collections::HashSet;

use csn_core::data::{CandidateSet, TokenSeq, CANDIDATES_PER_SET};
use csn_core::eval::{evaluate_with, EvalReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scored(scores: &[(usize, f64)]) -> Vec<f64> {
    let mut out = vec![0.0; CANDIDATES_PER_SET];
    for &(i, s) in scores {
        out[i] = s;
    }
    out
}

pub fn crafted_sets_give_hand_computed_recall() {
    // positive index and scores of five sets; unlisted candidates score 0
    let sets = [
        (0, scored(&[(0, 0.9)])),                     // rank 0
        (3, scored(&[(3, 0.5), (1, 0.7)])),           // rank 1
        (7, scored(&[(7, 0.5), (1, 0.7), (2, 0.6)])), // rank 2
        // rank 5: one tie with the positive counts against it
        (19, scored(&[(19, 0.2), (0, 0.3), (1, 0.3), (2, 0.3), (4, 0.9), (5, 0.2)])),
        (5, vec![0.4; CANDIDATES_PER_SET]), // all tied: rank 19
    ];
    let (positives, scores): (Vec<usize>, Vec<Vec<f64>>) = sets.into_iter().unzip();
    let report = EvalReport::from_scores(&scores, &positives).unwrap();
    assert_eq!(report.ranks, vec![0, 1, 2, 5, 19]);
    assert_eq!(report.r_at_1, 1.0 / 5.0);
    assert_eq!(report.r_at_2, 2.0 / 5.0);
    assert_eq!(report.r_at_5, 3.0 / 5.0);
    assert_eq!(report.n_sets, 5);
}

/// Returns the largest deviation from k/20 in standard errors.
pub fn uniform_random_scorer_matches_closed_form() -> f64 {
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let scores: Vec<Vec<f64>> = (0..n).map(|_| (0..CANDIDATES_PER_SET).map(|_| rng.gen()).collect()).collect();
    let positives: Vec<usize> = (0..n).map(|_| rng.gen_range(0..CANDIDATES_PER_SET)).collect();
    let report = EvalReport::from_scores(&scores, &positives).unwrap();
    let mut worst: f64 = 0.0;
    for (got, k) in [(report.r_at_1, 1.0), (report.r_at_2, 2.0), (report.r_at_5, 5.0)] {
        let p = k / 20.0;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        let z = (got - p).abs() / se;
        assert!(z <= 3.0, "R@{k}: {got} vs {p} is {z:.2} standard errors off");
        worst = worst.max(z);
    }
    assert!(report.r_at_1 <= report.r_at_2 && report.r_at_2 <= report.r_at_5);
    worst
}

/// R@1 of ranking candidates by how many of their tokens occur in the last
/// utterance or the document.
pub fn token_overlap_r_at_1(sets: &[CandidateSet]) -> f64 {
    let ids = |s: &TokenSeq| s.ids[..s.true_length].to_vec();
    evaluate_with(sets, |set| {
        let last = set.context.last().expect("non-empty context");
        let pool: HashSet<usize> = ids(last).into_iter().chain(set.document.iter().flat_map(ids)).collect();
        Ok(set
            .candidates
            .iter()
            .map(|c| ids(c).iter().filter(|t| pool.contains(t)).count() as f64)
            .collect())
    })
    .unwrap()
    .r_at_1
}
