//! Recall@k evaluation over candidate sets.

use serde::{Deserialize, Serialize};

use crate::data::{CandidateSet, CANDIDATES_PER_SET};
use crate::error::{CsnError, Result};
use crate::model::CsnModel;

pub const RECALL_POSITIONS: [usize; 3] = [1, 2, 5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub r_at_1: f64,
    pub r_at_2: f64,
    pub r_at_5: f64,
    pub n_sets: usize,
    /// 0-based rank of the positive in each set.
    pub ranks: Vec<usize>,
}

/// Rank of the positive among `scores`; every other candidate scoring at
/// least as high is placed ahead of it.
pub fn pessimistic_rank(scores: &[f64], positive: usize) -> Result<usize> {
    let p = *scores
        .get(positive)
        .ok_or_else(|| CsnError::MalformedSet(format!("positive index {positive} out of range")))?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(CsnError::NonFinite("NaN candidate score".into()));
    }
    Ok(scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| i != positive && s >= p)
        .count())
}

pub fn recall_at(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64
}

impl EvalReport {
    pub fn from_ranks(ranks: Vec<usize>) -> Self {
        Self {
            r_at_1: recall_at(&ranks, 1),
            r_at_2: recall_at(&ranks, 2),
            r_at_5: recall_at(&ranks, 5),
            n_sets: ranks.len(),
            ranks,
        }
    }

    /// Builds a report from per-set candidate scores and positive indices.
    pub fn from_scores(scores: &[Vec<f64>], positives: &[usize]) -> Result<Self> {
        if scores.len() != positives.len() {
            return Err(CsnError::MalformedSet("score and label counts differ".into()));
        }
        let ranks = scores
            .iter()
            .zip(positives)
            .map(|(s, &p)| {
                if s.len() != CANDIDATES_PER_SET {
                    return Err(CsnError::MalformedSet(format!(
                        "{} candidates, expected {CANDIDATES_PER_SET}",
                        s.len()
                    )));
                }
                pessimistic_rank(s, p)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_ranks(ranks))
    }
}

/// Scores every set with `scorer` and reports R@{1,2,5}.
pub fn evaluate_with<F>(sets: &[CandidateSet], mut scorer: F) -> Result<EvalReport>
where
    F: FnMut(&CandidateSet) -> Result<Vec<f64>>,
{
    let mut ranks = Vec::with_capacity(sets.len());
    for set in sets {
        set.validate()?;
        let scores = scorer(set)?;
        ranks.push(pessimistic_rank(&scores, set.positive_index)?);
    }
    Ok(EvalReport::from_ranks(ranks))
}

pub fn evaluate(model: &CsnModel, sets: &[CandidateSet]) -> Result<EvalReport> {
    evaluate_with(sets, |s| model.score_set(s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_go_against_the_positive() {
        assert_eq!(pessimistic_rank(&[0.5, 0.5, 0.1], 0).unwrap(), 1);
        assert_eq!(pessimistic_rank(&[0.5, 0.5, 0.1], 1).unwrap(), 1);
        assert_eq!(pessimistic_rank(&[0.9, 0.5, 0.1], 0).unwrap(), 0);
        assert_eq!(pessimistic_rank(&[0.3; 20], 7).unwrap(), 19);
    }

    #[test]
    fn third_place_counts_only_for_r5() {
        let r = EvalReport::from_ranks(vec![2]);
        assert_eq!((r.r_at_1, r.r_at_2, r.r_at_5), (0.0, 0.0, 1.0));
    }

    #[test]
    fn nan_scores_are_rejected() {
        assert!(pessimistic_rank(&[0.1, f64::NAN], 0).is_err());
    }
}
