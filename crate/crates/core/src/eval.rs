//! Full-corpus leave-one-out ranking metrics.

use alloc::vec::Vec;

use crate::data::{ItemSet, Phase, SplitSet};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::model::SeqRecModel;

pub const DEFAULT_CUTOFFS: [usize; 3] = [5, 10, 20];

/// 1-based rank of `target` among `{target} ∪ (items ∖ history)`.
///
/// `scores[i − 1]` is the score of item `i`. A candidate outranks the target
/// if its score is greater, or equal with a smaller id.
pub fn rank_of_target(scores: &[f64], target: u32, history: &ItemSet) -> Result<usize> {
    if target == 0 || target as usize > scores.len() {
        return Err(Error::UnknownItem { id: target, vocabulary: scores.len() });
    }
    let ts = scores[target as usize - 1];
    let mut rank = 1;
    for (i, &s) in scores.iter().enumerate() {
        let id = i as u32 + 1;
        if id == target || history.contains(id) {
            continue;
        }
        if s > ts || (s == ts && id < target) {
            rank += 1;
        }
    }
    Ok(rank)
}

pub fn hr_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::EmptyInput("rank list"));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

pub fn ndcg_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::EmptyInput("rank list"));
    }
    let gain: f64 = ranks.iter().filter(|&&r| r <= k).map(|&r| 1.0 / libm::log2(r as f64 + 1.0)).sum();
    Ok(gain / ranks.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutoffMetrics {
    pub k: usize,
    pub hr: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub phase: Phase,
    pub users: usize,
    pub exclude_history: bool,
    pub cutoffs: Vec<CutoffMetrics>,
}

impl MetricReport {
    pub fn from_ranks(phase: Phase, ranks: &[usize], ks: &[usize], exclude_history: bool) -> Result<Self> {
        let cutoffs = ks
            .iter()
            .map(|&k| Ok(CutoffMetrics { k, hr: hr_at_k(ranks, k)?, ndcg: ndcg_at_k(ranks, k)? }))
            .collect::<Result<_>>()?;
        Ok(Self { phase, users: ranks.len(), exclude_history, cutoffs })
    }

    pub fn at(&self, k: usize) -> Option<CutoffMetrics> {
        self.cutoffs.iter().copied().find(|c| c.k == k)
    }
}

/// Rank of each user's phase target, in user order.
pub fn target_ranks<E: Executor>(
    model: &SeqRecModel,
    split: &SplitSet,
    phase: Phase,
    exclude_history: bool,
    exec: &E,
) -> Result<Vec<usize>> {
    let empty = ItemSet::default();
    exec.map(split.users.len(), |u| {
        let (history, target) = split.users[u].eval_case(phase);
        let scores = model.next_item_scores(&history)?;
        let excluded = if exclude_history { ItemSet::from_items(history) } else { empty.clone() };
        rank_of_target(&scores, target, &excluded)
    })
    .into_iter()
    .collect()
}

pub fn evaluate<E: Executor>(
    model: &SeqRecModel,
    split: &SplitSet,
    phase: Phase,
    ks: &[usize],
    exclude_history: bool,
    exec: &E,
) -> Result<MetricReport> {
    let ranks = target_ranks(model, split, phase, exclude_history, exec)?;
    MetricReport::from_ranks(phase, &ranks, ks, exclude_history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use alloc::vec;

    fn brute_force_rank(scores: &[f64], target: u32, history: &[u32]) -> usize {
        let mut cands: Vec<u32> = (1..=scores.len() as u32).filter(|i| *i == target || !history.contains(i)).collect();
        cands.sort_by(|&a, &b| scores[b as usize - 1].total_cmp(&scores[a as usize - 1]).then(a.cmp(&b)));
        cands.iter().position(|&c| c == target).unwrap() + 1
    }

    #[test]
    fn rank_examples() {
        let none = ItemSet::default();
        assert_eq!(rank_of_target(&[0.1, 0.9, 0.3], 2, &none).unwrap(), 1);
        let flat = [0.5; 6];
        for t in 1..=6 {
            assert_eq!(rank_of_target(&flat, t, &none).unwrap(), t as usize);
        }
        // excluded items never outrank the target
        let hist = ItemSet::from_items(vec![1, 3]);
        assert_eq!(rank_of_target(&[9.0, 0.2, 8.0, 0.1], 2, &hist).unwrap(), 1);
        assert!(matches!(rank_of_target(&[0.0; 3], 4, &none), Err(Error::UnknownItem { .. })));
    }

    #[test]
    fn rank_matches_full_sort_oracle() {
        let mut rng = RngStream::new(1);
        for _ in 0..200 {
            let scores: Vec<f64> = (0..20).map(|_| (rng.below(6) as f64) * 0.5).collect();
            let target = 1 + rng.below(20) as u32;
            let hist: Vec<u32> = (1..=20).filter(|&i| i != target && rng.uniform() < 0.3).collect();
            let r = rank_of_target(&scores, target, &ItemSet::from_items(hist.clone())).unwrap();
            assert_eq!(r, brute_force_rank(&scores, target, &hist));
        }
    }

    #[test]
    fn metric_examples() {
        assert_eq!(hr_at_k(&[1, 1, 1], 5).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&[1, 1, 1], 5).unwrap(), 1.0);
        assert_eq!(hr_at_k(&[2], 5).unwrap(), 1.0);
        assert!((ndcg_at_k(&[2], 5).unwrap() - 0.6309297535714575).abs() < 1e-12);
        assert_eq!(hr_at_k(&[], 5).unwrap_err(), Error::EmptyInput("rank list"));
    }

    #[test]
    fn metrics_match_direct_formula() {
        let mut rng = RngStream::new(2);
        let ranks: Vec<usize> = (0..100).map(|_| 1 + rng.below(40)).collect();
        for k in [1, 5, 10, 20] {
            let mut hits = 0.0;
            let mut gain = 0.0;
            for &r in &ranks {
                if r <= k {
                    hits += 1.0;
                    gain += 1.0 / ((r + 1) as f64).log2();
                }
            }
            assert!((hr_at_k(&ranks, k).unwrap() - hits / 100.0).abs() < 1e-15);
            assert!((ndcg_at_k(&ranks, k).unwrap() - gain / 100.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rank_is_invariant_under_monotone_transform() {
        let mut rng = RngStream::new(3);
        let scores: Vec<f64> = (0..15).map(|_| rng.standard_normal()).collect();
        let squashed: Vec<f64> = scores.iter().map(|s| 3.0 * s.exp() + 1.0).collect();
        let hist = ItemSet::from_items(vec![2, 7]);
        for t in [1, 5, 9, 15] {
            assert_eq!(rank_of_target(&scores, t, &hist).unwrap(), rank_of_target(&squashed, t, &hist).unwrap());
        }
    }
}
