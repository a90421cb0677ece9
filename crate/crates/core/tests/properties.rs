use miqrec_core::attention::{
    miq_sublayer, window_mask, AggregatorMode, AggregatorNodes, AttentionNodes, SublayerShape,
};
use miqrec_core::data::{
    kcore_filter, leave_one_out_split, pad_truncate, InteractionLog, ItemSet, RawInteraction, UserSequence,
};
use miqrec_core::eval::{hr_at_k, ndcg_at_k, rank_of_target};
use miqrec_core::ops::{layer_norm, masked_softmax_rows};
use miqrec_core::{Graph, Mask, Matrix, RngStream};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    RngStream::new(seed).normal_matrix(rows, cols, 2.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..8, seed in any::<u64>()) {
        let s = matrix(rows, cols, seed);
        let mask = Mask::from_fn(rows, cols, |i, j| j <= i % cols);
        let p = masked_softmax_rows(&s, Some(&mask)).unwrap();
        for i in 0..rows {
            let sum: f64 = p.row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for j in 0..cols {
                if !mask.allows(i, j) {
                    prop_assert_eq!(p.get(i, j), 0.0);
                }
                prop_assert!(p.get(i, j) >= 0.0);
            }
        }
    }

    #[test]
    fn layer_norm_standardizes(cols in 2usize..20, seed in any::<u64>()) {
        let x = matrix(3, cols, seed);
        for i in 0..3 {
            let mean = x.row(i).iter().sum::<f64>() / cols as f64;
            let var = x.row(i).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            prop_assume!(var > 0.1);
        }
        let y = layer_norm(&x, &Matrix::filled(1, cols, 1.0), &Matrix::zeros(1, cols), 1e-8).unwrap().output;
        for i in 0..3 {
            let mean = y.row(i).iter().sum::<f64>() / cols as f64;
            let var = y.row(i).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rank_agrees_with_sorting(scores in prop::collection::vec(0u8..5, 1..30), t in any::<prop::sample::Index>(), hmask in any::<u32>()) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let n = scores.len();
        let target = 1 + t.index(n) as u32;
        let hist: Vec<u32> = (1..=n as u32).filter(|&i| i != target && hmask >> (i % 32) & 1 == 1).collect();
        let rank = rank_of_target(&scores, target, &ItemSet::from_items(hist.clone())).unwrap();
        let mut cands: Vec<u32> = (1..=n as u32).filter(|i| *i == target || !hist.contains(i)).collect();
        cands.sort_by(|&a, &b| scores[b as usize - 1].total_cmp(&scores[a as usize - 1]).then(a.cmp(&b)));
        prop_assert_eq!(rank, cands.iter().position(|&c| c == target).unwrap() + 1);
    }

    #[test]
    fn metrics_are_ordered(ranks in prop::collection::vec(1usize..50, 1..40)) {
        let mut prev = (0.0, 0.0);
        for k in [1, 5, 10, 20] {
            let (hr, ndcg) = (hr_at_k(&ranks, k).unwrap(), ndcg_at_k(&ranks, k).unwrap());
            prop_assert!(0.0 <= ndcg && ndcg <= hr + 1e-15 && hr <= 1.0);
            prop_assert!(hr >= prev.0 && ndcg >= prev.1);
            prev = (hr, ndcg);
        }
    }

    #[test]
    fn kcore_output_meets_threshold(edges in prop::collection::vec((0u64..15, 0u64..12), 1..120), k in 1usize..5) {
        let raw: Vec<RawInteraction> = edges.iter().enumerate()
            .map(|(t, &(user, item))| RawInteraction { user, item, timestamp: t as i64 }).collect();
        let log = InteractionLog::from_raw(&raw).unwrap();
        if let Ok(core) = kcore_filter(&log, k) {
            let mut users = vec![0; core.n_users() + 1];
            let mut items = vec![0; core.n_items() + 1];
            for r in core.records() {
                users[r.user as usize] += 1;
                items[r.item as usize] += 1;
            }
            prop_assert!(users[1..].iter().all(|&c| c >= k));
            prop_assert!(items[1..].iter().all(|&c| c >= k));
            // idempotent
            prop_assert_eq!(kcore_filter(&core, k).unwrap().len(), core.len());
        }
    }

    #[test]
    fn split_reassembles(lens in prop::collection::vec(3usize..12, 1..10)) {
        let seqs: Vec<UserSequence> = lens.iter().enumerate()
            .map(|(u, &l)| UserSequence { user: u as u32, items: (0..l).map(|t| 1 + ((u + 3 * t) % 20) as u32).collect() })
            .collect();
        let split = leave_one_out_split(&seqs, 20).unwrap();
        for (s, u) in seqs.iter().zip(&split.users) {
            prop_assert_eq!(&u.reassemble(), &s.items);
        }
    }

    #[test]
    fn pad_truncate_keeps_the_suffix(items in prop::collection::vec(1u32..100, 0..30), len in 1usize..20) {
        let row = pad_truncate(&items, len);
        prop_assert_eq!(row.len(), len);
        let take = items.len().min(len);
        prop_assert_eq!(&row[len - take..], &items[items.len() - take..]);
        prop_assert!(row[..len - take].iter().all(|&v| v == 0));
    }

    #[test]
    fn sublayer_is_causal(t in 1usize..7, m in 1usize..4, mode in 0usize..3, dummy_kv: bool, seed in any::<u64>(), cut in any::<prop::sample::Index>()) {
        let d = 4;
        let mode = [AggregatorMode::Context, AggregatorMode::Last, AggregatorMode::Full][mode];
        let mut rng = RngStream::new(seed);
        let weights: Vec<Matrix> = (0..m + 5).map(|_| rng.normal_matrix(d, d, 0.5)).collect();
        let h = rng.normal_matrix(t + m - 1, d, 1.0);
        let run = |h: &Matrix| {
            let mut g = Graph::new();
            let x = g.constant(h.clone());
            let w: Vec<_> = weights.iter().map(|w| g.constant(w.clone())).collect();
            let nodes = AttentionNodes {
                queries: w[..m].to_vec(),
                key: w[m],
                value: w[m + 1],
                aggregator: Some(AggregatorNodes { query: w[m + 2], key: w[m + 3], value: w[m + 4] }),
            };
            let out = miq_sublayer(&mut g, x, &nodes, SublayerShape { real_len: t, m, mode, dummy_kv, heads: 1 }).unwrap();
            g.value(out).clone()
        };
        let base = run(&h);
        let u = cut.index(t + m - 1);
        let mut pert = h.clone();
        for r in u + 1..t + m - 1 {
            pert.row_mut(r).iter_mut().for_each(|v| *v = -*v + 1.0);
        }
        let out = run(&pert);
        for r in 0..=u {
            prop_assert_eq!(out.row(r), base.row(r));
        }
        prop_assert_eq!(window_mask(t, m, dummy_kv).rows(), t + m - 1);
    }
}
