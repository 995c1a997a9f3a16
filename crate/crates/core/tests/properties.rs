use proptest::prelude::*;

use cdr_core::eval::{rank_top_k, topk_metrics, RankingTask, ScoreFn};
use cdr_core::graph::{build_graph, degrees, split_interactions, DegreeRegime, NodeKind, Relation, SplitSpec, TripartiteGraph};
use cdr_core::metrics::{bruteforce_metrics, build_member_metrics, build_tuple_metrics, Stage};
use cdr_core::model::loss::{cd_loss, origin_loss, Batch, Candidates, PositivePair, Supervision, WeightedPair};
use cdr_core::model::{adam_step, init_embeddings, AdamState};

fn edges(max_src: usize, max_dst: usize, max_edges: usize) -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::collection::vec((0..max_src, 0..max_dst), 0..max_edges)
}

fn graph_strategy() -> impl Strategy<Value = TripartiteGraph> {
    (1usize..8, 1usize..8, 1usize..8).prop_flat_map(|(t, m, o)| {
        (edges(t, o, 20), edges(m, o, 30), edges(t, m, 20)).prop_map(move |(y, x, z)| {
            build_graph(
                Some(Relation::from_edges(NodeKind::Tuple, NodeKind::Object, t, o, y).unwrap()),
                Relation::from_edges(NodeKind::Member, NodeKind::Object, m, o, x).unwrap(),
                Relation::from_edges(NodeKind::Tuple, NodeKind::Member, t, m, z).unwrap(),
            )
            .unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transpose_twice_is_identity(e in edges(9, 7, 40)) {
        let r = Relation::from_edges(NodeKind::Tuple, NodeKind::Object, 9, 7, e).unwrap();
        prop_assert_eq!(r.transpose().transpose(), r.clone());
        prop_assert_eq!(r.transpose().edge_count(), r.edge_count());
    }

    #[test]
    fn split_partitions_edges(e in edges(10, 10, 60), seed in any::<u64>(), train in 0.0f64..0.5, test in 0.0f64..0.5) {
        let y = Relation::from_edges(NodeKind::Tuple, NodeKind::Object, 10, 10, e).unwrap();
        prop_assume!(!y.is_empty());
        let spec = SplitSpec { train, test, valid: 0.0, seed };
        let s = split_interactions(&y, &spec).unwrap();
        let mut all: Vec<(usize, usize)> = [&s.train, &s.valid, &s.test, &s.discarded].iter().flat_map(|r| r.edges()).collect();
        all.sort_unstable();
        let before = all.len();
        all.dedup();
        prop_assert_eq!(before, all.len());
        prop_assert_eq!(all, y.edges().collect::<Vec<_>>());
        prop_assert_eq!(split_interactions(&y, &spec).unwrap().train, s.train);
    }

    #[test]
    fn degree_tables_match_edge_counts(g in graph_strategy()) {
        let pre = degrees(&g, DegreeRegime::Pretrain);
        prop_assert_eq!(pre.tuples.iter().sum::<usize>(), g.z().edge_count());
        prop_assert_eq!(pre.objects.iter().sum::<usize>(), g.x().edge_count());
        prop_assert_eq!(pre.members.iter().sum::<usize>(), g.x().edge_count() + g.z().edge_count());
        let fine = degrees(&g, DegreeRegime::Finetune);
        prop_assert_eq!(fine.tuples.iter().sum::<usize>(), g.y().edge_count());
        prop_assert!(fine.members.iter().all(|&d| d == 0));
    }

    #[test]
    fn sparse_metrics_match_oracle(g in graph_strategy()) {
        if let Ok(m) = build_member_metrics(&g) {
            let o = bruteforce_metrics(&g, Stage::Pretrain, 200).unwrap();
            prop_assert!(m.to_dense().max_abs_diff(&o) <= 1e-10);
        }
        if let Ok(m) = build_tuple_metrics(g.y()) {
            let o = bruteforce_metrics(&g, Stage::Finetune, 200).unwrap();
            prop_assert!(m.to_dense().max_abs_diff(&o) <= 1e-10);
        }
    }

    #[test]
    fn discrepancy_is_never_negative(g in graph_strategy()) {
        for m in [build_member_metrics(&g), build_tuple_metrics(g.y())].into_iter().flatten() {
            let dense = m.to_dense();
            prop_assert!(dense.discrepancy.iter().all(|&d| d >= 0.0));
            for v in 0..m.joint_size() {
                prop_assert_eq!(m.discrepancy(v, v), 0.0);
            }
        }
    }

    #[test]
    fn cd_loss_ignores_row_scale(g in graph_strategy(), seed in 0u64..1000, scale in 0.01f64..100.0, tau in 0.1f64..5.0) {
        let m = match build_member_metrics(&g) { Ok(m) => m, Err(_) => return Ok(()) };
        let pairs: Vec<PositivePair> = m.positive_pairs().into_iter().map(|(anchor, positive, c)| PositivePair { anchor, positive, c }).collect();
        prop_assume!(!pairs.is_empty());
        let batch = Batch { pairs, candidates: Candidates::All };
        let e = init_embeddings(m.joint_size(), 6, seed).unwrap();
        let mut s = e.clone();
        s.scale(scale);
        let sup = Supervision::new(&m);
        let (a, b) = (cd_loss(&batch, sup, &e, tau).loss, cd_loss(&batch, sup, &s, tau).loss);
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn origin_loss_depends_on_scale(seed in 0u64..1000) {
        let e = init_embeddings(4, 5, seed).unwrap();
        let mut s = e.clone();
        s.scale(4.0);
        let pairs = [WeightedPair { v1: 0, v2: 1, c: 0.0, d: 1.0 }, WeightedPair { v1: 2, v2: 3, c: 0.0, d: 1.0 }];
        prop_assert!((origin_loss(&pairs, &e) - origin_loss(&pairs, &s)).abs() > 1e-9);
    }

    #[test]
    fn softmax_entropy_shrinks_as_temperature_drops(seed in 0u64..1000, weight in 0.01f64..3.0) {
        // equal discrepancy weights; unequal ones can make the entropy rise
        let weights = [weight; 6];
        let e = init_embeddings(7, 4, seed).unwrap();
        let cos: Vec<f64> = (1..7).map(|v| {
            let (a, b) = (e.row(0), e.row(v));
            a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt())
        }).collect();
        let entropy = |tau: f64| {
            let mass: Vec<f64> = cos.iter().zip(&weights).map(|(c, w)| w * ((c - 1.0) / tau).exp()).collect();
            let z: f64 = mass.iter().sum();
            -mass.iter().map(|m| { let p = m / z; if p > 0.0 { p * p.ln() } else { 0.0 } }).sum::<f64>()
        };
        let mut prev = f64::INFINITY;
        for tau in [10.0, 3.8, 2.0, 1.0, 0.5, 0.3, 0.1] {
            let h = entropy(tau);
            prop_assert!(h <= prev + 1e-12);
            prev = h;
        }
    }

    #[test]
    fn ndcg_is_one_exactly_for_ideal_rankings(truth in prop::collection::btree_set(0usize..30, 1..8), k in 1usize..12, swap in any::<bool>()) {
        let t: Vec<usize> = truth.iter().copied().collect();
        let others: Vec<usize> = (0..30).filter(|o| !truth.contains(o)).collect();
        let mut ranking: Vec<usize> = t.iter().chain(&others).copied().collect();
        let ideal = topk_metrics(&[ranking.clone()], &[t.clone()], k).unwrap();
        prop_assert!((ideal.ndcg - 1.0).abs() < 1e-12);
        if swap && t.len() < 30 {
            // push the first relevant item just past the cut-off
            let first = ranking.remove(0);
            ranking.insert(k.min(t.len()).max(1).min(ranking.len()), first);
            if ranking.iter().take(k.min(t.len())).filter(|o| truth.contains(o)).count() < k.min(t.len()) {
                let worse = topk_metrics(&[ranking], &[t], k).unwrap();
                prop_assert!(worse.ndcg < 1.0);
            }
        }
    }

    #[test]
    fn excluded_objects_never_ranked(seed in 0u64..1000, excl in prop::collection::btree_set(0usize..20, 0..10)) {
        let train = Relation::from_edges(NodeKind::Tuple, NodeKind::Object, 1, 20, excl.iter().map(|&o| (0, o))).unwrap();
        let candidates: Vec<usize> = (0..20).filter(|o| !excl.contains(o)).collect();
        prop_assume!(!candidates.is_empty());
        let test = Relation::from_edges(NodeKind::Tuple, NodeKind::Object, 1, 20, [(0, candidates[0])]).unwrap();
        let task = RankingTask::new(&test, &[&train]).unwrap();
        let e = init_embeddings(21, 3, seed).unwrap();
        let ranked = rank_top_k(&task, &e, 20, ScoreFn::Cosine).unwrap();
        prop_assert!(ranked[0].iter().all(|o| !excl.contains(o)));
        prop_assert_eq!(ranked[0].len(), candidates.len());
    }

    #[test]
    fn adam_is_deterministic(seed in 0u64..1000) {
        let run = || {
            let mut e = init_embeddings(5, 3, seed).unwrap();
            let mut st = AdamState::for_table(&e);
            for i in 0..20 {
                let g = e.data().mapv(|x| x * (i as f64 + 1.0).sin());
                adam_step(&mut e, &g, &mut st, 0.01).unwrap();
            }
            e
        };
        prop_assert_eq!(run(), run());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn ranking_metrics_are_bounded_and_recall_grows_with_k(
        truths in prop::collection::vec(prop::collection::btree_set(0usize..40, 1..6), 1..10),
        seed in 0u64..1000,
    ) {
        let n_t = truths.len();
        let e: Vec<(usize, usize)> = truths.iter().enumerate().flat_map(|(t, s)| s.iter().map(move |&o| (t, o))).collect();
        let truth = Relation::from_edges(NodeKind::Tuple, NodeKind::Object, n_t, 40, e).unwrap();
        let task = RankingTask::new(&truth, &[]).unwrap();
        let emb = init_embeddings(n_t + 40, 5, seed).unwrap();
        let ranked = rank_top_k(&task, &emb, 40, ScoreFn::Cosine).unwrap();
        let mut prev = 0.0;
        for k in [1, 5, 10, 20, 30, 40] {
            let m = topk_metrics(&ranked, task.truth(), k).unwrap();
            for v in [m.recall, m.precision, m.ndcg, m.f1] {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            }
            prop_assert!(m.recall >= prev);
            prev = m.recall;
        }
        // every object is ranked at K = 40, so recall is complete
        prop_assert!((prev - 1.0).abs() < 1e-12);
    }
}
