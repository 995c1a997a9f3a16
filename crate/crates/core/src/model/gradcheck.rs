//! Finite-difference checks of the analytic gradients.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::index;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::UniverseCounts;
use crate::metrics::{build_member_metrics, build_tuple_metrics, MetricSet};
use crate::model::embedding::{init_embeddings, EmbeddingTable};
use crate::model::loss::{cd_loss, cd_loss_grad, pairwise_loss, pairwise_loss_grad, Batch, Candidates, PositivePair, Supervision, WeightedPair};
use crate::model::LossKind;
use crate::synth::random_graph;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Entries smaller than this in both gradients are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-4;

/// Central differences of `f` w.r.t. every trainable entry of `e`.
pub fn numeric_gradient(e: &EmbeddingTable, h: f64, f: impl Fn(&EmbeddingTable) -> f64) -> Array2<f64> {
    let mut probe = e.clone();
    let mut out = Array2::zeros((e.rows(), e.trainable_dim()));
    for r in 0..e.rows() {
        for c in 0..e.trainable_dim() {
            let x = e.row(r)[c];
            probe.data_mut_unchecked()[[r, c]] = x + h;
            let up = f(&probe);
            probe.data_mut_unchecked()[[r, c]] = x - h;
            let down = f(&probe);
            probe.data_mut_unchecked()[[r, c]] = x;
            out[[r, c]] = (up - down) / (2.0 * h);
        }
    }
    out
}

/// `max |a − n| / max(|a|, |n|, floor)` over all entries.
pub fn max_relative_error(analytic: &Array2<f64>, numeric: &Array2<f64>, floor: f64) -> f64 {
    assert_eq!(analytic.dim(), numeric.dim());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// A small random problem: metrics over ten joint nodes, an embedding
/// table and a batch of every positive pair.
pub struct GradProblem {
    pub metrics: MetricSet,
    pub embeddings: EmbeddingTable,
    pub batch: Batch,
    pub pairs: Vec<WeightedPair>,
    pub tau: f64,
}

/// Builds the problem for `seed`. Seeds alternate between member-derived
/// and interaction-derived metrics, full and sampled candidates, and plain
/// and concatenated (partly frozen) tables.
pub fn random_problem(seed: u64) -> Result<GradProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let counts = UniverseCounts { tuples: 5, members: 6, objects: 5 };
    let mut attempt = 0u64;
    let metrics = loop {
        let g = random_graph(seed.wrapping_mul(1000).wrapping_add(attempt), counts, 2.0)?;
        attempt += 1;
        let m = if seed % 2 == 0 { build_member_metrics(&g) } else { build_tuple_metrics(g.y()) };
        if let Ok(m) = m {
            if !m.positive_pairs().is_empty() {
                break m;
            }
        }
    };
    let n = metrics.joint_size();
    let fine = init_embeddings(n, 4, seed)?;
    let embeddings = if seed % 3 == 0 {
        EmbeddingTable::concatenate(&fine, &init_embeddings(n, 3, seed + 1)?)?
    } else {
        fine
    };
    let positives: Vec<PositivePair> = metrics
        .positive_pairs()
        .into_iter()
        .map(|(anchor, positive, c)| PositivePair { anchor, positive, c })
        .collect();
    let candidates = if seed % 4 < 2 {
        Candidates::All
    } else {
        let mut lists = BTreeMap::new();
        for p in &positives {
            lists.entry(p.anchor).or_insert_with(|| {
                index::sample(&mut rng, n - 1, 4)
                    .into_iter()
                    .map(|i| if i >= p.anchor { i + 1 } else { i })
                    .collect::<Vec<_>>()
            });
        }
        Candidates::Sampled(lists)
    };
    let mut pairs = Vec::new();
    for v1 in 0..n {
        for v2 in 0..n {
            if v1 != v2 {
                pairs.push(WeightedPair {
                    v1,
                    v2,
                    c: metrics.consistency(v1, v2),
                    d: metrics.discrepancy(v1, v2),
                });
            }
        }
    }
    Ok(GradProblem {
        metrics,
        embeddings,
        batch: Batch { pairs: positives, candidates },
        pairs,
        tau: rng.random_range(0.2..2.0),
    })
}

/// Maximum relative error between the analytic and the central-difference
/// gradient of `kind` on `problem`.
pub fn check_gradient(kind: LossKind, problem: &GradProblem) -> f64 {
    let sup = Supervision::new(&problem.metrics);
    let e = &problem.embeddings;
    let (analytic, numeric) = match kind.pairwise() {
        None => {
            let (_, g) = cd_loss_grad(&problem.batch, sup, e, problem.tau);
            let n = numeric_gradient(e, FD_STEP, |t| cd_loss(&problem.batch, sup, t, problem.tau).loss);
            (g, n)
        }
        Some(p) => {
            let (_, g) = pairwise_loss_grad(p, &problem.pairs, e);
            let n = numeric_gradient(e, FD_STEP, |t| pairwise_loss(p, &problem.pairs, t));
            (g, n)
        }
    };
    max_relative_error(&analytic, &numeric, RELATIVE_FLOOR)
}
