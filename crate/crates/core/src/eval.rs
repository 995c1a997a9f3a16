//! Top-K ranking evaluation and the consistency/discrepancy vs. loss
//! correlation analysis.

use std::cmp::Ordering;
use std::fmt::Write as _;

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Relation;
use crate::metrics::MetricSet;
use crate::model::embedding::EmbeddingTable;
use crate::model::loss::PositivePair;

pub const DEFAULT_KS: [usize; 3] = [10, 20, 30];

/// Recommendees scored per matrix product.
const SCORE_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreFn {
    #[default]
    Cosine,
    Dot,
}

impl ScoreFn {
    pub fn name(self) -> &'static str {
        match self {
            ScoreFn::Cosine => "cosine",
            ScoreFn::Dot => "dot",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cosine" => Some(ScoreFn::Cosine),
            "dot" => Some(ScoreFn::Dot),
            _ => None,
        }
    }
}

/// Tuples to rank objects for, with the objects each must not be offered
/// and the held-out objects it should be offered.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingTask {
    n_tuples: usize,
    n_objects: usize,
    recommendees: Vec<usize>,
    exclusions: Vec<Vec<usize>>,
    truth: Vec<Vec<usize>>,
}

impl RankingTask {
    /// Every tuple with at least one `truth` edge becomes a recommendee.
    /// Objects in any `exclude` relation are removed from its candidates
    /// (and from its truth, should the two overlap).
    pub fn new(truth: &Relation, exclude: &[&Relation]) -> Result<Self> {
        let (n_tuples, n_objects) = (truth.src_count(), truth.dst_count());
        for r in exclude {
            if (r.src_count(), r.dst_count()) != (n_tuples, n_objects) {
                return Err(Error::DimensionMismatch(format!(
                    "exclusion relation is {}x{}, truth is {n_tuples}x{n_objects}",
                    r.src_count(),
                    r.dst_count()
                )));
            }
        }
        let mut recommendees = Vec::new();
        let mut exclusions = Vec::new();
        let mut truths = Vec::new();
        let mut overlap = 0usize;
        for t in 0..n_tuples {
            if truth.row(t).is_empty() {
                continue;
            }
            let mut ex: Vec<usize> = exclude.iter().flat_map(|r| r.row(t).iter().copied()).collect();
            ex.sort_unstable();
            ex.dedup();
            let tr: Vec<usize> = truth.row(t).iter().copied().filter(|o| ex.binary_search(o).is_err()).collect();
            overlap += truth.row(t).len() - tr.len();
            if tr.is_empty() {
                continue;
            }
            recommendees.push(t);
            exclusions.push(ex);
            truths.push(tr);
        }
        if overlap > 0 {
            log::warn!("{overlap} held-out interactions also appear in the exclusion set; dropped from the truth");
        }
        if recommendees.is_empty() {
            return Err(Error::NoGroundTruth);
        }
        Ok(RankingTask {
            n_tuples,
            n_objects,
            recommendees,
            exclusions,
            truth: truths,
        })
    }

    pub fn n_tuples(&self) -> usize {
        self.n_tuples
    }

    pub fn n_objects(&self) -> usize {
        self.n_objects
    }

    pub fn recommendees(&self) -> &[usize] {
        &self.recommendees
    }

    pub fn exclusions(&self) -> &[Vec<usize>] {
        &self.exclusions
    }

    pub fn truth(&self) -> &[Vec<usize>] {
        &self.truth
    }
}

fn check_rows(task: &RankingTask, e: &EmbeddingTable) -> Result<()> {
    let need = task.n_tuples + task.n_objects;
    if e.rows() != need {
        return Err(Error::DimensionMismatch(format!(
            "embedding table has {} rows, task needs {need}",
            e.rows()
        )));
    }
    Ok(())
}

fn normalized(rows: ArrayView2<'_, f64>) -> (Array2<f64>, Vec<bool>) {
    let mut out = rows.to_owned();
    let mut zero = Vec::with_capacity(out.nrows());
    for mut r in out.rows_mut() {
        let n = r.dot(&r).sqrt();
        zero.push(n == 0.0);
        if n > 0.0 {
            r.mapv_inplace(|x| x / n);
        }
    }
    (out, zero)
}

/// Scores of every object for one tuple. Objects with a zero embedding
/// score `−∞` under cosine.
pub fn score(tuple: usize, e: &EmbeddingTable, n_tuples: usize, score_fn: ScoreFn) -> Vec<f64> {
    let data = e.data();
    let objects = data.slice(s![n_tuples.., ..]);
    let t = data.row(tuple);
    match score_fn {
        ScoreFn::Dot => objects.dot(&t).to_vec(),
        ScoreFn::Cosine => {
            let tn = t.dot(&t).sqrt();
            objects
                .rows()
                .into_iter()
                .map(|o| {
                    let on = o.dot(&o).sqrt();
                    if on == 0.0 {
                        f64::NEG_INFINITY
                    } else if tn == 0.0 {
                        0.0
                    } else {
                        o.dot(&t) / (on * tn)
                    }
                })
                .collect()
        }
    }
}

/// Descending score, ties by ascending object id.
fn by_score(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

/// Top-`k` objects from a score vector, skipping `excluded` (sorted ids).
pub fn top_k_from_scores(scores: &[f64], excluded: &[usize], k: usize) -> Vec<usize> {
    let mut cands: Vec<(f64, usize)> = scores
        .iter()
        .enumerate()
        .filter(|(o, _)| excluded.binary_search(o).is_err())
        .map(|(o, &s)| (s, o))
        .collect();
    if k < cands.len() {
        cands.select_nth_unstable_by(k, by_score);
        cands.truncate(k);
    }
    cands.sort_by(by_score);
    cands.into_iter().map(|(_, o)| o).collect()
}

/// Ranked object list for one tuple.
pub fn rank(tuple: usize, e: &EmbeddingTable, n_tuples: usize, excluded: &[usize], k: usize, score_fn: ScoreFn) -> Vec<usize> {
    top_k_from_scores(&score(tuple, e, n_tuples, score_fn), excluded, k)
}

/// Top-`k` lists for every recommendee of the task, in task order.
pub fn rank_top_k(task: &RankingTask, e: &EmbeddingTable, k: usize, score_fn: ScoreFn) -> Result<Vec<Vec<usize>>> {
    check_rows(task, e)?;
    let data = e.data();
    let (tuples, objects) = data.view().split_at(Axis(0), task.n_tuples);
    let (t_rows, o_rows, zero_objects) = match score_fn {
        ScoreFn::Dot => (tuples.to_owned(), objects.to_owned(), vec![false; task.n_objects]),
        ScoreFn::Cosine => {
            let (t, _) = normalized(tuples);
            let (o, z) = normalized(objects);
            (t, o, z)
        }
    };
    let n_zero = zero_objects.iter().filter(|&&z| z).count();
    if n_zero > 0 && score_fn == ScoreFn::Cosine {
        log::warn!("{n_zero} objects have zero-norm embeddings and are ranked last");
    }
    let mut out = Vec::with_capacity(task.recommendees.len());
    for chunk_start in (0..task.recommendees.len()).step_by(SCORE_CHUNK) {
        let chunk = &task.recommendees[chunk_start..(chunk_start + SCORE_CHUNK).min(task.recommendees.len())];
        let sel = t_rows.select(Axis(0), chunk);
        let mut scores = sel.dot(&o_rows.t());
        for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
            for (o, s) in row.iter_mut().enumerate() {
                if zero_objects[o] {
                    *s = f64::NEG_INFINITY;
                }
            }
            let slice = row.as_slice().expect("row-major scores");
            out.push(top_k_from_scores(slice, &task.exclusions[chunk_start + i], k));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopKMetrics {
    pub k: usize,
    pub recall: f64,
    pub precision: f64,
    pub ndcg: f64,
    pub f1: f64,
}

#[inline]
fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 2) as f64).log2()
}

/// Macro-averaged metrics over recommendees with non-empty truth. Each
/// truth list must be sorted ascending.
pub fn topk_metrics(rankings: &[Vec<usize>], truth: &[Vec<usize>], k: usize) -> Result<TopKMetrics> {
    if k == 0 {
        return Err(Error::InvalidConfig("K must be at least 1".into()));
    }
    if rankings.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} rankings for {} truth lists",
            rankings.len(),
            truth.len()
        )));
    }
    let (mut recall, mut precision, mut ndcg) = (0.0, 0.0, 0.0);
    let mut counted = 0usize;
    for (ranked, tr) in rankings.iter().zip(truth) {
        if tr.is_empty() {
            continue;
        }
        counted += 1;
        let mut hits = 0usize;
        let mut dcg = 0.0;
        for (i, o) in ranked.iter().take(k).enumerate() {
            if tr.binary_search(o).is_ok() {
                hits += 1;
                dcg += discount(i);
            }
        }
        let idcg: f64 = (0..tr.len().min(k)).map(discount).sum();
        recall += hits as f64 / tr.len() as f64;
        precision += hits as f64 / k as f64;
        ndcg += dcg / idcg;
    }
    if counted == 0 {
        return Err(Error::NoGroundTruth);
    }
    let n = counted as f64;
    let (recall, precision, ndcg) = (recall / n, precision / n, ndcg / n);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(TopKMetrics {
        k,
        recall,
        precision,
        ndcg,
        f1,
    })
}

/// Metrics at each requested cut-off from a single ranking pass.
pub fn evaluate(task: &RankingTask, e: &EmbeddingTable, ks: &[usize], score_fn: ScoreFn) -> Result<Vec<TopKMetrics>> {
    let k_max = ks.iter().copied().max().ok_or_else(|| Error::InvalidConfig("empty K list".into()))?;
    let rankings = rank_top_k(task, e, k_max, score_fn)?;
    ks.iter().map(|&k| topk_metrics(&rankings, &task.truth, k)).collect()
}

/// Pearson correlation; `None` when either series has zero variance or
/// fewer than two points.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let n = x.len();
    if n < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Correlation of per-pair losses with the pair's consistency, its own
/// discrepancy `d(v1, v2)`, and the anchor's total discrepancy mass
/// `Σ_v d(v1, v)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub pairs: usize,
    pub r_c: Option<f64>,
    pub r_d: Option<f64>,
    pub r_d_mass: Option<f64>,
}

/// One scored positive pair with its supervision values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairStat {
    pub anchor: usize,
    pub positive: usize,
    pub c: f64,
    pub d: f64,
    pub d_mass: f64,
    pub loss: f64,
}

/// Joins pairs with their losses and discrepancy values. Pairs without a
/// loss (degenerate anchors) are dropped.
pub fn pair_stats(pairs: &[PositivePair], losses: &[Option<f64>], metrics: &MetricSet) -> Result<Vec<PairStat>> {
    if pairs.len() != losses.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} pairs for {} losses",
            pairs.len(),
            losses.len()
        )));
    }
    let mut out = Vec::with_capacity(pairs.len());
    let mut row = vec![0.0; metrics.joint_size()];
    let mut cached: Option<(usize, f64)> = None;
    for (p, loss) in pairs.iter().zip(losses) {
        let Some(loss) = *loss else { continue };
        let d_mass = match cached {
            Some((a, m)) if a == p.anchor => m,
            _ => {
                metrics.discrepancy_row_into(p.anchor, &mut row);
                row[p.anchor] = 0.0;
                let m = row.iter().sum();
                cached = Some((p.anchor, m));
                m
            }
        };
        out.push(PairStat {
            anchor: p.anchor,
            positive: p.positive,
            c: p.c,
            d: metrics.discrepancy(p.anchor, p.positive),
            d_mass,
            loss,
        });
    }
    Ok(out)
}

pub fn correlation_from_stats(stats: &[PairStat]) -> Result<Correlation> {
    if stats.len() < 3 {
        return Err(Error::InvalidConfig(format!(
            "correlation needs at least 3 scored pairs, got {}",
            stats.len()
        )));
    }
    let col = |f: fn(&PairStat) -> f64| stats.iter().map(f).collect::<Vec<f64>>();
    let l = col(|s| s.loss);
    Ok(Correlation {
        pairs: stats.len(),
        r_c: pearson(&col(|s| s.c), &l),
        r_d: pearson(&col(|s| s.d), &l),
        r_d_mass: pearson(&col(|s| s.d_mass), &l),
    })
}

pub fn correlation_analysis(pairs: &[PositivePair], losses: &[Option<f64>], metrics: &MetricSet) -> Result<Correlation> {
    correlation_from_stats(&pair_stats(pairs, losses, metrics)?)
}

/// Ranking metrics for one labelled run, optionally with a correlation block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub recommendees: usize,
    pub metrics: Vec<TopKMetrics>,
    pub correlation: Option<Correlation>,
    pub config_hash: Option<String>,
}

#[derive(Serialize)]
struct MetricRecord<'a> {
    record: &'static str,
    label: &'a str,
    k: usize,
    recall: f64,
    precision: f64,
    ndcg: f64,
    f1: f64,
    recommendees: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    config_hash: Option<&'a str>,
}

#[derive(Serialize)]
struct CorrelationRecord<'a> {
    record: &'static str,
    label: &'a str,
    #[serde(flatten)]
    correlation: &'a Correlation,
    #[serde(skip_serializing_if = "Option::is_none")]
    config_hash: Option<&'a str>,
}

impl EvalReport {
    pub fn metric(&self, k: usize) -> Option<&TopKMetrics> {
        self.metrics.iter().find(|m| m.k == k)
    }

    /// One JSON object per line: a `topk` record per cut-off, then a
    /// `correlation` record if present. Undefined correlations are `null`.
    pub fn to_jsonl(&self) -> String {
        let hash = self.config_hash.as_deref();
        let mut out = String::new();
        for m in &self.metrics {
            let rec = MetricRecord {
                record: "topk",
                label: &self.label,
                k: m.k,
                recall: m.recall,
                precision: m.precision,
                ndcg: m.ndcg,
                f1: m.f1,
                recommendees: self.recommendees,
                config_hash: hash,
            };
            out.push_str(&serde_json::to_string(&rec).expect("plain record"));
            out.push('\n');
        }
        if let Some(c) = &self.correlation {
            let rec = CorrelationRecord {
                record: "correlation",
                label: &self.label,
                correlation: c,
                config_hash: hash,
            };
            out.push_str(&serde_json::to_string(&rec).expect("plain record"));
            out.push('\n');
        }
        out
    }
}

/// Aligned text table: one row per report, recall and NDCG columns per K
/// followed by precision and F1.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut ks: Vec<usize> = reports.iter().flat_map(|r| r.metrics.iter().map(|m| m.k)).collect();
    ks.sort_unstable();
    ks.dedup();
    let mut header = vec!["run".to_string()];
    for prefix in ["R", "N", "P", "F1"] {
        header.extend(ks.iter().map(|k| format!("{prefix}@{k}")));
    }
    let mut rows = vec![header];
    for r in reports {
        let mut row = vec![r.label.clone()];
        let cell = |k: usize, f: fn(&TopKMetrics) -> f64| r.metric(k).map(|m| format!("{:.4}", f(m))).unwrap_or_else(|| "-".into());
        for f in [
            (|m: &TopKMetrics| m.recall) as fn(&TopKMetrics) -> f64,
            |m| m.ndcg,
            |m| m.precision,
            |m| m.f1,
        ] {
            row.extend(ks.iter().map(|&k| cell(k, f)));
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(j, c)| if j == 0 { format!("{c:<w$}", w = widths[j]) } else { format!("{c:>w$}", w = widths[j]) })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        if i == 0 {
            let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NodeKind;
    use crate::model::embedding::EmbeddingRole;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn table(rows: Array2<f64>) -> EmbeddingTable {
        let d = rows.ncols();
        EmbeddingTable::new(rows, EmbeddingRole::Pretrain, d).unwrap()
    }

    #[test]
    fn identical_objects_rank_by_id() {
        let e = table(array![[1.0, 0.0], [0.3, 0.3], [0.3, 0.3], [0.3, 0.3]]);
        assert_eq!(rank(0, &e, 1, &[], 3, ScoreFn::Cosine), vec![0, 1, 2]);
    }

    #[test]
    fn collinear_object_ranks_first_and_scaling_keeps_order() {
        let mut e = table(array![[1.0, 2.0], [2.0, -1.0], [0.5, 1.0], [-2.0, 1.0]]);
        assert_eq!(rank(0, &e, 1, &[], 3, ScoreFn::Cosine)[0], 1);
        let before = rank(0, &e, 1, &[], 3, ScoreFn::Cosine);
        e.scale(3.0);
        assert_eq!(rank(0, &e, 1, &[], 3, ScoreFn::Cosine), before);
    }

    #[test]
    fn zero_object_is_ranked_last() {
        let e = table(array![[1.0, 0.0], [0.0, 0.0], [-1.0, 0.0]]);
        assert_eq!(rank(0, &e, 1, &[], 2, ScoreFn::Cosine), vec![1, 0]);
    }

    #[test]
    fn ndcg_examples() {
        let truth = vec![vec![7]];
        let m = topk_metrics(&[vec![7, 1, 2]], &truth, 10).unwrap();
        assert_eq!(m.ndcg, 1.0);
        let m = topk_metrics(&[vec![1, 7, 2]], &truth, 10).unwrap();
        assert_abs_diff_eq!(m.ndcg, 1.0 / 3f64.log2(), epsilon = 1e-15);
        assert_abs_diff_eq!(m.ndcg, 0.63093, epsilon = 1e-5);
    }

    #[test]
    fn recall_half_and_f1() {
        let m = topk_metrics(&[vec![3, 9]], &[vec![3, 4]], 2).unwrap();
        assert_eq!(m.recall, 0.5);
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.f1, 0.5);
        let zero = topk_metrics(&[vec![1]], &[vec![2]], 1).unwrap();
        assert_eq!(zero.f1, 0.0);
    }

    #[test]
    fn empty_truth_everywhere_is_an_error() {
        assert!(matches!(topk_metrics(&[vec![1]], &[vec![]], 5), Err(Error::NoGroundTruth)));
        assert!(topk_metrics(&[vec![1]], &[vec![1]], 0).is_err());
    }

    #[test]
    fn task_excludes_train_positives() {
        let train = Relation::from_edges(NodeKind::Tuple, NodeKind::Object, 2, 3, [(0, 0), (1, 2)]).unwrap();
        let test = Relation::from_edges(NodeKind::Tuple, NodeKind::Object, 2, 3, [(0, 1)]).unwrap();
        let task = RankingTask::new(&test, &[&train]).unwrap();
        assert_eq!(task.recommendees(), &[0]);
        // object 0 is the most similar to tuple 0 but is a train positive
        let e = table(array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.9, 0.1], [0.0, 1.0]]);
        let ranked = rank_top_k(&task, &e, 3, ScoreFn::Cosine).unwrap();
        assert_eq!(ranked, vec![vec![1, 2]]);
    }

    #[test]
    fn task_without_truth_is_an_error() {
        let empty = Relation::empty(NodeKind::Tuple, NodeKind::Object, 2, 2);
        assert!(matches!(RankingTask::new(&empty, &[]), Err(Error::NoGroundTruth)));
    }

    #[test]
    fn batched_ranking_matches_single_ranking() {
        let e = crate::model::embedding::init_embeddings(600, 6, 5).unwrap();
        let n_t = 300;
        let edges: Vec<(usize, usize)> = (0..n_t).map(|t| (t, (t * 7) % 300)).collect();
        let truth = Relation::from_edges(NodeKind::Tuple, NodeKind::Object, n_t, 300, edges).unwrap();
        let task = RankingTask::new(&truth, &[]).unwrap();
        let batched = rank_top_k(&task, &e, 20, ScoreFn::Cosine).unwrap();
        for (i, &t) in task.recommendees().iter().enumerate().step_by(37) {
            assert_eq!(batched[i], rank(t, &e, n_t, &[], 20, ScoreFn::Cosine));
        }
    }

    #[test]
    fn pearson_cases() {
        let c = [0.1, 0.5, 0.9, 2.0];
        let loss: Vec<f64> = c.iter().map(|x| -x).collect();
        assert_abs_diff_eq!(pearson(&c, &loss).unwrap(), -1.0, epsilon = 1e-12);
        assert_eq!(pearson(&c, &[1.0; 4]), None);
    }

    #[test]
    fn jsonl_and_table_layout() {
        let report = EvalReport {
            label: "CDR".into(),
            recommendees: 3,
            metrics: DEFAULT_KS
                .iter()
                .map(|&k| TopKMetrics { k, recall: 0.5, precision: 0.1, ndcg: 0.25, f1: 0.2 })
                .collect(),
            correlation: Some(Correlation { pairs: 5, r_c: Some(-0.4), r_d: None, r_d_mass: Some(0.3) }),
            config_hash: Some("abc".into()),
        };
        let jsonl = report.to_jsonl();
        let lines: Vec<serde_json::Value> = jsonl.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1]["k"], 20);
        assert_eq!(lines[3]["r_d"], serde_json::Value::Null);
        assert_eq!(lines[3]["config_hash"], "abc");
        let table = render_table(&[report]);
        let header = table.lines().next().unwrap();
        assert!(header.starts_with("run"));
        assert!(header.contains("R@10") && header.contains("N@30"));
        assert!(table.lines().nth(2).unwrap().starts_with("CDR"));
    }
}
