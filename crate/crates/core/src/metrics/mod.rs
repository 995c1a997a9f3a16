//! Consistency and discrepancy metrics between tuples and objects.
//!
//! For a pair `(v1, v2)` linked through midpoints `m`:
//!
//! ```text
//! δ(m, v)   = (1 / deg_m) · sqrt((deg_m + 1) / (deg_v + 1))
//! c(v1, v2) = Σ_{m ∈ N(v1) ∩ N(v2)} δ(m, v2)
//! d(v1, v2) = Σ_{m ∉ N(v1), m ∈ N(v2)} δ(m, v2) = S(v2) − c(v1, v2)
//! S(v2)     = Σ_{m ∈ N(v2)} δ(m, v2)
//! ```
//!
//! Two-hop discrepancy is never materialised: each block keeps its sparse
//! consistency matrix and the column sums `S`. Every `c(v1, v2)` is
//! accumulated over midpoints in ascending index order, the same order used
//! for `S(v2)`, so `d` is exactly zero whenever `N(v2) ⊆ N(v1)` and never
//! negative otherwise.
//!
//! One-hop tuple/object blocks use `δ(t, o) = a_t · b_o` with
//! `a_t = sqrt(deg_t + 1) / deg_t` and `b_o = 1 / sqrt(deg_o + 1)`; the
//! discrepancy over all pairs is stored as the two factor vectors.

pub mod export;
pub mod oracle;

pub use export::{export_metrics, export_metrics_stamped, import_metrics};
pub use oracle::{bruteforce_metrics, DenseMetrics, DEFAULT_ORACLE_CAP};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DegreeRegime, DegreeTable, NodeKind, Relation, TripartiteGraph};

/// Degree-derived path weight. Zero when the midpoint has no edges.
#[inline]
pub fn delta(deg_mid: usize, deg_end: usize) -> f64 {
    if deg_mid == 0 {
        return 0.0;
    }
    let m = deg_mid as f64;
    (1.0 / m) * ((m + 1.0) / (deg_end as f64 + 1.0)).sqrt()
}

/// First factor of the one-hop weight, `sqrt(deg + 1) / deg`.
#[inline]
pub fn one_hop_source_factor(deg: usize) -> f64 {
    if deg == 0 {
        0.0
    } else {
        (deg as f64 + 1.0).sqrt() / deg as f64
    }
}

/// Second factor of the one-hop weight, `1 / sqrt(deg + 1)`.
#[inline]
pub fn one_hop_target_factor(deg: usize) -> f64 {
    1.0 / (deg as f64 + 1.0).sqrt()
}

/// Meta-path schema of a metric block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Schema {
    Tmt,
    Tmo,
    Omt,
    Omo,
    Tot,
    To,
    Ot,
    Oto,
}

/// Letters used to spell meta-paths for a concrete scenario, e.g. groups,
/// users and items for group recommendation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoleLetters {
    pub tuple: char,
    pub member: char,
    pub object: char,
}

impl RoleLetters {
    pub const GROUP: RoleLetters = RoleLetters {
        tuple: 'G',
        member: 'U',
        object: 'I',
    };
    pub const BUNDLE: RoleLetters = RoleLetters {
        tuple: 'B',
        member: 'I',
        object: 'U',
    };
}

impl Schema {
    pub const ALL: [Schema; 8] = [
        Schema::Tmt,
        Schema::Tmo,
        Schema::Omt,
        Schema::Omo,
        Schema::Tot,
        Schema::To,
        Schema::Ot,
        Schema::Oto,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Schema::Tmt => "TMT",
            Schema::Tmo => "TMO",
            Schema::Omt => "OMT",
            Schema::Omo => "OMO",
            Schema::Tot => "TOT",
            Schema::To => "TO",
            Schema::Ot => "OT",
            Schema::Oto => "OTO",
        }
    }

    pub fn from_label(label: &str) -> Option<Schema> {
        Schema::ALL.into_iter().find(|s| s.label() == label)
    }

    fn kind_of(letter: char) -> NodeKind {
        match letter {
            'T' => NodeKind::Tuple,
            'M' => NodeKind::Member,
            _ => NodeKind::Object,
        }
    }

    pub fn src_kind(self) -> NodeKind {
        Self::kind_of(self.label().chars().next().unwrap())
    }

    pub fn dst_kind(self) -> NodeKind {
        Self::kind_of(self.label().chars().last().unwrap())
    }

    /// Midpoint kind, or `None` for the direct one-hop blocks.
    pub fn mid_kind(self) -> Option<NodeKind> {
        let l = self.label();
        (l.len() == 3).then(|| Self::kind_of(l.chars().nth(1).unwrap()))
    }

    pub fn is_one_hop(self) -> bool {
        self.mid_kind().is_none()
    }

    /// Spells the schema with scenario letters (`TMO` → `GUI` for groups).
    pub fn spelled(self, roles: RoleLetters) -> String {
        self.label()
            .chars()
            .map(|c| match c {
                'T' => roles.tuple,
                'M' => roles.member,
                _ => roles.object,
            })
            .collect()
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Compressed sparse row matrix of non-negative reals.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        SparseMatrix {
            rows,
            cols,
            offsets: vec![0; rows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds from `(row, col, value)` triples sorted by row then column.
    pub(crate) fn from_sorted_triples(rows: usize, cols: usize, triples: &[(usize, usize, f64)]) -> Self {
        let mut offsets = vec![0usize; rows + 1];
        for &(r, _, _) in triples {
            offsets[r + 1] += 1;
        }
        for i in 0..rows {
            offsets[i + 1] += offsets[i];
        }
        SparseMatrix {
            rows,
            cols,
            offsets,
            indices: triples.iter().map(|t| t.1).collect(),
            values: triples.iter().map(|t| t.2).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.offsets[r]..self.offsets[r + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (idx, vals) = self.row(r);
        idx.binary_search(&c).map(|i| vals[i]).unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| {
            let (idx, vals) = self.row(r);
            idx.iter().zip(vals).map(move |(&c, &v)| (r, c, v))
        })
    }
}

/// How a block stores its discrepancy values.
#[derive(Clone, Debug, PartialEq)]
pub enum Discrepancy {
    /// Two-hop: `d(r, c) = colsum[c] − C(r, c)`.
    Colsum(Vec<f64>),
    /// One-hop: `d(r, c) = source[r] · target[c]`.
    RankOne { source: Vec<f64>, target: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricBlock {
    pub schema: Schema,
    pub consistency: SparseMatrix,
    pub discrepancy: Discrepancy,
}

impl MetricBlock {
    pub fn consistency(&self, row: usize, col: usize) -> f64 {
        self.consistency.get(row, col)
    }

    pub fn discrepancy(&self, row: usize, col: usize) -> f64 {
        match &self.discrepancy {
            Discrepancy::Colsum(s) => s[col] - self.consistency.get(row, col),
            Discrepancy::RankOne { source, target } => source[row] * target[col],
        }
    }

    pub fn colsum(&self) -> Option<&[f64]> {
        match &self.discrepancy {
            Discrepancy::Colsum(s) => Some(s),
            Discrepancy::RankOne { .. } => None,
        }
    }

    /// Writes the discrepancy row into `out` (length = block columns).
    pub fn discrepancy_row_into(&self, row: usize, out: &mut [f64]) {
        match &self.discrepancy {
            Discrepancy::Colsum(s) => {
                out.copy_from_slice(s);
                let (idx, vals) = self.consistency.row(row);
                for (&c, &v) in idx.iter().zip(vals) {
                    out[c] = s[c] - v;
                }
            }
            Discrepancy::RankOne { source, target } => {
                let a = source[row];
                for (o, &b) in out.iter_mut().zip(target) {
                    *o = a * b;
                }
            }
        }
    }
}

/// Which metric family a set belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Member-mediated metrics from `X` and `Z`.
    Pretrain,
    /// Tuple-interaction metrics from `Y`.
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }

    pub fn schemas(self) -> [Schema; 4] {
        match self {
            Stage::Pretrain => [Schema::Tmt, Schema::Tmo, Schema::Omt, Schema::Omo],
            Stage::Finetune => [Schema::Tot, Schema::To, Schema::Ot, Schema::Oto],
        }
    }
}

/// The four blocks of one stage over the joint tuple ∪ object index space.
/// Joint index `v < n_tuples` is tuple `v`; otherwise object `v - n_tuples`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricSet {
    pub stage: Stage,
    pub n_tuples: usize,
    pub n_objects: usize,
    /// Ordered tuple→tuple, tuple→object, object→tuple, object→object.
    pub blocks: [MetricBlock; 4],
}

impl MetricSet {
    pub fn joint_size(&self) -> usize {
        self.n_tuples + self.n_objects
    }

    /// Splits a joint index into (kind, per-kind index).
    #[inline]
    pub fn locate(&self, v: usize) -> (NodeKind, usize) {
        if v < self.n_tuples {
            (NodeKind::Tuple, v)
        } else {
            (NodeKind::Object, v - self.n_tuples)
        }
    }

    #[inline]
    fn block_index(src: NodeKind, dst: NodeKind) -> usize {
        match (src, dst) {
            (NodeKind::Tuple, NodeKind::Tuple) => 0,
            (NodeKind::Tuple, _) => 1,
            (_, NodeKind::Tuple) => 2,
            _ => 3,
        }
    }

    pub fn block(&self, schema: Schema) -> Option<&MetricBlock> {
        self.blocks.iter().find(|b| b.schema == schema)
    }

    pub fn consistency(&self, v1: usize, v2: usize) -> f64 {
        let (k1, i1) = self.locate(v1);
        let (k2, i2) = self.locate(v2);
        self.blocks[Self::block_index(k1, k2)].consistency(i1, i2)
    }

    pub fn discrepancy(&self, v1: usize, v2: usize) -> f64 {
        let (k1, i1) = self.locate(v1);
        let (k2, i2) = self.locate(v2);
        self.blocks[Self::block_index(k1, k2)].discrepancy(i1, i2)
    }

    fn row_blocks(&self, kind: NodeKind) -> (&MetricBlock, &MetricBlock) {
        match kind {
            NodeKind::Tuple => (&self.blocks[0], &self.blocks[1]),
            _ => (&self.blocks[2], &self.blocks[3]),
        }
    }

    /// Non-zero consistencies of `v1` as `(joint column, c)` in ascending
    /// column order.
    pub fn consistency_row(&self, v1: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (kind, i) = self.locate(v1);
        let (to_tuples, to_objects) = self.row_blocks(kind);
        let offset = self.n_tuples;
        let (ti, tv) = to_tuples.consistency.row(i);
        let (oi, ov) = to_objects.consistency.row(i);
        ti.iter()
            .zip(tv)
            .map(|(&c, &v)| (c, v))
            .chain(oi.iter().zip(ov).map(move |(&c, &v)| (c + offset, v)))
    }

    /// Fills `out` (length = joint size) with `d(v1, ·)`.
    pub fn discrepancy_row_into(&self, v1: usize, out: &mut [f64]) {
        let (kind, i) = self.locate(v1);
        let (to_tuples, to_objects) = self.row_blocks(kind);
        let (left, right) = out.split_at_mut(self.n_tuples);
        to_tuples.discrepancy_row_into(i, left);
        to_objects.discrepancy_row_into(i, right);
    }

    /// All `(v1, v2, c)` with `c > 0` and `v1 != v2`, sorted by `(v1, v2)`.
    pub fn positive_pairs(&self) -> Vec<(usize, usize, f64)> {
        let mut pairs = Vec::new();
        for v1 in 0..self.joint_size() {
            for (v2, c) in self.consistency_row(v1) {
                if v2 != v1 && c > 0.0 {
                    pairs.push((v1, v2, c));
                }
            }
        }
        pairs
    }

    pub fn nnz(&self) -> usize {
        self.blocks.iter().map(|b| b.consistency.nnz()).sum()
    }

    /// Dense `(c, d)` expansion for testing against the oracle.
    pub fn to_dense(&self) -> DenseMetrics {
        let n = self.joint_size();
        let mut c = vec![0.0; n * n];
        let mut d = vec![0.0; n * n];
        for v1 in 0..n {
            self.discrepancy_row_into(v1, &mut d[v1 * n..(v1 + 1) * n]);
            for (v2, val) in self.consistency_row(v1) {
                c[v1 * n + v2] = val;
            }
        }
        DenseMetrics {
            stage: self.stage,
            n_tuples: self.n_tuples,
            n_objects: self.n_objects,
            consistency: c,
            discrepancy: d,
        }
    }
}

fn expected_regime(mid: NodeKind) -> DegreeRegime {
    match mid {
        NodeKind::Member => DegreeRegime::Pretrain,
        _ => DegreeRegime::Finetune,
    }
}

fn check_regime(degrees: &DegreeTable, mid: NodeKind) -> Result<()> {
    let expected = expected_regime(mid);
    if degrees.regime != expected {
        return Err(Error::RegimeMismatch {
            expected: expected.name(),
            found: degrees.regime.name(),
        });
    }
    Ok(())
}

/// Two-hop consistency `C(v1, v2) = Σ_{m ∈ N(v1) ∩ N(v2)} δ(m, v2)`.
///
/// Walks `v1 → m → v2` through the two adjacency lists, visiting midpoints
/// of `v1` in ascending order, so each entry is accumulated in sorted
/// midpoint order. Only pairs with a common midpoint get an entry.
pub fn build_consistency(
    src_to_mid: &Relation,
    mid_to_dst: &Relation,
    degrees: &DegreeTable,
) -> Result<SparseMatrix> {
    if src_to_mid.dst_kind() != mid_to_dst.src_kind() {
        return Err(Error::KindMismatch {
            expected: (src_to_mid.dst_kind(), mid_to_dst.dst_kind()),
            found: mid_to_dst.kinds(),
        });
    }
    let mid_kind = mid_to_dst.src_kind();
    check_regime(degrees, mid_kind)?;
    let mid_deg = degrees.of(mid_kind);
    let dst_deg = degrees.of(mid_to_dst.dst_kind());

    let n_dst = mid_to_dst.dst_count();
    let mut acc = vec![0.0f64; n_dst];
    let mut seen = vec![false; n_dst];
    let mut touched: Vec<usize> = Vec::new();
    let mut triples = Vec::new();
    for v1 in 0..src_to_mid.src_count() {
        for &m in src_to_mid.row(v1) {
            let dm = mid_deg[m];
            for &v2 in mid_to_dst.row(m) {
                if !seen[v2] {
                    seen[v2] = true;
                    touched.push(v2);
                }
                acc[v2] += delta(dm, dst_deg[v2]);
            }
        }
        touched.sort_unstable();
        for &v2 in &touched {
            triples.push((v1, v2, acc[v2]));
            acc[v2] = 0.0;
            seen[v2] = false;
        }
        touched.clear();
    }
    Ok(SparseMatrix::from_sorted_triples(
        src_to_mid.src_count(),
        n_dst,
        &triples,
    ))
}

/// Column sums `S(v2) = Σ_{m ∈ N(v2)} δ(m, v2)` for the endpoint kind of
/// `dst_to_mid`.
pub fn build_colsums(dst_to_mid: &Relation, degrees: &DegreeTable) -> Result<Vec<f64>> {
    let mid_kind = dst_to_mid.dst_kind();
    check_regime(degrees, mid_kind)?;
    let mid_deg = degrees.of(mid_kind);
    let dst_deg = degrees.of(dst_to_mid.src_kind());
    Ok((0..dst_to_mid.src_count())
        .map(|v2| {
            dst_to_mid
                .row(v2)
                .iter()
                .fold(0.0, |s, &m| s + delta(mid_deg[m], dst_deg[v2]))
        })
        .collect())
}

fn two_hop_block(
    schema: Schema,
    src_to_mid: &Relation,
    mid_to_dst: &Relation,
    dst_to_mid: &Relation,
    degrees: &DegreeTable,
) -> Result<MetricBlock> {
    Ok(MetricBlock {
        schema,
        consistency: build_consistency(src_to_mid, mid_to_dst, degrees)?,
        discrepancy: Discrepancy::Colsum(build_colsums(dst_to_mid, degrees)?),
    })
}

/// Member-mediated blocks TMT, TMO, OMT, OMO.
pub fn build_member_metrics(graph: &TripartiteGraph) -> Result<MetricSet> {
    if graph.x().is_empty() {
        return Err(Error::EmptyRelation("member interactions (X)"));
    }
    if graph.z().is_empty() {
        return Err(Error::EmptyRelation("affiliations (Z)"));
    }
    let deg = graph.degree_table(DegreeRegime::Pretrain);
    let (z, z_t, x, x_t) = (graph.z(), graph.z_transpose(), graph.x(), graph.x_transpose());
    Ok(MetricSet {
        stage: Stage::Pretrain,
        n_tuples: graph.n_tuples(),
        n_objects: graph.n_objects(),
        blocks: [
            two_hop_block(Schema::Tmt, z, z_t, z, deg)?,
            two_hop_block(Schema::Tmo, z, x, x_t, deg)?,
            two_hop_block(Schema::Omt, x_t, z_t, z, deg)?,
            two_hop_block(Schema::Omo, x_t, x, x_t, deg)?,
        ],
    })
}

fn one_hop_block(schema: Schema, rel: &Relation, src_deg: &[usize], dst_deg: &[usize]) -> MetricBlock {
    let source: Vec<f64> = src_deg.iter().map(|&d| one_hop_source_factor(d)).collect();
    let target: Vec<f64> = dst_deg.iter().map(|&d| one_hop_target_factor(d)).collect();
    let triples: Vec<(usize, usize, f64)> = rel
        .edges()
        .filter(|&(s, _)| source[s] > 0.0)
        .map(|(s, d)| (s, d, source[s] * target[d]))
        .collect();
    MetricBlock {
        schema,
        consistency: SparseMatrix::from_sorted_triples(rel.src_count(), rel.dst_count(), &triples),
        discrepancy: Discrepancy::RankOne { source, target },
    }
}

/// Tuple-interaction blocks TOT, TO, OT, OTO from the training split.
pub fn build_tuple_metrics(y_train: &Relation) -> Result<MetricSet> {
    if y_train.kinds() != (NodeKind::Tuple, NodeKind::Object) {
        return Err(Error::KindMismatch {
            expected: (NodeKind::Tuple, NodeKind::Object),
            found: y_train.kinds(),
        });
    }
    if y_train.is_empty() {
        return Err(Error::EmptyRelation("tuple interactions (Y)"));
    }
    let y = y_train;
    let y_t = y.transpose();
    let deg = DegreeTable {
        regime: DegreeRegime::Finetune,
        tuples: (0..y.src_count()).map(|t| y.degree(t)).collect(),
        members: Vec::new(),
        objects: (0..y_t.src_count()).map(|o| y_t.degree(o)).collect(),
    };
    Ok(MetricSet {
        stage: Stage::Finetune,
        n_tuples: y.src_count(),
        n_objects: y.dst_count(),
        blocks: [
            two_hop_block(Schema::Tot, y, &y_t, y, &deg)?,
            one_hop_block(Schema::To, y, &deg.tuples, &deg.objects),
            one_hop_block(Schema::Ot, &y_t, &deg.objects, &deg.tuples),
            two_hop_block(Schema::Oto, &y_t, y, &y_t, &deg)?,
        ],
    })
}
