//! Tripartite graph storage: tuples, members and objects joined by three
//! binary relations.
//!
//! | relation | source | target | meaning                     |
//! |----------|--------|--------|-----------------------------|
//! | `Y`      | tuple  | object | tuple interactions          |
//! | `X`      | member | object | member interactions         |
//! | `Z`      | tuple  | member | tuple-member affiliations   |
//!
//! Every relation is kept as a compressed row list with sorted, duplicate-free
//! targets, and its transpose is cached at build time.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeKind {
    Tuple,
    Member,
    Object,
}

impl NodeKind {
    pub fn name(self) -> &'static str {
        match self {
            NodeKind::Tuple => "tuple",
            NodeKind::Member => "member",
            NodeKind::Object => "object",
        }
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Sizes of the three node universes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UniverseCounts {
    pub tuples: usize,
    pub members: usize,
    pub objects: usize,
}

impl UniverseCounts {
    pub fn of(&self, kind: NodeKind) -> usize {
        match kind {
            NodeKind::Tuple => self.tuples,
            NodeKind::Member => self.members,
            NodeKind::Object => self.objects,
        }
    }

    /// Renders the `#counts` header record.
    pub fn header(&self) -> String {
        format!("#counts {} {} {}", self.tuples, self.members, self.objects)
    }

    /// Parses a `#counts <tuples> <members> <objects>` record. Returns `None`
    /// when the line is not a counts record at all.
    pub fn parse_header(line: &str) -> Option<std::result::Result<Self, String>> {
        let rest = line.trim().strip_prefix("#counts")?;
        let fields: Vec<&str> = rest.split_whitespace().collect();
        if fields.len() != 3 {
            return Some(Err(format!(
                "#counts record needs 3 fields, found {}",
                fields.len()
            )));
        }
        let mut parsed = [0usize; 3];
        for (slot, field) in parsed.iter_mut().zip(&fields) {
            match field.parse::<usize>() {
                Ok(v) => *slot = v,
                Err(_) => return Some(Err(format!("invalid count {field:?}"))),
            }
        }
        Some(Ok(UniverseCounts {
            tuples: parsed[0],
            members: parsed[1],
            objects: parsed[2],
        }))
    }
}

/// A sparse binary relation between two node kinds in compressed row form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Relation {
    src_kind: NodeKind,
    dst_kind: NodeKind,
    src_count: usize,
    dst_count: usize,
    offsets: Vec<usize>,
    targets: Vec<usize>,
    declared: bool,
}

impl Relation {
    pub fn empty(src_kind: NodeKind, dst_kind: NodeKind, src_count: usize, dst_count: usize) -> Self {
        Relation {
            src_kind,
            dst_kind,
            src_count,
            dst_count,
            offsets: vec![0; src_count + 1],
            targets: Vec::new(),
            declared: true,
        }
    }

    /// Builds a relation with declared universe sizes. Duplicate edges are
    /// collapsed; out-of-range endpoints are rejected.
    pub fn from_edges<I>(
        src_kind: NodeKind,
        dst_kind: NodeKind,
        src_count: usize,
        dst_count: usize,
        edges: I,
    ) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut edges: Vec<(usize, usize)> = edges.into_iter().collect();
        for &(s, d) in &edges {
            if s >= src_count {
                return Err(Error::IndexOutOfRange {
                    kind: src_kind,
                    index: s,
                    count: src_count,
                });
            }
            if d >= dst_count {
                return Err(Error::IndexOutOfRange {
                    kind: dst_kind,
                    index: d,
                    count: dst_count,
                });
            }
        }
        edges.sort_unstable();
        edges.dedup();
        Ok(Self::from_sorted_unique(src_kind, dst_kind, src_count, dst_count, &edges, true))
    }

    fn from_sorted_unique(
        src_kind: NodeKind,
        dst_kind: NodeKind,
        src_count: usize,
        dst_count: usize,
        edges: &[(usize, usize)],
        declared: bool,
    ) -> Self {
        let mut offsets = vec![0usize; src_count + 1];
        for &(s, _) in edges {
            offsets[s + 1] += 1;
        }
        for i in 0..src_count {
            offsets[i + 1] += offsets[i];
        }
        let targets = edges.iter().map(|&(_, d)| d).collect();
        Relation {
            src_kind,
            dst_kind,
            src_count,
            dst_count,
            offsets,
            targets,
            declared,
        }
    }

    pub fn src_kind(&self) -> NodeKind {
        self.src_kind
    }

    pub fn dst_kind(&self) -> NodeKind {
        self.dst_kind
    }

    pub fn kinds(&self) -> (NodeKind, NodeKind) {
        (self.src_kind, self.dst_kind)
    }

    pub fn src_count(&self) -> usize {
        self.src_count
    }

    pub fn dst_count(&self) -> usize {
        self.dst_count
    }

    /// Whether the universe sizes came from a declaration (header record or
    /// explicit constructor) rather than from the largest observed index.
    pub fn counts_declared(&self) -> bool {
        self.declared
    }

    pub fn edge_count(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Sorted targets of `src`.
    #[inline]
    pub fn row(&self, src: usize) -> &[usize] {
        &self.targets[self.offsets[src]..self.offsets[src + 1]]
    }

    #[inline]
    pub fn degree(&self, src: usize) -> usize {
        self.offsets[src + 1] - self.offsets[src]
    }

    pub fn contains(&self, src: usize, dst: usize) -> bool {
        src < self.src_count && self.row(src).binary_search(&dst).is_ok()
    }

    /// Edges in (source, target) lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.src_count).flat_map(move |s| self.row(s).iter().map(move |&d| (s, d)))
    }

    pub fn transpose(&self) -> Relation {
        let mut offsets = vec![0usize; self.dst_count + 1];
        for &d in &self.targets {
            offsets[d + 1] += 1;
        }
        for i in 0..self.dst_count {
            offsets[i + 1] += offsets[i];
        }
        let mut cursor = offsets.clone();
        let mut targets = vec![0usize; self.targets.len()];
        // Sources are visited in ascending order, so every transposed row
        // comes out sorted.
        for s in 0..self.src_count {
            for &d in self.row(s) {
                targets[cursor[d]] = s;
                cursor[d] += 1;
            }
        }
        Relation {
            src_kind: self.dst_kind,
            dst_kind: self.src_kind,
            src_count: self.dst_count,
            dst_count: self.src_count,
            offsets,
            targets,
            declared: self.declared,
        }
    }

    /// Grows the universes to the given sizes. Shrinking below an existing
    /// endpoint is an error.
    pub fn resized(&self, src_count: usize, dst_count: usize) -> Result<Relation> {
        let max_src = (0..self.src_count).rev().find(|&s| self.degree(s) > 0);
        if let Some(s) = max_src {
            if s >= src_count {
                return Err(Error::IndexOutOfRange {
                    kind: self.src_kind,
                    index: s,
                    count: src_count,
                });
            }
        }
        if let Some(&d) = self.targets.iter().max() {
            if d >= dst_count {
                return Err(Error::IndexOutOfRange {
                    kind: self.dst_kind,
                    index: d,
                    count: dst_count,
                });
            }
        }
        let edges: Vec<(usize, usize)> = self.edges().collect();
        Ok(Self::from_sorted_unique(
            self.src_kind,
            self.dst_kind,
            src_count,
            dst_count,
            &edges,
            self.declared,
        ))
    }

    fn with_declared(mut self, declared: bool) -> Self {
        self.declared = declared;
        self
    }
}

/// Result of reading an edge-list file.
#[derive(Clone, Debug)]
pub struct LoadedRelation {
    pub relation: Relation,
    /// Number of repeated edge lines collapsed by deduplication.
    pub duplicates: usize,
    /// Set when the file held no edges at all.
    pub empty: bool,
    pub header: Option<UniverseCounts>,
}

/// Reads a tab-separated edge list. Blank lines and `#` comments are skipped;
/// a `#counts` record fixes the universe sizes, otherwise they are inferred as
/// largest index + 1.
pub fn load_relation(path: &Path, expected: (NodeKind, NodeKind)) -> Result<LoadedRelation> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut header = None;
    let mut edges = Vec::new();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.starts_with('#') {
            if let Some(parsed) = UniverseCounts::parse_header(trimmed) {
                header = Some(parsed.map_err(|m| parse_err(lineno, m))?);
            }
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(parse_err(
                lineno,
                format!("expected 2 fields, found {}", fields.len()),
            ));
        }
        let id = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| parse_err(lineno, format!("negative or non-integer id {s:?}")))
        };
        edges.push((id(fields[0])?, id(fields[1])?));
    }

    let raw = edges.len();
    edges.sort_unstable();
    edges.dedup();
    let duplicates = raw - edges.len();

    let (src_kind, dst_kind) = expected;
    let inferred_src = edges.iter().map(|&(s, _)| s + 1).max().unwrap_or(0);
    let inferred_dst = edges.iter().map(|&(_, d)| d + 1).max().unwrap_or(0);
    let relation = match header {
        Some(counts) => {
            let (src_count, dst_count) = (counts.of(src_kind), counts.of(dst_kind));
            if inferred_src > src_count || inferred_dst > dst_count {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: 0,
                    message: format!(
                        "edge endpoint exceeds #counts ({inferred_src}x{inferred_dst} > {src_count}x{dst_count})"
                    ),
                });
            }
            Relation::from_sorted_unique(src_kind, dst_kind, src_count, dst_count, &edges, true)
        }
        None => Relation::from_sorted_unique(
            src_kind,
            dst_kind,
            inferred_src,
            inferred_dst,
            &edges,
            false,
        ),
    };
    if relation.is_empty() {
        log::warn!("{}: no edges", path.display());
    }
    Ok(LoadedRelation {
        empty: relation.is_empty(),
        relation,
        duplicates,
        header,
    })
}

/// Loads the three edge files and assembles the graph. A missing `y`
/// path is the extreme cold-start case.
pub fn load_graph(y: Option<&Path>, x: &Path, z: &Path) -> Result<TripartiteGraph> {
    let y = match y {
        Some(p) => Some(load_relation(p, (NodeKind::Tuple, NodeKind::Object))?.relation),
        None => None,
    };
    let x = load_relation(x, (NodeKind::Member, NodeKind::Object))?.relation;
    let z = load_relation(z, (NodeKind::Tuple, NodeKind::Member))?.relation;
    build_graph(y, x, z)
}

/// Writes a relation as a tab-separated edge list, optionally preceded by a
/// `#counts` record.
pub fn write_relation(relation: &Relation, path: &Path, header: Option<UniverseCounts>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    if let Some(h) = header {
        writeln!(out, "{}", h.header()).map_err(io)?;
    }
    for (s, d) in relation.edges() {
        writeln!(out, "{s}\t{d}").map_err(io)?;
    }
    out.flush().map_err(io)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DegreeRegime {
    /// Degrees over member interactions and affiliations (`X ∪ Z`).
    Pretrain,
    /// Degrees over tuple interactions (`Y`).
    Finetune,
}

impl DegreeRegime {
    pub fn name(self) -> &'static str {
        match self {
            DegreeRegime::Pretrain => "pretrain",
            DegreeRegime::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DegreeTable {
    pub regime: DegreeRegime,
    pub tuples: Vec<usize>,
    pub members: Vec<usize>,
    pub objects: Vec<usize>,
}

impl DegreeTable {
    pub fn of(&self, kind: NodeKind) -> &[usize] {
        match kind {
            NodeKind::Tuple => &self.tuples,
            NodeKind::Member => &self.members,
            NodeKind::Object => &self.objects,
        }
    }

    pub fn get(&self, kind: NodeKind, index: usize) -> usize {
        self.of(kind)[index]
    }

    pub fn total(&self) -> usize {
        self.tuples.iter().chain(&self.members).chain(&self.objects).sum()
    }
}

/// The tuple/member/object graph with cached transposes and degree tables.
#[derive(Clone, Debug)]
pub struct TripartiteGraph {
    counts: UniverseCounts,
    y: Relation,
    x: Relation,
    z: Relation,
    y_t: Relation,
    x_t: Relation,
    z_t: Relation,
    pretrain_degrees: DegreeTable,
    finetune_degrees: DegreeTable,
}

struct CountClaim {
    count: usize,
    declared: bool,
    source: &'static str,
}

fn reconcile(kind: NodeKind, claims: &[CountClaim]) -> Result<usize> {
    let declared: Vec<&CountClaim> = claims.iter().filter(|c| c.declared).collect();
    if let Some(first) = declared.first() {
        for other in &declared[1..] {
            if other.count != first.count {
                return Err(Error::CountMismatch {
                    kind,
                    left: first.count,
                    left_source: first.source,
                    right: other.count,
                    right_source: other.source,
                });
            }
        }
        for c in claims.iter().filter(|c| !c.declared) {
            if c.count > first.count {
                return Err(Error::CountMismatch {
                    kind,
                    left: first.count,
                    left_source: first.source,
                    right: c.count,
                    right_source: c.source,
                });
            }
        }
        Ok(first.count)
    } else {
        Ok(claims.iter().map(|c| c.count).max().unwrap_or(0))
    }
}

fn check_kinds(relation: &Relation, expected: (NodeKind, NodeKind)) -> Result<()> {
    if relation.kinds() != expected {
        return Err(Error::KindMismatch {
            expected,
            found: relation.kinds(),
        });
    }
    Ok(())
}

/// Assembles the graph. Declared universe sizes must agree across relations;
/// inferred sizes are widened to the largest claim. A missing `Y` is the
/// extreme cold-start case and becomes an empty relation.
pub fn build_graph(y: Option<Relation>, x: Relation, z: Relation) -> Result<TripartiteGraph> {
    check_kinds(&x, (NodeKind::Member, NodeKind::Object))?;
    check_kinds(&z, (NodeKind::Tuple, NodeKind::Member))?;
    if let Some(y) = &y {
        check_kinds(y, (NodeKind::Tuple, NodeKind::Object))?;
    }

    let claim = |count, declared, source| CountClaim {
        count,
        declared,
        source,
    };
    let mut tuple_claims = vec![claim(z.src_count(), z.counts_declared(), "Z")];
    let member_claims = [
        claim(x.src_count(), x.counts_declared(), "X"),
        claim(z.dst_count(), z.counts_declared(), "Z"),
    ];
    let mut object_claims = vec![claim(x.dst_count(), x.counts_declared(), "X")];
    if let Some(y) = &y {
        tuple_claims.push(claim(y.src_count(), y.counts_declared(), "Y"));
        object_claims.push(claim(y.dst_count(), y.counts_declared(), "Y"));
    }
    let counts = UniverseCounts {
        tuples: reconcile(NodeKind::Tuple, &tuple_claims)?,
        members: reconcile(NodeKind::Member, &member_claims)?,
        objects: reconcile(NodeKind::Object, &object_claims)?,
    };

    let declared = x.counts_declared() || z.counts_declared();
    let x = x.resized(counts.members, counts.objects)?.with_declared(declared);
    let z = z.resized(counts.tuples, counts.members)?.with_declared(declared);
    let y = match y {
        Some(y) => y.resized(counts.tuples, counts.objects)?.with_declared(declared),
        None => Relation::empty(NodeKind::Tuple, NodeKind::Object, counts.tuples, counts.objects),
    };
    Ok(TripartiteGraph::assemble(counts, y, x, z))
}

impl TripartiteGraph {
    fn assemble(counts: UniverseCounts, y: Relation, x: Relation, z: Relation) -> Self {
        let y_t = y.transpose();
        let x_t = x.transpose();
        let z_t = z.transpose();
        let mut graph = TripartiteGraph {
            counts,
            y,
            x,
            z,
            y_t,
            x_t,
            z_t,
            pretrain_degrees: DegreeTable {
                regime: DegreeRegime::Pretrain,
                tuples: Vec::new(),
                members: Vec::new(),
                objects: Vec::new(),
            },
            finetune_degrees: DegreeTable {
                regime: DegreeRegime::Finetune,
                tuples: Vec::new(),
                members: Vec::new(),
                objects: Vec::new(),
            },
        };
        graph.pretrain_degrees = degrees(&graph, DegreeRegime::Pretrain);
        graph.finetune_degrees = degrees(&graph, DegreeRegime::Finetune);
        graph
    }

    /// Same graph with its tuple interactions replaced (e.g. by a training
    /// split).
    pub fn with_tuple_interactions(&self, y: Relation) -> Result<TripartiteGraph> {
        check_kinds(&y, (NodeKind::Tuple, NodeKind::Object))?;
        if y.src_count() > self.counts.tuples || y.dst_count() > self.counts.objects {
            return Err(Error::CountMismatch {
                kind: NodeKind::Tuple,
                left: self.counts.tuples,
                left_source: "graph",
                right: y.src_count(),
                right_source: "Y",
            });
        }
        let y = y.resized(self.counts.tuples, self.counts.objects)?;
        Ok(TripartiteGraph::assemble(
            self.counts,
            y,
            self.x.clone(),
            self.z.clone(),
        ))
    }

    /// Same graph with member interactions and affiliations emptied, for runs
    /// that must see tuple interactions only.
    pub fn without_member_data(&self) -> TripartiteGraph {
        let c = self.counts;
        TripartiteGraph::assemble(
            c,
            self.y.clone(),
            Relation::empty(NodeKind::Member, NodeKind::Object, c.members, c.objects),
            Relation::empty(NodeKind::Tuple, NodeKind::Member, c.tuples, c.members),
        )
    }

    pub fn counts(&self) -> UniverseCounts {
        self.counts
    }

    pub fn n_tuples(&self) -> usize {
        self.counts.tuples
    }

    pub fn n_members(&self) -> usize {
        self.counts.members
    }

    pub fn n_objects(&self) -> usize {
        self.counts.objects
    }

    /// Tuple → object interactions.
    pub fn y(&self) -> &Relation {
        &self.y
    }

    /// Member → object interactions.
    pub fn x(&self) -> &Relation {
        &self.x
    }

    /// Tuple → member affiliations.
    pub fn z(&self) -> &Relation {
        &self.z
    }

    pub fn y_transpose(&self) -> &Relation {
        &self.y_t
    }

    pub fn x_transpose(&self) -> &Relation {
        &self.x_t
    }

    pub fn z_transpose(&self) -> &Relation {
        &self.z_t
    }

    pub fn degree_table(&self, regime: DegreeRegime) -> &DegreeTable {
        match regime {
            DegreeRegime::Pretrain => &self.pretrain_degrees,
            DegreeRegime::Finetune => &self.finetune_degrees,
        }
    }
}

/// Recomputes a degree table from the adjacency lists.
pub fn degrees(graph: &TripartiteGraph, regime: DegreeRegime) -> DegreeTable {
    let c = graph.counts();
    match regime {
        DegreeRegime::Pretrain => DegreeTable {
            regime,
            tuples: (0..c.tuples).map(|t| graph.z().degree(t)).collect(),
            members: (0..c.members)
                .map(|m| graph.x().degree(m) + graph.z_transpose().degree(m))
                .collect(),
            objects: (0..c.objects).map(|o| graph.x_transpose().degree(o)).collect(),
        },
        DegreeRegime::Finetune => DegreeTable {
            regime,
            tuples: (0..c.tuples).map(|t| graph.y().degree(t)).collect(),
            members: vec![0; c.members],
            objects: (0..c.objects).map(|o| graph.y_transpose().degree(o)).collect(),
        },
    }
}

/// Fractions of `Y` assigned to each split part. Whatever is left over is
/// discarded.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub test: f64,
    pub valid: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.05,
            test: 0.20,
            valid: 0.05,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("train", self.train), ("test", self.test), ("valid", self.valid)] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::InvalidSplit(format!("{name} fraction {f} outside [0, 1]")));
            }
        }
        let total = self.train + self.test + self.valid;
        if total > 1.0 + 1e-12 {
            return Err(Error::InvalidSplit(format!("fractions sum to {total} > 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct InteractionSplit {
    pub train: Relation,
    pub valid: Relation,
    pub test: Relation,
    pub discarded: Relation,
}

/// Global uniform partition of the edges of `y`. Edges are shuffled with a
/// seeded ChaCha8 stream and cut at cumulative fraction boundaries in the
/// order train, test, valid.
pub fn split_interactions(y: &Relation, spec: &SplitSpec) -> Result<InteractionSplit> {
    spec.validate()?;
    if y.is_empty() {
        return Err(Error::EmptyRelation("tuple interactions"));
    }
    let mut edges: Vec<(usize, usize)> = y.edges().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    edges.shuffle(&mut rng);

    let n = edges.len() as f64;
    let cut = |f: f64| ((f * n).round() as usize).min(edges.len());
    let b_train = cut(spec.train);
    let b_test = cut(spec.train + spec.test).max(b_train);
    let b_valid = cut(spec.train + spec.test + spec.valid).max(b_test);

    let part = |range: std::ops::Range<usize>| {
        let mut e = edges[range].to_vec();
        e.sort_unstable();
        Relation::from_sorted_unique(y.src_kind(), y.dst_kind(), y.src_count(), y.dst_count(), &e, y.counts_declared())
    };
    Ok(InteractionSplit {
        train: part(0..b_train),
        test: part(b_train..b_test),
        valid: part(b_test..b_valid),
        discarded: part(b_valid..edges.len()),
    })
}
