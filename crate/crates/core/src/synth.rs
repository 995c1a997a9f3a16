//! Seeded synthetic tripartite graphs for tests, benchmarks and demos.

use std::collections::BTreeSet;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{build_graph, NodeKind, Relation, TripartiteGraph, UniverseCounts};

/// `n_src · avg_degree` edges (rounded) drawn uniformly, duplicates merged.
fn uniform_relation(rng: &mut ChaCha8Rng, kinds: (NodeKind, NodeKind), n_src: usize, n_dst: usize, avg_degree: f64) -> Result<Relation> {
    let target = (n_src as f64 * avg_degree).round() as usize;
    let mut edges = Vec::with_capacity(target);
    if n_src > 0 && n_dst > 0 {
        for _ in 0..target {
            edges.push((rng.random_range(0..n_src), rng.random_range(0..n_dst)));
        }
    }
    Relation::from_edges(kinds.0, kinds.1, n_src, n_dst, edges)
}

/// Uniform random graph; every relation has `avg_degree` edges per source
/// node before duplicate removal.
pub fn random_graph(seed: u64, counts: UniverseCounts, avg_degree: f64) -> Result<TripartiteGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let UniverseCounts { tuples, members, objects } = counts;
    let y = uniform_relation(&mut rng, (NodeKind::Tuple, NodeKind::Object), tuples, objects, avg_degree)?;
    let x = uniform_relation(&mut rng, (NodeKind::Member, NodeKind::Object), members, objects, avg_degree)?;
    let z = uniform_relation(&mut rng, (NodeKind::Tuple, NodeKind::Member), tuples, members, avg_degree)?;
    build_graph(Some(y), x, z)
}

/// Two planted communities.
#[derive(Clone, Debug)]
pub struct PlantedGraph {
    pub graph: TripartiteGraph,
    /// Community of each tuple.
    pub tuple_cluster: Vec<usize>,
    /// Community of each object.
    pub object_cluster: Vec<usize>,
}

/// Two equal communities of tuples, members and objects. Each tuple joins
/// `members_per_tuple` members of its own community, each member
/// interacts with `objects_per_member` objects of its own community, and
/// each tuple interacts with `objects_per_tuple` of its community's objects.
/// There are no cross-community edges.
pub fn planted_two_clusters(seed: u64, counts: UniverseCounts, members_per_tuple: usize, objects_per_member: usize, objects_per_tuple: usize) -> Result<PlantedGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = |n: usize, i: usize| usize::from(i >= n / 2);
    let pick = |rng: &mut ChaCha8Rng, n: usize, cluster: usize, k: usize| -> Vec<usize> {
        let (lo, hi) = if cluster == 0 { (0, n / 2) } else { (n / 2, n) };
        let mut set = BTreeSet::new();
        let k = k.min(hi - lo);
        while set.len() < k {
            set.insert(rng.random_range(lo..hi));
        }
        set.into_iter().collect()
    };
    let UniverseCounts { tuples, members, objects } = counts;
    let mut z = Vec::new();
    let mut y = Vec::new();
    for t in 0..tuples {
        let c = half(tuples, t);
        z.extend(pick(&mut rng, members, c, members_per_tuple).into_iter().map(|m| (t, m)));
        y.extend(pick(&mut rng, objects, c, objects_per_tuple).into_iter().map(|o| (t, o)));
    }
    let mut x = Vec::new();
    for m in 0..members {
        let c = half(members, m);
        x.extend(pick(&mut rng, objects, c, objects_per_member).into_iter().map(|o| (m, o)));
    }
    let graph = build_graph(
        Some(Relation::from_edges(NodeKind::Tuple, NodeKind::Object, tuples, objects, y)?),
        Relation::from_edges(NodeKind::Member, NodeKind::Object, members, objects, x)?,
        Relation::from_edges(NodeKind::Tuple, NodeKind::Member, tuples, members, z)?,
    )?;
    Ok(PlantedGraph {
        graph,
        tuple_cluster: (0..tuples).map(|t| half(tuples, t)).collect(),
        object_cluster: (0..objects).map(|o| half(objects, o)).collect(),
    })
}

/// Target shape for [`community_graph`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CommunityShape {
    pub counts: UniverseCounts,
    pub y_edges: usize,
    pub x_edges: usize,
    pub z_edges: usize,
    pub communities: usize,
    /// Probability that an edge stays inside its source's community.
    pub locality: f64,
}

impl CommunityShape {
    /// Sizes of the public Mafengwo group-recommendation data.
    pub fn mafengwo() -> Self {
        CommunityShape {
            counts: UniverseCounts {
                tuples: 995,
                members: 5275,
                objects: 1513,
            },
            y_edges: 3595,
            x_edges: 39761,
            z_edges: 7154,
            communities: 40,
            locality: 0.8,
        }
    }
}

/// Random graph with planted communities and exactly the requested edge
/// counts (as long as the universes are large enough to hold them).
pub fn community_graph(seed: u64, shape: &CommunityShape) -> Result<TripartiteGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = shape.communities.max(1);
    let UniverseCounts { tuples, members, objects } = shape.counts;
    let draw = |rng: &mut ChaCha8Rng, n_src: usize, n_dst: usize, n_edges: usize| -> Vec<(usize, usize)> {
        let mut set = BTreeSet::new();
        let cap = n_src.saturating_mul(n_dst);
        while set.len() < n_edges.min(cap) {
            let s = rng.random_range(0..n_src);
            let d = if rng.random::<f64>() < shape.locality {
                // same community: nodes are assigned round-robin
                let comm = s % k;
                let slots = (n_dst + k - 1 - comm) / k;
                if slots == 0 {
                    rng.random_range(0..n_dst)
                } else {
                    comm + k * rng.random_range(0..slots)
                }
            } else {
                rng.random_range(0..n_dst)
            };
            set.insert((s, d));
        }
        set.into_iter().collect()
    };
    let z = draw(&mut rng, tuples, members, shape.z_edges);
    let x = draw(&mut rng, members, objects, shape.x_edges);
    let y = draw(&mut rng, tuples, objects, shape.y_edges);
    build_graph(
        Some(Relation::from_edges(NodeKind::Tuple, NodeKind::Object, tuples, objects, y)?),
        Relation::from_edges(NodeKind::Member, NodeKind::Object, members, objects, x)?,
        Relation::from_edges(NodeKind::Tuple, NodeKind::Member, tuples, members, z)?,
    )
}
