//! Brute-force metric oracle.
//!
//! Enumerates every reachable (`v1 – m – v2`) and non-reachable
//! (`v1 ∼ m – v2`) path instance over dense adjacency matrices, with degrees
//! recounted from the raw edge lists. Shares no code with the sparse
//! builders beyond the graph container itself.

use crate::error::{Error, Result};
use crate::graph::TripartiteGraph;
use crate::metrics::Stage;

pub const DEFAULT_ORACLE_CAP: usize = 200;

/// Dense `(c, d)` matrices over the joint tuple ∪ object space, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMetrics {
    pub stage: Stage,
    pub n_tuples: usize,
    pub n_objects: usize,
    pub consistency: Vec<f64>,
    pub discrepancy: Vec<f64>,
}

impl DenseMetrics {
    pub fn joint_size(&self) -> usize {
        self.n_tuples + self.n_objects
    }

    pub fn c(&self, v1: usize, v2: usize) -> f64 {
        self.consistency[v1 * self.joint_size() + v2]
    }

    pub fn d(&self, v1: usize, v2: usize) -> f64 {
        self.discrepancy[v1 * self.joint_size() + v2]
    }

    /// Largest absolute entrywise difference in either matrix.
    pub fn max_abs_diff(&self, other: &DenseMetrics) -> f64 {
        assert_eq!(self.joint_size(), other.joint_size());
        self.consistency
            .iter()
            .zip(&other.consistency)
            .chain(self.discrepancy.iter().zip(&other.discrepancy))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn weight(deg_mid: usize, deg_end: usize) -> f64 {
    if deg_mid == 0 {
        0.0
    } else {
        ((deg_mid as f64 + 1.0) / (deg_end as f64 + 1.0)).sqrt() / deg_mid as f64
    }
}

/// Dense path enumeration for the given stage. For the fine-tuning stage the
/// graph's `Y` is taken as the training interactions.
pub fn bruteforce_metrics(graph: &TripartiteGraph, stage: Stage, cap: usize) -> Result<DenseMetrics> {
    let (nt, nm, no) = (graph.n_tuples(), graph.n_members(), graph.n_objects());
    let total = nt + nm + no;
    if total > cap {
        return Err(Error::CapExceeded { nodes: total, cap });
    }
    let n = nt + no;

    // endpoint × midpoint adjacency over the joint endpoint space
    let (n_mid, adj) = match stage {
        Stage::Pretrain => {
            let mut adj = vec![vec![false; nm]; n];
            for (t, m) in graph.z().edges() {
                adj[t][m] = true;
            }
            for (m, o) in graph.x().edges() {
                adj[nt + o][m] = true;
            }
            (nm, adj)
        }
        Stage::Finetune => {
            // tuples are linked through objects and objects through tuples;
            // midpoints index the joint space directly
            let mut adj = vec![vec![false; n]; n];
            for (t, o) in graph.y().edges() {
                adj[t][nt + o] = true;
                adj[nt + o][t] = true;
            }
            (n, adj)
        }
    };

    let endpoint_deg: Vec<usize> = adj.iter().map(|row| row.iter().filter(|&&b| b).count()).collect();
    let mid_deg: Vec<usize> = match stage {
        Stage::Pretrain => {
            let mut deg = vec![0usize; nm];
            for (_, m) in graph.z().edges() {
                deg[m] += 1;
            }
            for (m, _) in graph.x().edges() {
                deg[m] += 1;
            }
            deg
        }
        Stage::Finetune => endpoint_deg.clone(),
    };

    let mut c = vec![0.0; n * n];
    let mut d = vec![0.0; n * n];
    let is_tuple = |v: usize| v < nt;
    for v1 in 0..n {
        for v2 in 0..n {
            let direct = stage == Stage::Finetune && is_tuple(v1) != is_tuple(v2);
            let (cv, dv) = if direct {
                let w = weight(endpoint_deg[v1], endpoint_deg[v2]);
                (if adj[v1][v2] { w } else { 0.0 }, w)
            } else {
                let mut cv = 0.0;
                let mut dv = 0.0;
                for m in 0..n_mid {
                    if !adj[v2][m] {
                        continue;
                    }
                    let w = weight(mid_deg[m], endpoint_deg[v2]);
                    if adj[v1][m] {
                        cv += w;
                    } else {
                        dv += w;
                    }
                }
                (cv, dv)
            };
            c[v1 * n + v2] = cv;
            d[v1 * n + v2] = dv;
        }
    }
    Ok(DenseMetrics {
        stage,
        n_tuples: nt,
        n_objects: no,
        consistency: c,
        discrepancy: d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, NodeKind, Relation};
    use crate::metrics::build_member_metrics;

    #[test]
    fn empty_relations_give_zero_metrics() {
        let g = build_graph(
            None,
            Relation::empty(NodeKind::Member, NodeKind::Object, 2, 2),
            Relation::empty(NodeKind::Tuple, NodeKind::Member, 2, 2),
        )
        .unwrap();
        for stage in [Stage::Pretrain, Stage::Finetune] {
            let m = bruteforce_metrics(&g, stage, DEFAULT_ORACLE_CAP).unwrap();
            assert!(m.consistency.iter().chain(&m.discrepancy).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn cap_is_enforced() {
        let g = build_graph(
            None,
            Relation::empty(NodeKind::Member, NodeKind::Object, 100, 100),
            Relation::empty(NodeKind::Tuple, NodeKind::Member, 100, 100),
        )
        .unwrap();
        assert!(matches!(
            bruteforce_metrics(&g, Stage::Pretrain, DEFAULT_ORACLE_CAP),
            Err(Error::CapExceeded { nodes: 300, cap: 200 })
        ));
    }

    #[test]
    fn toy_graph_matches_sparse_builder() {
        let z = Relation::from_edges(NodeKind::Tuple, NodeKind::Member, 2, 4, [(0, 0), (0, 1), (1, 1), (1, 2)]).unwrap();
        let x = Relation::from_edges(NodeKind::Member, NodeKind::Object, 4, 1, [(3, 0), (1, 0)]).unwrap();
        let g = build_graph(None, x, z).unwrap();
        let oracle = bruteforce_metrics(&g, Stage::Pretrain, DEFAULT_ORACLE_CAP).unwrap();
        let sparse = build_member_metrics(&g).unwrap().to_dense();
        assert!(oracle.max_abs_diff(&sparse) <= 1e-10);
    }
}
