//! Affinity graphs over the pixel grid and the mutex watershed.

use std::collections::HashSet;

use rayon::prelude::*;

use super::first_visit_labels;
use crate::error::{Error, Result};
use crate::losses::dist_sq;
use crate::types::{EmbeddingField, LabelImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EdgeKind {
    Attractive,
    Repulsive,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
    /// Boundary weight in `[0, 1]`; 0 means the endpoints belong together.
    pub weight: f64,
    pub kind: EdgeKind,
    /// Index of the offset that produced the edge; part of the tie-break key.
    pub offset: usize,
}

impl Edge {
    /// Priority: `1 - w` for attractive edges, `w` for repulsive ones.
    pub fn strength(&self) -> f64 {
        match self.kind {
            EdgeKind::Attractive => 1.0 - self.weight,
            EdgeKind::Repulsive => self.weight,
        }
    }

    pub fn key(&self) -> (usize, usize, usize) {
        (self.u, self.v, self.offset)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffinityGraph {
    pub height: usize,
    pub width: usize,
    /// Offsets of the repulsive edges; the attractive edges use `(0, 1)` and
    /// `(1, 0)` as offsets 0 and 1.
    pub offsets: Vec<(i64, i64)>,
    pub edges: Vec<Edge>,
}

impl AffinityGraph {
    /// Graph with arbitrary edges over `height * width` nodes.
    pub fn from_edges(height: usize, width: usize, edges: Vec<Edge>) -> Result<Self> {
        let n = height * width;
        let mut seen = HashSet::new();
        for e in &edges {
            if e.u >= n || e.v >= n || e.u == e.v {
                return Err(Error::Domain(format!("edge ({}, {}) is not valid on {n} nodes", e.u, e.v)));
            }
            if !(0.0..=1.0).contains(&e.weight) {
                return Err(Error::Domain(format!("edge weight {} outside [0, 1]", e.weight)));
            }
            if !seen.insert((e.u.min(e.v), e.u.max(e.v), e.kind)) {
                return Err(Error::Domain(format!("duplicate edge ({}, {})", e.u, e.v)));
            }
        }
        Ok(Self { height, width, offsets: Vec::new(), edges })
    }

    pub fn num_nodes(&self) -> usize {
        self.height * self.width
    }
}

/// Boundary weight `1 - max((2 delta_d - d) / (2 delta_d), 0)^2`.
pub fn edge_weight(distance: f64, delta_d: f64) -> f64 {
    let x = ((2.0 * delta_d - distance) / (2.0 * delta_d)).max(0.0);
    1.0 - x * x
}

/// Axis-aligned offsets `(0, s)` and `(s, 0)` for every stride.
pub fn axis_offsets(strides: &[i64]) -> Vec<(i64, i64)> {
    strides.iter().flat_map(|&s| [(0, s), (s, 0)]).collect()
}

pub fn default_offsets() -> Vec<(i64, i64)> {
    axis_offsets(&[3, 9, 27])
}

const NEIGHBORS: [(i64, i64); 2] = [(0, 1), (1, 0)];

/// Attractive nearest-neighbor edges plus repulsive edges along `offsets`.
pub fn build_affinity_graph(
    field: &EmbeddingField,
    offsets: &[(i64, i64)],
    delta_d: f64,
) -> Result<AffinityGraph> {
    if offsets.is_empty() {
        return Err(Error::Domain("at least one offset is required".into()));
    }
    if !(delta_d.is_finite() && delta_d > 0.0) {
        return Err(Error::Domain(format!("delta_d must be > 0, got {delta_d}")));
    }
    let (h, w) = (field.height() as i64, field.width() as i64);
    let mut canonical = HashSet::new();
    for &(dr, dc) in offsets {
        if dr.abs() >= h || dc.abs() >= w {
            return Err(Error::OffsetOutOfRange(dr, dc));
        }
        let c = if (dr, dc) < (0, 0) { (-dr, -dc) } else { (dr, dc) };
        if c == (0, 0) || NEIGHBORS.contains(&c) || !canonical.insert(c) {
            return Err(Error::Domain(format!("offset ({dr}, {dc}) duplicates another edge")));
        }
    }
    let all: Vec<((i64, i64), EdgeKind)> = NEIGHBORS
        .iter()
        .map(|&o| (o, EdgeKind::Attractive))
        .chain(offsets.iter().map(|&o| (o, EdgeKind::Repulsive)))
        .collect();
    let edges: Vec<Edge> = (0..field.num_pixels())
        .into_par_iter()
        .flat_map_iter(|u| {
            let (r, c) = ((u as i64) / w, (u as i64) % w);
            all.iter().enumerate().filter_map(move |(k, &((dr, dc), kind))| {
                let (r2, c2) = (r + dr, c + dc);
                if r2 < 0 || r2 >= h || c2 < 0 || c2 >= w {
                    return None;
                }
                let v = (r2 * w + c2) as usize;
                let d = dist_sq(field.pixel(u), field.pixel(v)).sqrt();
                Some(Edge { u, v, weight: edge_weight(d, delta_d), kind, offset: k })
            })
        })
        .collect();
    Ok(AffinityGraph {
        height: field.height(),
        width: field.width(),
        offsets: offsets.to_vec(),
        edges,
    })
}

/// Edge indices by decreasing strength, ties by ascending key.
pub fn processing_order(edges: &[Edge]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..edges.len()).collect();
    order.par_sort_unstable_by(|&a, &b| {
        edges[b].strength().total_cmp(&edges[a].strength()).then(edges[a].key().cmp(&edges[b].key()))
    });
    order
}

struct MutexForest {
    parent: Vec<usize>,
    rank: Vec<u8>,
    mutexes: Vec<HashSet<usize>>,
}

impl MutexForest {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect(), rank: vec![0; n], mutexes: vec![HashSet::new(); n] }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn merge(&mut self, a: usize, b: usize) {
        let (keep, gone) = match self.rank[a].cmp(&self.rank[b]) {
            std::cmp::Ordering::Less => (b, a),
            std::cmp::Ordering::Greater => (a, b),
            std::cmp::Ordering::Equal => {
                self.rank[a] += 1;
                (a, b)
            }
        };
        self.parent[gone] = keep;
        let moved = std::mem::take(&mut self.mutexes[gone]);
        for other in moved {
            self.mutexes[other].remove(&gone);
            self.mutexes[other].insert(keep);
            self.mutexes[keep].insert(other);
        }
    }
}

/// Component index of every node after the greedy mutex watershed pass.
pub fn mutex_watershed_partition(num_nodes: usize, edges: &[Edge]) -> Vec<usize> {
    let mut forest = MutexForest::new(num_nodes);
    for idx in processing_order(edges) {
        let e = &edges[idx];
        let (a, b) = (forest.find(e.u), forest.find(e.v));
        if a == b {
            continue;
        }
        match e.kind {
            EdgeKind::Attractive => {
                if !forest.mutexes[a].contains(&b) {
                    forest.merge(a, b);
                }
            }
            EdgeKind::Repulsive => {
                forest.mutexes[a].insert(b);
                forest.mutexes[b].insert(a);
            }
        }
    }
    (0..num_nodes).map(|i| forest.find(i)).collect()
}

/// Instances from the mutex watershed, labeled from 2 in row-major
/// first-visit order.
pub fn mutex_watershed(graph: &AffinityGraph) -> Result<LabelImage> {
    let roots = mutex_watershed_partition(graph.num_nodes(), &graph.edges);
    let (labels, _) = first_visit_labels(&roots);
    LabelImage::new(graph.height, graph.width, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::RngSeed;
    use rand::Rng;

    fn same_partition(a: &[usize], b: &[usize]) -> bool {
        (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
    }

    #[test]
    fn attractive_only_merges_everything() {
        let field = EmbeddingField::from_pixels(4, 4, 1, |i, px| px[0] = i as f64).unwrap();
        let graph = AffinityGraph {
            edges: build_affinity_graph(&field, &[(0, 3)], 2.0)
                .unwrap()
                .edges
                .into_iter()
                .filter(|e| e.kind == EdgeKind::Attractive)
                .collect(),
            ..build_affinity_graph(&field, &[(0, 3)], 2.0).unwrap()
        };
        let labels = mutex_watershed(&graph).unwrap();
        assert!(labels.labels().iter().all(|&l| l == 2));
    }

    #[test]
    fn strong_repulsion_separates_two_pixels() {
        let edges = vec![
            Edge { u: 0, v: 1, weight: 0.0, kind: EdgeKind::Repulsive, offset: 2 },
            Edge { u: 0, v: 1, weight: 0.9, kind: EdgeKind::Attractive, offset: 0 },
        ];
        // repulsive strength 0 < attractive 0.1: merge wins
        let g = AffinityGraph::from_edges(2, 1, edges.clone()).unwrap();
        assert_eq!(mutex_watershed(&g).unwrap().labels(), &[2, 2]);
        let mut strong = edges;
        strong[0].weight = 1.0;
        let g = AffinityGraph::from_edges(2, 1, strong).unwrap();
        assert_eq!(mutex_watershed(&g).unwrap().labels(), &[2, 3]);
    }

    #[test]
    fn weight_examples() {
        assert_eq!(edge_weight(0.0, 2.0), 0.0);
        assert_eq!(edge_weight(4.0, 2.0), 1.0);
        assert_eq!(edge_weight(7.5, 2.0), 1.0);
        assert_eq!(edge_weight(2.0, 2.0), 0.75);
        let mut last = 0.0;
        for k in 0..100 {
            let w = edge_weight(k as f64 * 0.05, 2.0);
            assert!(w >= last);
            last = w;
        }
    }

    #[test]
    fn graph_structure() {
        let field = EmbeddingField::zeros(5, 6, 2).unwrap();
        let g = build_affinity_graph(&field, &axis_offsets(&[3]), 2.0).unwrap();
        let short = g.edges.iter().filter(|e| e.kind == EdgeKind::Attractive).count();
        assert_eq!(short, 5 * 5 + 4 * 6);
        assert!(matches!(
            build_affinity_graph(&field, &default_offsets(), 2.0),
            Err(Error::OffsetOutOfRange(0, 9))
        ));
        // (0,3): 5 rows * 3 columns, (3,0): 2 rows * 6 columns
        assert_eq!(g.edges.len() - short, 5 * 3 + 2 * 6);
        assert!(g.edges.iter().all(|e| e.weight == 0.0));
        assert!(build_affinity_graph(&field, &[(0, 1)], 2.0).is_err());
        assert!(build_affinity_graph(&field, &[(0, 3), (0, -3)], 2.0).is_err());
    }

    #[test]
    fn mutexes_are_never_violated() {
        let mut rng = RngSeed(77).rng();
        let field =
            EmbeddingField::from_pixels(12, 12, 3, |_, px| px.iter_mut().for_each(|v| *v = rng.random_range(0.0..4.0)))
                .unwrap();
        let g = build_affinity_graph(&field, &axis_offsets(&[3, 9]), 2.0).unwrap();
        let part = mutex_watershed_partition(g.num_nodes(), &g.edges);
        // replay: every repulsive edge that installed a mutex keeps its ends apart
        let mut comp: Vec<usize> = (0..g.num_nodes()).collect();
        let mut installed = Vec::new();
        for idx in processing_order(&g.edges) {
            let e = g.edges[idx];
            let (a, b) = (comp[e.u], comp[e.v]);
            if a == b {
                continue;
            }
            let blocked = installed.iter().any(|&(x, y): &(usize, usize)| {
                (comp[x] == a && comp[y] == b) || (comp[x] == b && comp[y] == a)
            });
            match e.kind {
                EdgeKind::Attractive if !blocked => {
                    comp.iter_mut().for_each(|c| if *c == b { *c = a });
                }
                EdgeKind::Repulsive if !blocked => installed.push((e.u, e.v)),
                _ => {}
            }
        }
        for (u, v) in installed {
            assert_ne!(part[u], part[v]);
        }
        assert!(same_partition(&part, &comp));
    }
}
