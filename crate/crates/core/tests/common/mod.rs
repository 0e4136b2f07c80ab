//! Shared helpers for the integration tests.
#![allow(dead_code)]

use emseg::clustering::{Edge, EdgeKind};
use emseg::RngSeed;
use rand::seq::SliceRandom;
use rand::Rng;

/// Straightforward restatement of the greedy rule: explicit component
/// ids per node and an explicit list of forbidden component pairs.
pub fn mws_oracle(num_nodes: usize, edges: &[Edge]) -> Vec<usize> {
    let mut comp: Vec<usize> = (0..num_nodes).collect();
    let mut forbidden: Vec<(usize, usize)> = Vec::new();
    let mut sorted: Vec<Edge> = edges.to_vec();
    sorted.sort_by(|a, b| {
        let sa = if a.kind == EdgeKind::Attractive { 1.0 - a.weight } else { a.weight };
        let sb = if b.kind == EdgeKind::Attractive { 1.0 - b.weight } else { b.weight };
        sb.partial_cmp(&sa).unwrap().then((a.u, a.v, a.offset).cmp(&(b.u, b.v, b.offset)))
    });
    for e in sorted {
        let (cu, cv) = (comp[e.u], comp[e.v]);
        if cu == cv {
            continue;
        }
        let blocked = forbidden.iter().any(|&(x, y)| (x == cu && y == cv) || (x == cv && y == cu));
        if e.kind == EdgeKind::Attractive {
            if !blocked {
                for c in comp.iter_mut() {
                    if *c == cv {
                        *c = cu;
                    }
                }
                for p in forbidden.iter_mut() {
                    if p.0 == cv {
                        p.0 = cu;
                    }
                    if p.1 == cv {
                        p.1 = cu;
                    }
                }
            }
        } else if !blocked {
            forbidden.push((cu, cv));
        }
    }
    comp
}

pub fn same_partition(a: &[usize], b: &[usize]) -> bool {
    (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
}

pub fn random_graph(seed: u64) -> (usize, Vec<Edge>) {
    let mut rng = RngSeed(seed).rng();
    let n = rng.random_range(2..=8);
    let mut pairs: Vec<(usize, usize)> =
        (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))).collect();
    pairs.shuffle(&mut rng);
    let m = rng.random_range(1..=pairs.len());
    let edges = pairs[..m]
        .iter()
        .enumerate()
        .map(|(k, &(u, v))| Edge {
            u,
            v,
            weight: rng.random_range(0.0..=1.0),
            kind: if rng.random_bool(0.5) { EdgeKind::Attractive } else { EdgeKind::Repulsive },
            offset: k % 3,
        })
        .collect();
    (n, edges)
}
