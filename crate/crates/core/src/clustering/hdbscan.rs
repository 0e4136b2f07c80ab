use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::losses::dist_sq;
use crate::types::{EmbeddingField, LabelImage, FIRST_INSTANCE, UNLABELED};

fn distance(field: &EmbeddingField, a: usize, b: usize) -> f64 {
    dist_sq(field.pixel(a), field.pixel(b)).sqrt()
}

/// Distance to the `k`-th nearest point, the point itself counting as the
/// first.
fn core_distances(field: &EmbeddingField, k: usize) -> Vec<f64> {
    let n = field.num_pixels();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<f64> = (0..n).map(|j| distance(field, i, j)).collect();
            let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect()
}

/// Prim's algorithm on the dense mutual-reachability graph. Returns edges
/// `(a, b, weight)` in insertion order.
fn mst(field: &EmbeddingField, core: &[f64]) -> Vec<(usize, usize, f64)> {
    let n = field.num_pixels();
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut parent = vec![0usize; n];
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let cur_core = core[current];
        best.par_iter_mut().zip(parent.par_iter_mut()).enumerate().for_each(|(j, (b, p))| {
            if !in_tree[j] {
                let w = distance(field, current, j).max(cur_core).max(core[j]);
                if w < *b {
                    *b = w;
                    *p = current;
                }
            }
        });
        let mut next = usize::MAX;
        let mut next_w = f64::INFINITY;
        for j in 0..n {
            if !in_tree[j] && (best[j] < next_w || next == usize::MAX) {
                next = j;
                next_w = best[j];
            }
        }
        in_tree[next] = true;
        edges.push((parent[next], next, next_w));
        current = next;
    }
    edges
}

/// Node of the single-linkage dendrogram; ids `0..n` are points.
#[derive(Clone, Copy, Debug)]
struct Merge {
    left: usize,
    right: usize,
    distance: f64,
    size: usize,
}

fn single_linkage(n: usize, mut edges: Vec<(usize, usize, f64)>) -> Vec<Merge> {
    edges.sort_by(|a, b| a.2.total_cmp(&b.2));
    let mut parent: Vec<usize> = (0..2 * n).collect();
    let mut size = vec![1usize; 2 * n];
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for (a, b, w) in edges {
        let ra = find(&mut parent, a);
        let rb = find(&mut parent, b);
        let node = n + merges.len();
        parent[ra] = node;
        parent[rb] = node;
        size[node] = size[ra] + size[rb];
        merges.push(Merge { left: ra, right: rb, distance: w, size: size[node] });
    }
    merges
}

/// Row of the condensed tree: `child` leaves `parent` at `lambda`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CondensedRow {
    pub parent: usize,
    pub child: usize,
    pub lambda: f64,
    pub size: usize,
}

fn condense(n: usize, merges: &[Merge], min_size: usize) -> Vec<CondensedRow> {
    let root = n + merges.len() - 1;
    let node_size = |x: usize| if x < n { 1 } else { merges[x - n].size };
    let mut relabel = vec![0usize; root + 1];
    relabel[root] = n;
    let mut next_label = n + 1;
    let mut rows = Vec::new();
    let mut ignore = vec![false; root + 1];

    fn leaves(n: usize, merges: &[Merge], node: usize, out: &mut Vec<usize>) {
        let mut stack = vec![node];
        while let Some(x) = stack.pop() {
            if x < n {
                out.push(x);
            } else {
                let m = &merges[x - n];
                stack.push(m.right);
                stack.push(m.left);
            }
        }
    }

    // breadth-first from the root, so parents are relabeled before children
    let mut queue = std::collections::VecDeque::from([root]);
    while let Some(node) = queue.pop_front() {
        if node < n {
            continue;
        }
        let m = &merges[node - n];
        queue.push_back(m.left);
        queue.push_back(m.right);
        if ignore[node] {
            continue;
        }
        let lambda = if m.distance > 0.0 { 1.0 / m.distance } else { f64::INFINITY };
        let (l, r) = (m.left, m.right);
        let (ls, rs) = (node_size(l), node_size(r));
        let parent = relabel[node];
        let fall_out = |child: usize, rows: &mut Vec<CondensedRow>, ignore: &mut [bool]| {
            let mut pts = Vec::new();
            leaves(n, merges, child, &mut pts);
            for p in pts {
                rows.push(CondensedRow { parent, child: p, lambda, size: 1 });
            }
            mark_subtree(n, merges, child, ignore);
        };
        if ls >= min_size && rs >= min_size {
            for (c, s) in [(l, ls), (r, rs)] {
                relabel[c] = next_label;
                rows.push(CondensedRow { parent, child: next_label, lambda, size: s });
                next_label += 1;
            }
        } else if ls < min_size && rs < min_size {
            fall_out(l, &mut rows, &mut ignore);
            fall_out(r, &mut rows, &mut ignore);
        } else if ls < min_size {
            relabel[r] = parent;
            fall_out(l, &mut rows, &mut ignore);
        } else {
            relabel[l] = parent;
            fall_out(r, &mut rows, &mut ignore);
        }
    }
    rows
}

fn mark_subtree(n: usize, merges: &[Merge], node: usize, ignore: &mut [bool]) {
    let mut stack = vec![node];
    while let Some(x) = stack.pop() {
        ignore[x] = true;
        if x >= n {
            let m = &merges[x - n];
            stack.push(m.left);
            stack.push(m.right);
        }
    }
}

/// Excess-of-mass selection over the condensed tree; the root is never
/// selected. Returns the selected cluster ids.
fn select_clusters(n: usize, rows: &[CondensedRow]) -> Vec<usize> {
    let max_cluster = rows.iter().map(|r| r.parent.max(r.child)).max().unwrap_or(n);
    let num = max_cluster + 1 - n;
    let mut birth = vec![0.0f64; num];
    let mut stability = vec![0.0f64; num];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); num];
    for r in rows {
        if r.child >= n {
            birth[r.child - n] = r.lambda;
            children[r.parent - n].push(r.child);
        }
    }
    for r in rows {
        stability[r.parent - n] += (r.lambda - birth[r.parent - n]) * r.size as f64;
    }
    let mut selected = vec![false; num];
    // children always carry larger ids than their parents
    for c in (1..num).rev() {
        let child_sum: f64 = children[c].iter().map(|&k| stability[k - n]).sum();
        if children[c].is_empty() || stability[c] >= child_sum {
            selected[c] = true;
            let mut stack = children[c].clone();
            while let Some(k) = stack.pop() {
                selected[k - n] = false;
                stack.extend(children[k - n].iter().copied());
            }
        } else {
            stability[c] = child_sum;
        }
    }
    (1..num).filter(|&c| selected[c]).map(|c| c + n).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct HdbscanResult {
    pub labels: LabelImage,
    pub condensed: Vec<CondensedRow>,
}

/// HDBSCAN* with `min_samples = min_cluster_size`. Noise is labeled 0,
/// clusters from 2 in row-major first-visit order.
pub fn hdbscan(field: &EmbeddingField, min_cluster_size: usize) -> Result<HdbscanResult> {
    if min_cluster_size < 2 {
        return Err(Error::Domain(format!(
            "min_cluster_size must be >= 2, got {min_cluster_size}"
        )));
    }
    let n = field.num_pixels();
    if n < min_cluster_size {
        return Err(Error::TooFewPixels { needed: min_cluster_size, got: n });
    }
    let core = core_distances(field, min_cluster_size);
    let merges = single_linkage(n, mst(field, &core));
    let rows = condense(n, &merges, min_cluster_size);
    let selected = select_clusters(n, &rows);

    let mut cluster_parent = std::collections::BTreeMap::new();
    let mut point_parent = vec![n; n];
    for r in &rows {
        if r.child >= n {
            cluster_parent.insert(r.child, r.parent);
        } else {
            point_parent[r.child] = r.parent;
        }
    }
    let is_selected = |c: usize| selected.binary_search(&c).is_ok();
    let assignment: Vec<Option<usize>> = point_parent
        .iter()
        .map(|&c| {
            let mut cur = c;
            loop {
                if is_selected(cur) {
                    return Some(cur);
                }
                match cluster_parent.get(&cur) {
                    Some(&p) => cur = p,
                    None => return None,
                }
            }
        })
        .collect();

    let mut ids = std::collections::BTreeMap::new();
    let labels: Vec<u64> = assignment
        .iter()
        .map(|a| match a {
            None => UNLABELED,
            Some(c) => {
                let next = FIRST_INSTANCE + ids.len() as u64;
                *ids.entry(*c).or_insert(next)
            }
        })
        .collect();
    Ok(HdbscanResult { labels: LabelImage::new(field.height(), field.width(), labels)?, condensed: rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_far_blobs() {
        let field = EmbeddingField::from_pixels(4, 10, 2, |i, px| {
            let base = if i < 20 { 0.0 } else { 10.0 };
            px[0] = base + 0.01 * (i % 5) as f64;
            px[1] = base + 0.013 * (i % 4) as f64;
        })
        .unwrap();
        let r = hdbscan(&field, 5).unwrap();
        let l = r.labels.labels();
        assert!(l[..20].iter().all(|&x| x == 2));
        assert!(l[20..].iter().all(|&x| x == 3));
    }

    #[test]
    fn small_blob_is_noise() {
        let field = EmbeddingField::from_pixels(1, 33, 1, |i, px| {
            px[0] = match i {
                0..15 => 0.01 * i as f64,
                15..30 => 20.0 + 0.01 * i as f64,
                _ => 50.0 + 0.01 * i as f64,
            }
        })
        .unwrap();
        let r = hdbscan(&field, 10).unwrap();
        let l = r.labels.labels();
        assert!(l[30..].iter().all(|&x| x == UNLABELED));
        assert!(l[..15].iter().all(|&x| x == 2));
        assert!(l[15..30].iter().all(|&x| x == 3));
    }

    #[test]
    fn errors() {
        let field = EmbeddingField::zeros(2, 2, 1).unwrap();
        assert!(matches!(hdbscan(&field, 1), Err(Error::Domain(_))));
        assert!(matches!(hdbscan(&field, 5), Err(Error::TooFewPixels { needed: 5, got: 4 })));
    }
}
