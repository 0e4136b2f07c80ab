use std::collections::BTreeMap;

use rayon::prelude::*;

use super::first_visit_labels;
use crate::error::{Error, Result};
use crate::losses::dist_sq;
use crate::types::{EmbeddingField, LabelImage};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanShiftParams {
    pub bandwidth: f64,
    pub max_iters: usize,
    /// A seed stops moving once its shift is below this.
    pub tol: f64,
}

impl Default for MeanShiftParams {
    fn default() -> Self {
        Self { bandwidth: 0.5, max_iters: 500, tol: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeanShiftResult {
    pub labels: LabelImage,
    /// Surviving modes, indexed by `label - 2`.
    pub modes: Vec<Vec<f64>>,
    /// False when some seed hit `max_iters` before settling.
    pub converged: bool,
}

/// One seed per occupied grid cell of side `bin_size`, placed at the
/// centroid of the cell's points, in lexicographic cell order.
pub fn bin_seeds(field: &EmbeddingField, bin_size: f64) -> Vec<Vec<f64>> {
    let mut cells: BTreeMap<Vec<i64>, (Vec<f64>, usize)> = BTreeMap::new();
    for i in 0..field.num_pixels() {
        let x = field.pixel(i);
        let key = x.iter().map(|v| (v / bin_size).round() as i64).collect();
        let cell = cells.entry(key).or_insert_with(|| (vec![0.0; x.len()], 0));
        cell.0.iter_mut().zip(x).for_each(|(s, v)| *s += v);
        cell.1 += 1;
    }
    cells.into_values().map(|(s, n)| s.into_iter().map(|v| v / n as f64).collect()).collect()
}

struct Climb {
    mode: Vec<f64>,
    support: usize,
    converged: bool,
}

fn climb(field: &EmbeddingField, seed: &[f64], p: &MeanShiftParams) -> Option<Climb> {
    let radius_sq = p.bandwidth * p.bandwidth;
    let c = field.channels();
    let mut mean = seed.to_vec();
    let mut support = 0;
    for _ in 0..p.max_iters {
        let mut sum = vec![0.0; c];
        let mut count = 0usize;
        for i in 0..field.num_pixels() {
            let x = field.pixel(i);
            if dist_sq(x, &mean) <= radius_sq {
                sum.iter_mut().zip(x).for_each(|(s, v)| *s += v);
                count += 1;
            }
        }
        if count == 0 {
            return None;
        }
        let next: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let shift = dist_sq(&next, &mean).sqrt();
        mean = next;
        support = count;
        if shift < p.tol {
            return Some(Climb { mode: mean, support, converged: true });
        }
    }
    Some(Climb { mode: mean, support, converged: false })
}

/// Flat-kernel mean-shift over pixel embeddings.
///
/// Seeds come from a grid of side `bandwidth`. Converged modes are visited
/// by decreasing support and a mode within `bandwidth` of a stronger one is
/// dropped. Pixels take the nearest surviving mode; labels start at 2 in
/// row-major first-visit order.
pub fn mean_shift(field: &EmbeddingField, params: &MeanShiftParams) -> Result<MeanShiftResult> {
    if !(params.bandwidth.is_finite() && params.bandwidth > 0.0) {
        return Err(Error::Domain(format!("bandwidth must be > 0, got {}", params.bandwidth)));
    }
    if params.max_iters == 0 {
        return Err(Error::Domain("max_iters must be >= 1".into()));
    }
    if field.num_pixels() == 0 {
        return Err(Error::TooFewPixels { needed: 1, got: 0 });
    }
    let seeds = bin_seeds(field, params.bandwidth);
    let climbs: Vec<Option<Climb>> =
        seeds.par_iter().map(|s| climb(field, s, params)).collect();
    let converged = climbs.iter().flatten().all(|c| c.converged);
    if !converged {
        log::warn!("mean-shift: some seeds hit max_iters = {}", params.max_iters);
    }
    let mut found: Vec<Climb> = climbs.into_iter().flatten().collect();
    // stable: equal support keeps seed order
    found.sort_by_key(|c| std::cmp::Reverse(c.support));
    let radius_sq = params.bandwidth * params.bandwidth;
    let mut kept: Vec<Vec<f64>> = Vec::new();
    for c in found {
        if kept.iter().all(|k| dist_sq(k, &c.mode) > radius_sq) {
            kept.push(c.mode);
        }
    }

    let nearest: Vec<usize> = (0..field.num_pixels())
        .into_par_iter()
        .map(|i| {
            let x = field.pixel(i);
            let mut best = (f64::INFINITY, 0);
            for (k, m) in kept.iter().enumerate() {
                let d = dist_sq(x, m);
                if d < best.0 {
                    best = (d, k);
                }
            }
            best.1
        })
        .collect();
    let (labels, order) = first_visit_labels(&nearest);
    let modes = order.into_iter().map(|k| kept[k].clone()).collect();
    Ok(MeanShiftResult {
        labels: LabelImage::new(field.height(), field.width(), labels)?,
        modes,
        converged,
    })
}
