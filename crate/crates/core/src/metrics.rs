//! Segmentation quality measures.
//!
//! Labels `0` and `1` are never treated as objects. Per-object scores are
//! summed in sorted order so every metric is exactly invariant under a
//! relabeling of either input.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::types::{LabelImage, FIRST_INSTANCE};

/// `0.50, 0.55, ..., 0.95`.
pub fn default_thresholds() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

/// Overlap counts between the objects of two label images.
struct Overlap {
    pred_sizes: BTreeMap<u64, u64>,
    gt_sizes: BTreeMap<u64, u64>,
    joint: BTreeMap<(u64, u64), u64>,
}

impl Overlap {
    fn objects(pred: &LabelImage, gt: &LabelImage) -> Result<Self> {
        check_shapes(pred, gt)?;
        let mut o = Overlap {
            pred_sizes: BTreeMap::new(),
            gt_sizes: BTreeMap::new(),
            joint: BTreeMap::new(),
        };
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            let (p_obj, g_obj) = (p >= FIRST_INSTANCE, g >= FIRST_INSTANCE);
            if p_obj {
                *o.pred_sizes.entry(p).or_default() += 1;
            }
            if g_obj {
                *o.gt_sizes.entry(g).or_default() += 1;
            }
            if p_obj && g_obj {
                *o.joint.entry((p, g)).or_default() += 1;
            }
        }
        Ok(o)
    }
}

fn check_shapes(pred: &LabelImage, gt: &LabelImage) -> Result<()> {
    pred.check_same_shape(gt)
}

fn sorted_mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

fn best_dice(
    sizes_a: &BTreeMap<u64, u64>,
    sizes_b: &BTreeMap<u64, u64>,
    joint: impl Iterator<Item = (u64, u64, u64)>,
) -> f64 {
    let mut best: BTreeMap<u64, f64> = sizes_a.keys().map(|&k| (k, 0.0)).collect();
    for (a, b, n) in joint {
        let dice = 2.0 * n as f64 / (sizes_a[&a] + sizes_b[&b]) as f64;
        let slot = best.get_mut(&a).expect("object present");
        *slot = slot.max(dice);
    }
    sorted_mean(best.into_values().collect())
}

/// Symmetric best Dice over objects (labels `>= 2`).
pub fn sbd(pred: &LabelImage, gt: &LabelImage) -> Result<f64> {
    let o = Overlap::objects(pred, gt)?;
    match (o.pred_sizes.is_empty(), o.gt_sizes.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let pg = best_dice(&o.pred_sizes, &o.gt_sizes, o.joint.iter().map(|(&(p, g), &n)| (p, g, n)));
    let gp = best_dice(&o.gt_sizes, &o.pred_sizes, o.joint.iter().map(|(&(p, g), &n)| (g, p, n)));
    Ok(pg.min(gp))
}

/// Absolute difference in object counts.
pub fn abs_dic(pred: &LabelImage, gt: &LabelImage) -> Result<f64> {
    check_shapes(pred, gt)?;
    Ok((pred.num_instances() as f64 - gt.num_instances() as f64).abs())
}

/// Adapted Rand error `1 - F1` of pair precision and recall, over pixels
/// whose ground-truth label is an object. Every prediction label, including
/// `0`, counts as a segment.
pub fn arand_error(pred: &LabelImage, gt: &LabelImage) -> Result<f64> {
    check_shapes(pred, gt)?;
    let mut joint: BTreeMap<(u64, u64), u64> = BTreeMap::new();
    let mut rows: BTreeMap<u64, u64> = BTreeMap::new();
    let mut cols: BTreeMap<u64, u64> = BTreeMap::new();
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        if g >= FIRST_INSTANCE {
            *joint.entry((p, g)).or_default() += 1;
            *rows.entry(p).or_default() += 1;
            *cols.entry(g).or_default() += 1;
        }
    }
    if cols.is_empty() {
        return Err(Error::EmptyForeground);
    }
    let sq = |m: &mut dyn Iterator<Item = u64>| m.map(|n| (n as u128) * (n as u128)).sum::<u128>();
    let sum_ij = sq(&mut joint.values().copied());
    let sum_a = sq(&mut rows.values().copied());
    let sum_b = sq(&mut cols.values().copied());
    let precision = sum_ij as f64 / sum_a as f64;
    let recall = sum_ij as f64 / sum_b as f64;
    Ok(1.0 - 2.0 * precision * recall / (precision + recall))
}

/// Matched pair from the one-to-one greedy assignment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IouEntry {
    pub pred: u64,
    pub gt: u64,
    pub iou: f64,
}

/// IoU of every overlapping object pair, sorted by `(pred, gt)`.
pub fn iou_table(pred: &LabelImage, gt: &LabelImage) -> Result<Vec<IouEntry>> {
    let o = Overlap::objects(pred, gt)?;
    Ok(o
        .joint
        .iter()
        .map(|(&(p, g), &n)| IouEntry {
            pred: p,
            gt: g,
            iou: n as f64 / (o.pred_sizes[&p] + o.gt_sizes[&g] - n) as f64,
        })
        .collect())
}

/// Greedy one-to-one matching by descending IoU; ties go to the smaller
/// `(pred, gt)` key.
pub fn greedy_matching(table: &[IouEntry]) -> Vec<IouEntry> {
    let mut order: Vec<&IouEntry> = table.iter().collect();
    order.sort_by(|a, b| b.iou.total_cmp(&a.iou).then((a.pred, a.gt).cmp(&(b.pred, b.gt))));
    let mut used_p = std::collections::BTreeSet::new();
    let mut used_g = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for e in order {
        if !used_p.contains(&e.pred) && !used_g.contains(&e.gt) {
            used_p.insert(e.pred);
            used_g.insert(e.gt);
            out.push(*e);
        }
    }
    out
}

/// `TP / (TP + FP + FN)` at each threshold, and their mean.
pub fn average_precision(
    pred: &LabelImage,
    gt: &LabelImage,
    thresholds: &[f64],
) -> Result<(Vec<(f64, f64)>, f64)> {
    if thresholds.is_empty() {
        return Err(Error::Domain("at least one IoU threshold is required".into()));
    }
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(Error::Domain(format!("IoU thresholds must lie in (0, 1), got {t}")));
    }
    let table = iou_table(pred, gt)?;
    let matches = greedy_matching(&table);
    let n_pred = pred.num_instances();
    let n_gt = gt.num_instances();
    let per: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&tau| {
            if n_pred == 0 && n_gt == 0 {
                return (tau, 1.0);
            }
            let tp = matches.iter().filter(|m| m.iou >= tau).count();
            let fp = n_pred - tp;
            let fn_ = n_gt - tp;
            (tau, tp as f64 / (tp + fp + fn_) as f64)
        })
        .collect();
    let map = per.iter().map(|&(_, ap)| ap).sum::<f64>() / per.len() as f64;
    Ok((per, map))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub sbd: f64,
    pub abs_dic: f64,
    pub arand: f64,
    pub ap_per_threshold: Vec<(f64, f64)>,
    pub map_score: f64,
    pub iou_table: Vec<IouEntry>,
}

impl MetricsReport {
    /// AP at the threshold closest to `tau`.
    pub fn ap_at(&self, tau: f64) -> Option<f64> {
        self.ap_per_threshold.iter().find(|(t, _)| (t - tau).abs() < 1e-12).map(|&(_, ap)| ap)
    }
}

pub fn evaluate(pred: &LabelImage, gt: &LabelImage, thresholds: &[f64]) -> Result<MetricsReport> {
    let (ap_per_threshold, map_score) = average_precision(pred, gt, thresholds)?;
    Ok(MetricsReport {
        sbd: sbd(pred, gt)?,
        abs_dic: abs_dic(pred, gt)?,
        arand: arand_error(pred, gt)?,
        ap_per_threshold,
        map_score,
        iou_table: iou_table(pred, gt)?,
    })
}
