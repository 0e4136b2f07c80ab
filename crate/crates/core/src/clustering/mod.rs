//! From embedding fields to instance label images.

mod hdbscan;
mod meanshift;
mod mws;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

pub use self::hdbscan::{hdbscan, CondensedRow, HdbscanResult};
pub use self::meanshift::{bin_seeds, mean_shift, MeanShiftParams, MeanShiftResult};
pub use self::mws::{
    axis_offsets, build_affinity_graph, default_offsets, edge_weight, mutex_watershed,
    mutex_watershed_partition, processing_order, AffinityGraph, Edge, EdgeKind,
};

use crate::error::{Error, Result};
use crate::losses::dist_sq;
use crate::types::{EmbeddingField, LabelImage, RngSeed, BACKGROUND, FIRST_INSTANCE, UNLABELED};

/// Labels `2, 3, ...` in order of first appearance of each key.
pub(crate) fn first_visit_labels<K: Copy + Ord>(keys: &[K]) -> (Vec<u64>, Vec<K>) {
    let mut ids: BTreeMap<K, u64> = BTreeMap::new();
    let mut order = Vec::new();
    let labels = keys
        .iter()
        .map(|&k| {
            *ids.entry(k).or_insert_with(|| {
                order.push(k);
                FIRST_INSTANCE + order.len() as u64 - 1
            })
        })
        .collect();
    (labels, order)
}

/// Renumbers instances to `2, 3, ...` in row-major first-visit order; `0`
/// and `1` are kept.
pub fn relabel_sequential(labels: &LabelImage) -> LabelImage {
    let mut ids: BTreeMap<u64, u64> = BTreeMap::new();
    let out = labels
        .labels()
        .iter()
        .map(|&l| {
            if l < FIRST_INSTANCE {
                return l;
            }
            let next = FIRST_INSTANCE + ids.len() as u64;
            *ids.entry(l).or_insert(next)
        })
        .collect();
    LabelImage::new(labels.height(), labels.width(), out).expect("same grid")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterMethod {
    MeanShift,
    Hdbscan,
    Consistency,
    Mws,
}

impl FromStr for ClusterMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "meanshift" => Ok(Self::MeanShift),
            "hdbscan" => Ok(Self::Hdbscan),
            "consistency" => Ok(Self::Consistency),
            "mws" => Ok(Self::Mws),
            other => Err(Error::InvalidConfig(format!("unknown clustering method {other:?}"))),
        }
    }
}

impl fmt::Display for ClusterMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MeanShift => "meanshift",
            Self::Hdbscan => "hdbscan",
            Self::Consistency => "consistency",
            Self::Mws => "mws",
        })
    }
}

/// Per-object outcome of the consistency filter.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectConsistency {
    pub label: u64,
    pub ious: Vec<f64>,
    pub median_iou: f64,
    pub kept: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyResult {
    pub labels: LabelImage,
    pub objects: Vec<ObjectConsistency>,
    pub converged: bool,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Mean-shift on `field_f`, then drops every object whose hard masks in
/// `field_g`, taken around `m_anchors` of its pixels, have median IoU with
/// the object at or below `t_iou`. Dropped pixels become 0.
pub fn consistency_clustering(
    field_f: &EmbeddingField,
    field_g: &EmbeddingField,
    params: &MeanShiftParams,
    m_anchors: usize,
    t_iou: f64,
    seed: RngSeed,
) -> Result<ConsistencyResult> {
    field_f.check_same_shape(field_g, "consistency clustering fields")?;
    if !(t_iou > 0.0 && t_iou < 1.0) {
        return Err(Error::Domain(format!("t_iou must lie in (0, 1), got {t_iou}")));
    }
    if m_anchors == 0 {
        return Err(Error::Domain("m_anchors must be >= 1".into()));
    }
    let ms = mean_shift(field_f, params)?;
    let radius_sq = params.bandwidth * params.bandwidth;
    let groups = ms.labels.groups();
    let mut objects = Vec::new();
    let mut out = ms.labels.labels().to_vec();
    for (&label, pixels) in &groups {
        let mut rng = seed.stream(label);
        let anchors: Vec<usize> =
            pixels.choose_multiple(&mut rng, m_anchors.min(pixels.len())).copied().collect();
        let mut ious: Vec<f64> = anchors
            .iter()
            .map(|&a| {
                let anchor = field_g.pixel(a);
                let (mut inter, mut mask) = (0usize, 0usize);
                for i in 0..field_g.num_pixels() {
                    if dist_sq(field_g.pixel(i), anchor) < radius_sq {
                        mask += 1;
                        if ms.labels.get(i) == label {
                            inter += 1;
                        }
                    }
                }
                inter as f64 / (mask + pixels.len() - inter) as f64
            })
            .collect();
        let reported = ious.clone();
        let med = median(&mut ious);
        let kept = med > t_iou;
        if !kept {
            for &p in pixels {
                out[p] = UNLABELED;
            }
        }
        objects.push(ObjectConsistency { label, ious: reported, median_iou: med, kept });
    }
    Ok(ConsistencyResult {
        labels: LabelImage::new(field_f.height(), field_f.width(), out)?,
        objects,
        converged: ms.converged,
    })
}

fn instance_means(labels: &LabelImage, field: &EmbeddingField) -> BTreeMap<u64, Vec<f64>> {
    let mut sums: BTreeMap<u64, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, &l) in labels.labels().iter().enumerate() {
        if l >= FIRST_INSTANCE {
            let e = sums.entry(l).or_insert_with(|| (vec![0.0; field.channels()], 0));
            e.0.iter_mut().zip(field.pixel(i)).for_each(|(s, v)| *s += v);
            e.1 += 1;
        }
    }
    sums.into_iter()
        .map(|(l, (s, n))| (l, s.into_iter().map(|v| v / n as f64).collect()))
        .collect()
}

/// Merges the closest pair of instances while their mean embeddings are
/// closer than `threshold`. The smaller id survives.
pub fn merge_close_instances(
    labels: &LabelImage,
    field: &EmbeddingField,
    threshold: f64,
) -> Result<LabelImage> {
    if !labels.matches_field(field) {
        return Err(Error::ShapeMismatch("labels do not match the field grid".into()));
    }
    let mut current = labels.labels().to_vec();
    loop {
        let img = LabelImage::new(labels.height(), labels.width(), current.clone())?;
        let means: Vec<(u64, Vec<f64>)> = instance_means(&img, field).into_iter().collect();
        let mut best: Option<(f64, u64, u64)> = None;
        for (i, (a, ma)) in means.iter().enumerate() {
            for (b, mb) in &means[i + 1..] {
                let d = dist_sq(ma, mb).sqrt();
                if d < threshold && best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, *a, *b));
                }
            }
        }
        match best {
            Some((_, keep, gone)) => current.iter_mut().for_each(|l| {
                if *l == gone {
                    *l = keep
                }
            }),
            None => return Ok(img),
        }
    }
}

/// Assigns each 0-labeled pixel to the instance with the nearest mean
/// embedding; ties go to the lowest id.
pub fn fill_noise(labels: &LabelImage, field: &EmbeddingField) -> Result<LabelImage> {
    if !labels.matches_field(field) {
        return Err(Error::ShapeMismatch("labels do not match the field grid".into()));
    }
    let means = instance_means(labels, field);
    if means.is_empty() {
        return Ok(labels.clone());
    }
    let out = labels
        .labels()
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if l != UNLABELED {
                return l;
            }
            let mut best = (f64::INFINITY, l);
            for (&id, m) in &means {
                let d = dist_sq(field.pixel(i), m);
                if d < best.0 {
                    best = (d, id);
                }
            }
            best.1
        })
        .collect();
    LabelImage::new(labels.height(), labels.width(), out)
}

/// Relabels the largest instance as background; ties go to the lowest id.
pub fn largest_as_background(labels: &LabelImage) -> LabelImage {
    let groups = labels.groups();
    let largest = groups
        .iter()
        .filter(|(&l, _)| l >= FIRST_INSTANCE)
        .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(a.0)))
        .map(|(&l, _)| l);
    let out = labels
        .labels()
        .iter()
        .map(|&l| if Some(l) == largest { BACKGROUND } else { l })
        .collect();
    LabelImage::new(labels.height(), labels.width(), out).expect("same grid")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocessParams {
    pub merge_delta_d: Option<f64>,
    pub fill_noise: bool,
    /// Treat the largest cluster as background.
    pub largest_is_background: bool,
}

/// Merge, fill, then background relabeling, followed by sequential ids.
pub fn postprocess(
    labels: &LabelImage,
    field: &EmbeddingField,
    params: &PostprocessParams,
) -> Result<LabelImage> {
    let mut out = labels.clone();
    if let Some(t) = params.merge_delta_d {
        out = merge_close_instances(&out, field, t)?;
    }
    if params.fill_noise {
        out = fill_noise(&out, field)?;
    }
    if params.largest_is_background {
        out = largest_as_background(&out);
    }
    Ok(relabel_sequential(&out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterParams {
    pub method: ClusterMethod,
    pub bandwidth: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub min_size: usize,
    pub t_iou: f64,
    pub m_anchors: usize,
    /// Strides of the repulsive offsets along both axes.
    pub offsets: Vec<i64>,
    pub delta_d: f64,
    pub postprocess: PostprocessParams,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            method: ClusterMethod::Mws,
            bandwidth: 0.5,
            max_iters: 500,
            tol: 1e-4,
            min_size: 200,
            t_iou: 0.6,
            m_anchors: 5,
            offsets: vec![3, 9, 27],
            delta_d: 2.0,
            postprocess: PostprocessParams::default(),
        }
    }
}

impl ClusterParams {
    pub fn mean_shift(&self) -> MeanShiftParams {
        MeanShiftParams { bandwidth: self.bandwidth, max_iters: self.max_iters, tol: self.tol }
    }
}

/// Runs the configured method and post-processing.
pub fn cluster(
    field_f: &EmbeddingField,
    field_g: Option<&EmbeddingField>,
    params: &ClusterParams,
    seed: RngSeed,
) -> Result<LabelImage> {
    let raw = match params.method {
        ClusterMethod::MeanShift => mean_shift(field_f, &params.mean_shift())?.labels,
        ClusterMethod::Hdbscan => hdbscan(field_f, params.min_size)?.labels,
        ClusterMethod::Consistency => {
            let g = field_g.ok_or_else(|| {
                Error::InvalidConfig("consistency clustering needs a shadow field".into())
            })?;
            consistency_clustering(field_f, g, &params.mean_shift(), params.m_anchors, params.t_iou, seed)?
                .labels
        }
        ClusterMethod::Mws => {
            let graph =
                build_affinity_graph(field_f, &axis_offsets(&params.offsets), params.delta_d)?;
            mutex_watershed(&graph)?
        }
    };
    postprocess(&raw, field_f, &params.postprocess)
}
