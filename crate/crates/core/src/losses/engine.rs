//! Forward evaluation with optional gradient accumulation.
//!
//! Gradients are accumulated in two places: directly on pixel embeddings
//! and on cluster means. Mean gradients are spread over the member pixels
//! at the end since `d mu_k / d e_i = 1/N_k`.

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{dist_sq, object_labels, AnchorSource, GaussianKernel, LossBreakdown, LossInputs};
use super::{ObjectAnchor, MIN_DISTANCE};
use crate::error::{Error, Result};
use crate::types::{EmbeddingField, LabelImage, LossConfig, Supervision, BACKGROUND, UNLABELED};

/// Smallest distance of any hinge argument (or norm argument) to its kink.
/// Gradient checks skip configurations where this is tiny.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Diagnostics {
    pub min_hinge_gap: f64,
}

#[derive(Default)]
pub(crate) struct Gaps(Option<f64>);

impl Gaps {
    fn tracking() -> Self {
        Gaps(Some(f64::INFINITY))
    }

    #[inline]
    fn note(&mut self, arg: f64) {
        if let Some(g) = self.0.as_mut() {
            *g = g.min(arg.abs());
        }
    }
}

pub(crate) struct Clusters {
    pub labels: Vec<u64>,
    pub members: Vec<Vec<usize>>,
    pub means: Vec<Vec<f64>>,
    index: BTreeMap<u64, usize>,
}

impl Clusters {
    /// Every label `>= 1` present in `labels`.
    pub fn build(field: &EmbeddingField, labels: &LabelImage) -> Result<Self> {
        let d = field.channels();
        let mut out = Clusters {
            labels: Vec::new(),
            members: Vec::new(),
            means: Vec::new(),
            index: BTreeMap::new(),
        };
        for (label, pixels) in labels.groups() {
            if label < BACKGROUND {
                continue;
            }
            let mut mean = vec![0.0; d];
            for &i in &pixels {
                for (m, v) in mean.iter_mut().zip(field.pixel(i)) {
                    *m += v;
                }
            }
            let n = pixels.len() as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            out.index.insert(label, out.labels.len());
            out.labels.push(label);
            out.members.push(pixels);
            out.means.push(mean);
        }
        if out.labels.is_empty() {
            return Err(Error::NoLabeledCluster);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn get(&self, label: u64) -> Option<usize> {
        self.index.get(&label).copied()
    }
}

/// Gradient accumulator: per-pixel embedding gradients plus per-cluster
/// mean gradients. `weight` scales everything added.
pub(crate) struct Grads<'a> {
    pixel: &'a mut [f64],
    mean: Vec<Vec<f64>>,
    d: usize,
    weight: f64,
}

impl<'a> Grads<'a> {
    fn new(pixel: &'a mut [f64], d: usize, clusters: usize) -> Self {
        pixel.iter_mut().for_each(|v| *v = 0.0);
        Self { pixel, mean: vec![vec![0.0; d]; clusters], d, weight: 1.0 }
    }

    #[inline]
    fn add_pixel(&mut self, i: usize, scale: f64, dir: &[f64]) {
        let s = self.weight * scale;
        for (g, v) in self.pixel[i * self.d..(i + 1) * self.d].iter_mut().zip(dir) {
            *g += s * v;
        }
    }

    #[inline]
    fn add_mean(&mut self, k: usize, scale: f64, dir: &[f64]) {
        let s = self.weight * scale;
        for (g, v) in self.mean[k].iter_mut().zip(dir) {
            *g += s * v;
        }
    }

    fn finish(self, clusters: &Clusters) {
        for (members, g_mu) in clusters.members.iter().zip(&self.mean) {
            let n = members.len() as f64;
            for &i in members {
                for (g, gm) in self.pixel[i * self.d..(i + 1) * self.d].iter_mut().zip(g_mu) {
                    *g += gm / n;
                }
            }
        }
    }
}

#[inline]
fn diff(a: &[f64], b: &[f64], out: &mut [f64]) {
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o = x - y;
    }
}

#[inline]
fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn variance_term(
    field: &EmbeddingField,
    clusters: &Clusters,
    config: &LossConfig,
    mut grads: Option<&mut Grads<'_>>,
    gaps: &mut Gaps,
) -> f64 {
    let d = field.channels();
    let c = clusters.len() as f64;
    let mut total = 0.0;
    let mut delta = vec![0.0; d];
    for (k, members) in clusters.members.iter().enumerate() {
        let mu = &clusters.means[k];
        let n_k = members.len() as f64;
        let mut acc = 0.0;
        for &i in members {
            diff(field.pixel(i), mu, &mut delta);
            let dist = norm(&delta);
            let h = dist - config.delta_v;
            gaps.note(h);
            if h > 0.0 {
                acc += h * h;
                if let Some(g) = grads.as_deref_mut() {
                    if dist >= MIN_DISTANCE {
                        // d/de_i [h^2] = 2h (e_i - mu)/|e_i - mu|; the mean gets the opposite
                        let scale = 2.0 * h / dist / (c * n_k);
                        g.add_pixel(i, scale, &delta);
                        g.add_mean(k, -scale, &delta);
                    }
                }
            }
        }
        total += acc / n_k;
    }
    total / c
}

pub(crate) fn distance_term(
    clusters: &Clusters,
    config: &LossConfig,
    mut grads: Option<&mut Grads<'_>>,
    gaps: &mut Gaps,
) -> f64 {
    let c = clusters.len();
    if c < 2 {
        return 0.0;
    }
    let d = clusters.means[0].len();
    let margin = 2.0 * config.delta_d;
    let norm_c = (c * c) as f64;
    let mut total = 0.0;
    let mut delta = vec![0.0; d];
    // ordered pairs a != b, so each unordered pair counts twice
    for a in 0..c {
        for b in 0..c {
            if a == b {
                continue;
            }
            diff(&clusters.means[a], &clusters.means[b], &mut delta);
            let dist = norm(&delta);
            let h = margin - dist;
            gaps.note(h);
            gaps.note(dist);
            if h > 0.0 {
                total += h * h;
                if let Some(g) = grads.as_deref_mut() {
                    if dist >= MIN_DISTANCE {
                        let scale = -2.0 * h / dist / norm_c;
                        g.add_mean(a, scale, &delta);
                        g.add_mean(b, -scale, &delta);
                    }
                }
            }
        }
    }
    total / norm_c
}

pub(crate) fn regularization_term(clusters: &Clusters, mut grads: Option<&mut Grads<'_>>) -> f64 {
    let c = clusters.len() as f64;
    let mut total = 0.0;
    for (k, mu) in clusters.means.iter().enumerate() {
        let n = norm(mu);
        total += n;
        if let Some(g) = grads.as_deref_mut() {
            if n >= MIN_DISTANCE {
                g.add_mean(k, 1.0 / (n * c), mu);
            }
        }
    }
    total / c
}

fn resolve_anchor(
    field: &EmbeddingField,
    clusters: &Clusters,
    anchor: &ObjectAnchor,
) -> Result<Vec<f64>> {
    match &anchor.source {
        AnchorSource::Pixel(i) => {
            if *i >= field.num_pixels() {
                return Err(Error::Domain(format!("anchor pixel {i} is out of bounds")));
            }
            Ok(field.pixel(*i).to_vec())
        }
        AnchorSource::Mean => {
            let k = clusters.get(anchor.label).ok_or(Error::EmptyInstance(anchor.label))?;
            Ok(clusters.means[k].clone())
        }
        AnchorSource::Fixed(v) => {
            if v.len() != field.channels() {
                return Err(Error::ShapeMismatch(format!(
                    "anchor has {} components, field has {} channels",
                    v.len(),
                    field.channels()
                )));
            }
            Ok(v.clone())
        }
    }
}

/// Checks that `anchors` name each object label exactly once.
fn check_anchor_labels(
    labels: &LabelImage,
    anchors: &[ObjectAnchor],
    config: &LossConfig,
) -> Result<()> {
    let expected = object_labels(labels, config);
    if anchors.len() != expected.len() {
        return Err(Error::AnchorCountMismatch { expected: expected.len(), got: anchors.len() });
    }
    let mut got: Vec<u64> = anchors.iter().map(|a| a.label).collect();
    got.sort_unstable();
    for (g, e) in got.iter().zip(&expected) {
        if g != e {
            if !labels.has_label(*g) {
                return Err(Error::EmptyInstance(*g));
            }
            return Err(Error::InvalidLabel(format!(
                "anchor labels {got:?} do not match object labels {expected:?}"
            )));
        }
    }
    Ok(())
}

fn route_anchor_grad(
    anchor: &ObjectAnchor,
    clusters: &Clusters,
    anchor_grad: &[f64],
    grads: &mut Grads<'_>,
) {
    match &anchor.source {
        AnchorSource::Pixel(i) => grads.add_pixel(*i, 1.0, anchor_grad),
        AnchorSource::Mean => {
            if let Some(k) = clusters.get(anchor.label) {
                grads.add_mean(k, 1.0, anchor_grad);
            }
        }
        AnchorSource::Fixed(_) => {}
    }
}

pub(crate) fn object_term(
    field: &EmbeddingField,
    labels: &LabelImage,
    clusters: &Clusters,
    anchors: &[ObjectAnchor],
    config: &LossConfig,
    kernel: &GaussianKernel,
    mut grads: Option<&mut Grads<'_>>,
) -> Result<f64> {
    check_anchor_labels(labels, anchors, config)?;
    if anchors.is_empty() {
        return Ok(0.0);
    }
    let n = field.num_pixels();
    let d = field.channels();
    let c = anchors.len() as f64;
    let inv_sigma_sq = 1.0 / kernel.sigma_sq();
    let mut s = vec![0.0; n];
    let mut delta = vec![0.0; d];
    let mut anchor_grad = vec![0.0; d];
    let mut total = 0.0;
    for anchor in anchors {
        let a = resolve_anchor(field, clusters, anchor)?;
        let (mut inter, mut s_sq, mut g_sq) = (0.0, 0.0, 0.0);
        for (i, si) in s.iter_mut().enumerate() {
            *si = kernel.value(dist_sq(field.pixel(i), &a));
            s_sq += *si * *si;
            if labels.get(i) == anchor.label {
                inter += *si;
                g_sq += 1.0;
            }
        }
        let denom = s_sq + g_sq;
        let dice = if denom == 0.0 { 1.0 } else { 2.0 * inter / denom };
        total += 1.0 - dice;

        let Some(g) = grads.as_deref_mut() else { continue };
        if denom == 0.0 {
            continue;
        }
        anchor_grad.iter_mut().for_each(|v| *v = 0.0);
        let base = 2.0 * inter / (denom * denom);
        for (i, &si) in s.iter().enumerate() {
            let gt = if labels.get(i) == anchor.label { 1.0 } else { 0.0 };
            // dL/ds_i for L = (1 - D)/C with D = 2 sum(s g) / (sum s^2 + sum g^2)
            let dl_ds = -(2.0 * gt / denom - base * 2.0 * si) / c;
            if dl_ds == 0.0 || si == 0.0 {
                continue;
            }
            diff(field.pixel(i), &a, &mut delta);
            // ds_i/de_i = -s_i (e_i - A)/sigma^2 and ds_i/dA = -ds_i/de_i
            let scale = -dl_ds * si * inv_sigma_sq;
            g.add_pixel(i, scale, &delta);
            for (ag, v) in anchor_grad.iter_mut().zip(&delta) {
                *ag -= scale * v;
            }
        }
        route_anchor_grad(anchor, clusters, &anchor_grad, g);
    }
    Ok(total / c)
}

pub(crate) fn unlabeled_push_term(
    field: &EmbeddingField,
    labels: &LabelImage,
    clusters: &Clusters,
    config: &LossConfig,
    mut grads: Option<&mut Grads<'_>>,
    gaps: &mut Gaps,
) -> f64 {
    let unlabeled: Vec<usize> = labels
        .labels()
        .iter()
        .enumerate()
        .filter_map(|(i, &l)| (l == UNLABELED).then_some(i))
        .collect();
    if unlabeled.is_empty() {
        return 0.0;
    }
    let d = field.channels();
    let c = clusters.len() as f64;
    let n_u = unlabeled.len() as f64;
    let mut delta = vec![0.0; d];
    let mut total = 0.0;
    for (k, mu) in clusters.means.iter().enumerate() {
        let mut acc = 0.0;
        for &i in &unlabeled {
            diff(field.pixel(i), mu, &mut delta);
            let dist = norm(&delta);
            let h = config.delta_d - dist;
            gaps.note(h);
            gaps.note(dist);
            if h > 0.0 {
                acc += h * h;
                if let Some(g) = grads.as_deref_mut() {
                    if dist >= MIN_DISTANCE {
                        let scale = -2.0 * h / dist / (c * n_u);
                        g.add_pixel(i, scale, &delta);
                        g.add_mean(k, -scale, &delta);
                    }
                }
            }
        }
        total += acc / n_u;
    }
    total / c
}

pub(crate) fn consistency_term(
    field_f: &EmbeddingField,
    field_g: &EmbeddingField,
    anchors: &[usize],
    kernel: &GaussianKernel,
    mut grads: Option<&mut Grads<'_>>,
) -> Result<f64> {
    if anchors.is_empty() {
        return Err(Error::EmptyAnchorSet);
    }
    let n = field_f.num_pixels();
    let d = field_f.channels();
    let k_count = anchors.len() as f64;
    let inv_sigma_sq = 1.0 / kernel.sigma_sq();
    let mut sf = vec![0.0; n];
    let mut sg = vec![0.0; n];
    let mut delta = vec![0.0; d];
    let mut anchor_grad = vec![0.0; d];
    let mut total = 0.0;
    for &p in anchors {
        if p >= n {
            return Err(Error::Domain(format!("anchor pixel {p} is out of bounds")));
        }
        let af = field_f.pixel(p);
        let ag = field_g.pixel(p);
        sf.par_iter_mut().zip(sg.par_iter_mut()).enumerate().for_each(|(i, (vf, vg))| {
            *vf = kernel.value(dist_sq(field_f.pixel(i), af));
            *vg = kernel.value(dist_sq(field_g.pixel(i), ag));
        });
        let (mut inter, mut sq_f, mut sq_g) = (0.0, 0.0, 0.0);
        for i in 0..n {
            inter += sf[i] * sg[i];
            sq_f += sf[i] * sf[i];
            sq_g += sg[i] * sg[i];
        }
        let denom = sq_f + sq_g;
        let dice = if denom == 0.0 { 1.0 } else { 2.0 * inter / denom };
        total += 1.0 - dice;

        let Some(g) = grads.as_deref_mut() else { continue };
        if denom == 0.0 {
            continue;
        }
        anchor_grad.iter_mut().for_each(|v| *v = 0.0);
        let base = 2.0 * inter / (denom * denom);
        for i in 0..n {
            let dl_ds = -(2.0 * sg[i] / denom - base * 2.0 * sf[i]) / k_count;
            if dl_ds == 0.0 || sf[i] == 0.0 {
                continue;
            }
            diff(field_f.pixel(i), af, &mut delta);
            let scale = -dl_ds * sf[i] * inv_sigma_sq;
            g.add_pixel(i, scale, &delta);
            for (a, v) in anchor_grad.iter_mut().zip(&delta) {
                *a -= scale * v;
            }
        }
        g.add_pixel(p, 1.0, &anchor_grad);
    }
    Ok(total / k_count)
}

/// Evaluates the mode's total loss, filling `grad` (flat, field layout)
/// when given.
pub(crate) fn evaluate(
    inputs: &LossInputs<'_>,
    config: &LossConfig,
    grad: Option<&mut [f64]>,
) -> Result<(LossBreakdown, Diagnostics)> {
    let field = inputs.field_f;
    let kernel = GaussianKernel::from_config(config)?;
    let clusters = Clusters::build(field, inputs.labels)?;
    let mut gaps = Gaps::tracking();
    let mut grads = grad.map(|g| Grads::new(g, field.channels(), clusters.len()));

    // a zero-weight term contributes nothing, so its gradient pass is skipped
    fn weighted<'g, 'a>(grads: &'g mut Option<Grads<'a>>, w: f64) -> Option<&'g mut Grads<'a>> {
        let g = grads.as_mut().filter(|_| w != 0.0)?;
        g.weight = w;
        Some(g)
    }

    let mut out = LossBreakdown {
        l_var: variance_term(field, &clusters, config, weighted(&mut grads, config.beta), &mut gaps),
        l_dist: distance_term(&clusters, config, weighted(&mut grads, config.alpha), &mut gaps),
        l_reg: regularization_term(&clusters, weighted(&mut grads, config.gamma)),
        l_obj: object_term(
            field,
            inputs.labels,
            &clusters,
            inputs.object_anchors,
            config,
            &kernel,
            weighted(&mut grads, config.lambda),
        )?,
        ..LossBreakdown::default()
    };
    out.total = out.single_object_total(config);

    if inputs.mode == Supervision::Sparse {
        let field_g = inputs.field_g.ok_or_else(|| {
            Error::ShapeMismatch("sparse supervision requires a shadow field".into())
        })?;
        out.l_u_dist = unlabeled_push_term(
            field,
            inputs.labels,
            &clusters,
            config,
            weighted(&mut grads, config.delta_w),
            &mut gaps,
        );
        if !inputs.unlabeled_anchors.is_empty() {
            out.l_u_con = consistency_term(
                field,
                field_g,
                inputs.unlabeled_anchors,
                &kernel,
                weighted(&mut grads, config.epsilon_w),
            )?;
        }
        out.total += config.delta_w * out.l_u_dist + config.epsilon_w * out.l_u_con;
    }

    if let Some(g) = grads {
        g.finish(&clusters);
    }
    Ok((out, Diagnostics { min_hinge_gap: gaps.0.unwrap_or(f64::INFINITY) }))
}

/// Forward-only helpers for the standalone term functions.
pub(crate) fn no_gaps() -> Gaps {
    Gaps::default()
}
