//! Anchor selection for the object and consistency terms, and random
//! object subsampling for positive-unlabeled experiments.

use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{dist_sq, object_labels, GaussianKernel, ObjectAnchor};
use crate::types::{EmbeddingField, LabelImage, LossConfig, RngSeed, UNLABELED};

/// How instance anchors are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorStrategy {
    /// First pixel of a random permutation lying within `delta_v` of the
    /// instance mean, falling back to the mean itself.
    #[default]
    NearMean,
    /// A uniformly random pixel of the instance.
    RandomPixel,
    /// Always the instance mean.
    Mean,
}

impl FromStr for AnchorStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "near-mean" => Ok(Self::NearMean),
            "random-pixel" => Ok(Self::RandomPixel),
            "mean" => Ok(Self::Mean),
            other => Err(Error::InvalidConfig(format!("unknown anchor strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSpec {
    /// Fraction of instances kept by [`subsample_objects`].
    pub p: f64,
    /// Anchors per object for consistency clustering.
    pub m_anchors_per_object: usize,
    /// Fraction of the unlabeled region that consistency anchors must cover.
    pub coverage_threshold: f64,
    pub strategy: AnchorStrategy,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        Self { p: 1.0, m_anchors_per_object: 5, coverage_threshold: 0.95, strategy: AnchorStrategy::NearMean }
    }
}

impl SamplingSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::InvalidConfig(format!("p must lie in (0, 1], got {}", self.p)));
        }
        if !(self.coverage_threshold > 0.0 && self.coverage_threshold <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "coverage_threshold must lie in (0, 1], got {}",
                self.coverage_threshold
            )));
        }
        if self.m_anchors_per_object == 0 {
            return Err(Error::InvalidConfig("m_anchors_per_object must be >= 1".into()));
        }
        Ok(())
    }
}

/// Whether an anchor belongs to a labeled object or to the unlabeled region.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorKind {
    Instance(u64),
    Unlabeled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorEntry {
    pub kind: AnchorKind,
    /// Pixel the anchor was taken from; `None` for a mean fallback.
    pub position: Option<usize>,
    pub embedding: Vec<f64>,
    /// Embedding at `position` in the shadow field, for unlabeled anchors.
    pub shadow_embedding: Option<Vec<f64>>,
}

impl AnchorEntry {
    /// The differentiable anchor reference used by the object term.
    pub fn to_object_anchor(&self) -> Option<ObjectAnchor> {
        match self.kind {
            AnchorKind::Instance(label) => Some(match self.position {
                Some(p) => ObjectAnchor::pixel(label, p),
                None => ObjectAnchor::mean(label),
            }),
            AnchorKind::Unlabeled => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnchorSet {
    pub entries: Vec<AnchorEntry>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn positions(&self) -> Vec<usize> {
        self.entries.iter().filter_map(|e| e.position).collect()
    }

    pub fn object_anchors(&self) -> Vec<ObjectAnchor> {
        self.entries.iter().filter_map(AnchorEntry::to_object_anchor).collect()
    }
}

fn mean_of(field: &EmbeddingField, pixels: &[usize]) -> Vec<f64> {
    let mut mean = vec![0.0; field.channels()];
    for &i in pixels {
        for (m, v) in mean.iter_mut().zip(field.pixel(i)) {
            *m += v;
        }
    }
    let n = pixels.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Anchor for one instance drawn with `strategy`.
pub fn sample_instance_anchor_with<R: Rng>(
    field: &EmbeddingField,
    labels: &LabelImage,
    label: u64,
    delta_v: f64,
    strategy: AnchorStrategy,
    rng: &mut R,
) -> Result<AnchorEntry> {
    let mut pixels = labels.pixels_of(label);
    if pixels.is_empty() {
        return Err(Error::EmptyInstance(label));
    }
    let mean = mean_of(field, &pixels);
    let from_pixel = |p: usize| AnchorEntry {
        kind: AnchorKind::Instance(label),
        position: Some(p),
        embedding: field.pixel(p).to_vec(),
        shadow_embedding: None,
    };
    let fallback = |mean: Vec<f64>| AnchorEntry {
        kind: AnchorKind::Instance(label),
        position: None,
        embedding: mean,
        shadow_embedding: None,
    };
    match strategy {
        AnchorStrategy::Mean => Ok(fallback(mean)),
        AnchorStrategy::RandomPixel => {
            Ok(from_pixel(*pixels.choose(rng).expect("non-empty instance")))
        }
        AnchorStrategy::NearMean => {
            pixels.shuffle(rng);
            let limit = delta_v * delta_v;
            match pixels.iter().find(|&&p| dist_sq(field.pixel(p), &mean) < limit) {
                Some(&p) => Ok(from_pixel(p)),
                None => Ok(fallback(mean)),
            }
        }
    }
}

/// Anchor for one instance: the first pixel of a seeded random permutation
/// whose embedding is within `delta_v` of the instance mean, or the mean
/// itself when there is none.
pub fn sample_instance_anchor(
    field: &EmbeddingField,
    labels: &LabelImage,
    label: u64,
    delta_v: f64,
    seed: RngSeed,
) -> Result<AnchorEntry> {
    let mut rng = seed.stream(label);
    sample_instance_anchor_with(field, labels, label, delta_v, AnchorStrategy::NearMean, &mut rng)
}

/// One anchor per object label (instances, plus background under full
/// supervision when it carries an object term).
pub fn sample_object_anchors(
    field: &EmbeddingField,
    labels: &LabelImage,
    config: &LossConfig,
    strategy: AnchorStrategy,
    seed: RngSeed,
) -> Result<AnchorSet> {
    let entries = object_labels(labels, config)
        .into_iter()
        .map(|label| {
            let mut rng = seed.stream(label);
            sample_instance_anchor_with(field, labels, label, config.delta_v, strategy, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AnchorSet { entries })
}

/// Greedily samples unlabeled pixels until the union of their hard masks
/// (kernel value `>= t` in either field) covers `coverage_threshold` of the
/// unlabeled region, or every unlabeled pixel is an anchor.
pub fn sample_unlabeled_anchors(
    field_f: &EmbeddingField,
    field_g: &EmbeddingField,
    labels: &LabelImage,
    config: &LossConfig,
    coverage_threshold: f64,
    seed: RngSeed,
) -> Result<AnchorSet> {
    field_f.check_same_shape(field_g, "unlabeled anchor fields")?;
    if !labels.matches_field(field_f) {
        return Err(Error::ShapeMismatch("labels do not match the field grid".into()));
    }
    if !(coverage_threshold > 0.0 && coverage_threshold <= 1.0) {
        return Err(Error::Domain(format!(
            "coverage threshold must lie in (0, 1], got {coverage_threshold}"
        )));
    }
    let region = labels.pixels_of(UNLABELED);
    if region.is_empty() {
        return Err(Error::EmptyUnlabeledRegion);
    }
    GaussianKernel::from_config(config)?;
    // kernel >= t exactly when the distance is at most delta_v
    let r2 = config.delta_v * config.delta_v;
    let mut rng = seed.stream(u64::MAX);
    let target = (coverage_threshold * region.len() as f64).ceil() as usize;
    let mut uncovered = region.clone();
    let mut entries = Vec::new();
    while region.len() - uncovered.len() < target && entries.len() < region.len() {
        let p = uncovered[rng.random_range(0..uncovered.len())];
        let af = field_f.pixel(p);
        let ag = field_g.pixel(p);
        uncovered.retain(|&i| dist_sq(field_f.pixel(i), af) > r2 && dist_sq(field_g.pixel(i), ag) > r2);
        entries.push(AnchorEntry {
            kind: AnchorKind::Unlabeled,
            position: Some(p),
            embedding: af.to_vec(),
            shadow_embedding: Some(ag.to_vec()),
        });
    }
    Ok(AnchorSet { entries })
}

/// Fraction of the unlabeled region covered by the anchors' hard masks.
pub fn unlabeled_coverage(
    field_f: &EmbeddingField,
    field_g: &EmbeddingField,
    labels: &LabelImage,
    anchors: &[usize],
    config: &LossConfig,
) -> Result<f64> {
    GaussianKernel::from_config(config)?;
    let region = labels.pixels_of(UNLABELED);
    if region.is_empty() {
        return Err(Error::EmptyUnlabeledRegion);
    }
    let r2 = config.delta_v * config.delta_v;
    let covered = region
        .iter()
        .filter(|&&i| {
            anchors.iter().any(|&p| {
                dist_sq(field_f.pixel(i), field_f.pixel(p)) <= r2
                    || dist_sq(field_g.pixel(i), field_g.pixel(p)) <= r2
            })
        })
        .count();
    Ok(covered as f64 / region.len() as f64)
}

/// Number of instances kept out of `total` at fraction `p`: `ceil(p * total)`.
pub fn kept_count(p: f64, total: usize) -> usize {
    // absorb representation error such as 0.3 * 10 = 3.0000000000000004
    let raw = p * total as f64;
    let rounded = raw.round();
    let k = if (raw - rounded).abs() < 1e-9 { rounded } else { raw.ceil() };
    (k as usize).clamp(1, total)
}

/// Keeps `ceil(p * K)` of the `K` instances, chosen uniformly without
/// replacement. Every other pixel, including background, becomes unlabeled.
pub fn subsample_objects(labels: &LabelImage, p: f64, seed: RngSeed) -> Result<LabelImage> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Domain(format!("p must lie in (0, 1], got {p}")));
    }
    let instances = labels.instance_ids();
    if instances.is_empty() {
        return Err(Error::NoInstances);
    }
    let keep = kept_count(p, instances.len());
    let mut rng = seed.rng();
    let mut chosen: Vec<u64> = instances.choose_multiple(&mut rng, keep).copied().collect();
    chosen.sort_unstable();
    let out = labels
        .labels()
        .iter()
        .map(|&l| if chosen.binary_search(&l).is_ok() { l } else { UNLABELED })
        .collect();
    LabelImage::new(labels.height(), labels.width(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::BACKGROUND;
    use proptest::prelude::*;

    fn field_from(values: &[[f64; 2]]) -> EmbeddingField {
        EmbeddingField::from_pixels(1, values.len(), 2, |i, px| px.copy_from_slice(&values[i]))
            .unwrap()
    }

    #[test]
    fn anchor_within_margin_when_instance_is_tight() {
        let field = field_from(&[[0.0, 0.0], [0.1, 0.0], [0.0, 0.2], [5.0, 5.0]]);
        let labels = LabelImage::new(1, 4, vec![2, 2, 2, 1]).unwrap();
        for s in 0..20 {
            let a = sample_instance_anchor(&field, &labels, 2, 0.5, RngSeed(s)).unwrap();
            let p = a.position.expect("pixel anchor");
            assert_eq!(labels.get(p), 2);
            let mean = [0.1 / 3.0, 0.2 / 3.0];
            assert!(dist_sq(&a.embedding, &mean) < 0.25);
        }
    }

    #[test]
    fn anchor_falls_back_to_mean() {
        let field = field_from(&[[-2.0, 0.0], [2.0, 0.0], [0.0, 3.0]]);
        let labels = LabelImage::new(1, 3, vec![2, 2, 2]).unwrap();
        let a = sample_instance_anchor(&field, &labels, 2, 0.5, RngSeed(1)).unwrap();
        assert_eq!(a.position, None);
        assert_eq!(a.embedding, vec![0.0, 1.0]);
        assert_eq!(a.to_object_anchor(), Some(ObjectAnchor::mean(2)));
    }

    #[test]
    fn anchor_sampling_is_deterministic() {
        let field = field_from(&[[0.0, 0.0], [0.1, 0.0], [0.0, 0.2], [0.1, 0.1]]);
        let labels = LabelImage::new(1, 4, vec![2, 2, 2, 2]).unwrap();
        let a = sample_instance_anchor(&field, &labels, 2, 0.5, RngSeed(9)).unwrap();
        let b = sample_instance_anchor(&field, &labels, 2, 0.5, RngSeed(9)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            sample_instance_anchor(&field, &labels, 3, 0.5, RngSeed(9)),
            Err(Error::EmptyInstance(3))
        ));
    }

    #[test]
    fn object_anchor_strategies() {
        let field = field_from(&[[0.0, 0.0], [0.1, 0.0], [4.0, 0.0], [4.1, 0.0]]);
        let labels = LabelImage::new(1, 4, vec![1, 1, 2, 2]).unwrap();
        let config = LossConfig::default();
        let set =
            sample_object_anchors(&field, &labels, &config, AnchorStrategy::Mean, RngSeed(0))
                .unwrap();
        assert_eq!(set.object_anchors(), vec![ObjectAnchor::mean(1), ObjectAnchor::mean(2)]);
        let set = sample_object_anchors(
            &field,
            &labels,
            &config,
            AnchorStrategy::RandomPixel,
            RngSeed(0),
        )
        .unwrap();
        for e in &set.entries {
            let AnchorKind::Instance(l) = e.kind else { panic!() };
            assert_eq!(labels.get(e.position.unwrap()), l);
        }
    }

    #[test]
    fn uniform_region_needs_one_anchor() {
        let field = EmbeddingField::zeros(4, 4, 3).unwrap();
        let labels = LabelImage::filled(4, 4, UNLABELED).unwrap();
        let set = sample_unlabeled_anchors(
            &field,
            &field,
            &labels,
            &LossConfig::default(),
            0.95,
            RngSeed(3),
        )
        .unwrap();
        assert_eq!(set.len(), 1);
    }

    #[test]
    fn split_region_needs_two_anchors() {
        // two groups 4 = 2 delta_d apart: kernel at one group is 0.9^64 < t at the other
        let field = EmbeddingField::from_pixels(2, 4, 2, |i, px| {
            px[0] = if i % 4 < 2 { 0.0 } else { 4.0 };
            px[1] = 0.0;
        })
        .unwrap();
        let labels = LabelImage::filled(2, 4, UNLABELED).unwrap();
        let config = LossConfig::default();
        let kernel = GaussianKernel::from_config(&config).unwrap();
        assert!(kernel.value(16.0) < config.kernel_t);
        for s in 0..10 {
            let set =
                sample_unlabeled_anchors(&field, &field, &labels, &config, 0.95, RngSeed(s))
                    .unwrap();
            assert!(set.len() >= 2);
            let cov =
                unlabeled_coverage(&field, &field, &labels, &set.positions(), &config).unwrap();
            assert!(cov >= 0.95);
        }
    }

    #[test]
    fn unlabeled_sampling_errors() {
        let field = EmbeddingField::zeros(2, 2, 1).unwrap();
        let labels = LabelImage::filled(2, 2, 2).unwrap();
        assert!(matches!(
            sample_unlabeled_anchors(&field, &field, &labels, &LossConfig::default(), 0.95, RngSeed(0)),
            Err(Error::EmptyUnlabeledRegion)
        ));
    }

    #[test]
    fn subsample_keeps_all_instances_at_p_one() {
        let labels = LabelImage::new(2, 3, vec![1, 2, 3, 4, 1, 0]).unwrap();
        let out = subsample_objects(&labels, 1.0, RngSeed(0)).unwrap();
        assert_eq!(out.labels(), &[0, 2, 3, 4, 0, 0]);
        assert!(!out.has_label(BACKGROUND));
    }

    #[test]
    fn subsample_single_survivor() {
        let labels = LabelImage::new(1, 5, vec![2, 3, 4, 5, 6]).unwrap();
        let out = subsample_objects(&labels, 0.1, RngSeed(4)).unwrap();
        assert_eq!(out.num_instances(), 1);
        assert_eq!(out, subsample_objects(&labels, 0.1, RngSeed(4)).unwrap());
        assert!(matches!(subsample_objects(&labels, 0.0, RngSeed(0)), Err(Error::Domain(_))));
        let empty = LabelImage::filled(2, 2, 1).unwrap();
        assert!(matches!(subsample_objects(&empty, 0.5, RngSeed(0)), Err(Error::NoInstances)));
    }

    #[test]
    fn kept_count_rounds_up() {
        assert_eq!(kept_count(0.3, 10), 3);
        assert_eq!(kept_count(0.31, 10), 4);
        assert_eq!(kept_count(0.5, 4), 2);
        assert_eq!(kept_count(0.01, 4), 1);
        assert_eq!(kept_count(1.0, 7), 7);
    }

    proptest! {
        #[test]
        fn subsample_output_labels_are_input_instances(
            labels in proptest::collection::vec(0u64..8, 1..60),
            p in 0.01f64..=1.0,
            seed in any::<u64>(),
        ) {
            let n = labels.len();
            let img = LabelImage::new(1, n, labels).unwrap();
            prop_assume!(img.num_instances() > 0);
            let out = subsample_objects(&img, p, RngSeed(seed)).unwrap();
            let inst = img.instance_ids();
            for &l in out.labels() {
                prop_assert!(l == UNLABELED || inst.contains(&l));
            }
            prop_assert_eq!(out.num_instances(), kept_count(p, inst.len()));
        }

        #[test]
        fn instance_anchor_post_condition(
            values in proptest::collection::vec(-2.0f64..2.0, 2..40),
            seed in any::<u64>(),
        ) {
            let n = values.len();
            let field = EmbeddingField::new(1, n, 1, values.clone()).unwrap();
            let labels = LabelImage::filled(1, n, 2).unwrap();
            let a = sample_instance_anchor(&field, &labels, 2, 0.5, RngSeed(seed)).unwrap();
            let mean = values.iter().sum::<f64>() / n as f64;
            match a.position {
                Some(_) => prop_assert!((a.embedding[0] - mean).abs() < 0.5),
                None => prop_assert_eq!(a.embedding[0], mean),
            }
        }
    }
}
