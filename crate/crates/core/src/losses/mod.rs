//! Single-object contrastive losses and their analytic gradients.
//!
//! Every term acts on a directly optimized [`EmbeddingField`]. Cluster means
//! and anchor embeddings are functions of the field, so the gradient flows
//! through them as well. The shadow field (`field_g`) is treated as a
//! constant.

mod engine;
pub mod fd;
pub mod gradcheck;

use crate::error::{Error, Result};
use crate::types::{
    validate_labels_for_mode, validate_pair, EmbeddingField, LabelImage, LossConfig, SoftMask,
    Supervision, BACKGROUND, FIRST_INSTANCE,
};

pub(crate) use engine::Diagnostics;

/// Distances below this are treated as zero when differentiating a norm.
pub const MIN_DISTANCE: f64 = 1e-12;

/// Kernel width such that the Gaussian kernel equals `t` at distance
/// `delta_v`: `sigma^2 = -delta_v^2 / (2 ln t)`.
pub fn sigma_squared(delta_v: f64, t: f64) -> Result<f64> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Domain(format!("kernel threshold must lie in (0, 1), got {t}")));
    }
    if !(delta_v.is_finite() && delta_v > 0.0) {
        return Err(Error::Domain(format!("delta_v must be > 0, got {delta_v}")));
    }
    Ok(-(delta_v * delta_v) / (2.0 * t.ln()))
}

/// Gaussian kernel `exp(-d^2 / (2 sigma^2))` calibrated so that the value at
/// distance `delta_v` is exactly `t`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianKernel {
    t: f64,
    delta_v_sq: f64,
    sigma_sq: f64,
}

impl GaussianKernel {
    pub fn new(delta_v: f64, t: f64) -> Result<Self> {
        let sigma_sq = sigma_squared(delta_v, t)?;
        Ok(Self { t, delta_v_sq: delta_v * delta_v, sigma_sq })
    }

    pub fn from_config(config: &LossConfig) -> Result<Self> {
        Self::new(config.delta_v, config.kernel_t)
    }

    pub fn sigma_sq(&self) -> f64 {
        self.sigma_sq
    }

    /// Kernel value at squared distance `dist_sq`.
    ///
    /// Evaluated as `t^(d^2 / delta_v^2)`, the same function written so
    /// that `d = delta_v` yields `t` without rounding drift.
    #[inline]
    pub fn value(&self, dist_sq: f64) -> f64 {
        self.t.powf(dist_sq / self.delta_v_sq)
    }
}

#[inline]
pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Soft mask of every pixel around `anchor`.
pub fn soft_mask(field: &EmbeddingField, anchor: &[f64], config: &LossConfig) -> Result<SoftMask> {
    if anchor.len() != field.channels() {
        return Err(Error::ShapeMismatch(format!(
            "anchor has {} components, field has {} channels",
            anchor.len(),
            field.channels()
        )));
    }
    let kernel = GaussianKernel::from_config(config)?;
    let values = (0..field.num_pixels())
        .map(|i| kernel.value(dist_sq(field.pixel(i), anchor)))
        .collect();
    SoftMask::new(field.height(), field.width(), values)
}

/// Soft Dice `2 sum(a b) / (sum a^2 + sum b^2)`; `1` when both masks are
/// empty. Equals the set Dice for binary masks and is exactly `1` for
/// identical soft masks.
pub fn soft_dice(a: &[f64], b: &[f64]) -> f64 {
    let (mut inter, mut sa, mut sb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        inter += x * y;
        sa += x * x;
        sb += y * y;
    }
    if sa + sb == 0.0 {
        1.0
    } else {
        2.0 * inter / (sa + sb)
    }
}

/// Where an object's anchor embedding comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum AnchorSource {
    /// Embedding of the pixel at this row-major index.
    Pixel(usize),
    /// Mean embedding of the object's pixels.
    Mean,
    /// A constant vector; receives no gradient.
    Fixed(Vec<f64>),
}

/// Anchor of one labeled object.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectAnchor {
    pub label: u64,
    pub source: AnchorSource,
}

impl ObjectAnchor {
    pub fn pixel(label: u64, index: usize) -> Self {
        Self { label, source: AnchorSource::Pixel(index) }
    }

    pub fn mean(label: u64) -> Self {
        Self { label, source: AnchorSource::Mean }
    }

    pub fn fixed(label: u64, embedding: Vec<f64>) -> Self {
        Self { label, source: AnchorSource::Fixed(embedding) }
    }
}

/// Labels that receive an object (Dice) term: every instance, plus the
/// background when it is present and `config.background_object` is set.
pub fn object_labels(labels: &LabelImage, config: &LossConfig) -> Vec<u64> {
    let groups = labels.groups();
    groups
        .keys()
        .copied()
        .filter(|&l| l >= FIRST_INSTANCE || (l == BACKGROUND && config.background_object))
        .collect()
}

/// Per-term loss values and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_var: f64,
    pub l_dist: f64,
    pub l_reg: f64,
    pub l_obj: f64,
    pub l_u_dist: f64,
    pub l_u_con: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Weighted total of the single-object terms.
    pub fn single_object_total(&self, config: &LossConfig) -> f64 {
        config.alpha * self.l_dist
            + config.beta * self.l_var
            + config.gamma * self.l_reg
            + config.lambda * self.l_obj
    }

    pub fn is_finite(&self) -> bool {
        [self.l_var, self.l_dist, self.l_reg, self.l_obj, self.l_u_dist, self.l_u_con, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Everything a loss evaluation reads.
#[derive(Clone, Copy, Debug)]
pub struct LossInputs<'a> {
    pub field_f: &'a EmbeddingField,
    /// Shadow field; required under sparse supervision.
    pub field_g: Option<&'a EmbeddingField>,
    pub labels: &'a LabelImage,
    pub object_anchors: &'a [ObjectAnchor],
    /// Pixel positions in the unlabeled region used by the consistency term.
    pub unlabeled_anchors: &'a [usize],
    pub mode: Supervision,
}

impl<'a> LossInputs<'a> {
    pub fn full(
        field: &'a EmbeddingField,
        labels: &'a LabelImage,
        object_anchors: &'a [ObjectAnchor],
    ) -> Self {
        Self {
            field_f: field,
            field_g: None,
            labels,
            object_anchors,
            unlabeled_anchors: &[],
            mode: Supervision::Full,
        }
    }

    pub fn sparse(
        field_f: &'a EmbeddingField,
        field_g: &'a EmbeddingField,
        labels: &'a LabelImage,
        object_anchors: &'a [ObjectAnchor],
        unlabeled_anchors: &'a [usize],
    ) -> Self {
        Self {
            field_f,
            field_g: Some(field_g),
            labels,
            object_anchors,
            unlabeled_anchors,
            mode: Supervision::Sparse,
        }
    }

    /// Same inputs with a different trainable field.
    pub fn with_field(&self, field_f: &'a EmbeddingField) -> Self {
        Self { field_f, ..*self }
    }

    fn validate(&self, config: &LossConfig) -> Result<()> {
        config.validate()?;
        validate_pair(self.field_f, self.labels)?;
        validate_labels_for_mode(self.labels, self.mode)?;
        if let Some(g) = self.field_g {
            self.field_f.check_same_shape(g, "field_f vs field_g")?;
        }
        if self.mode == Supervision::Sparse {
            if self.field_g.is_none() {
                return Err(Error::ShapeMismatch(
                    "sparse supervision requires a shadow field".into(),
                ));
            }
            if self.labels.has_label(crate::types::UNLABELED) && self.unlabeled_anchors.is_empty()
            {
                return Err(Error::EmptyAnchorSet);
            }
        }
        Ok(())
    }
}

/// Loss value and the gradient with respect to `field_f`.
pub fn loss_and_grad(
    inputs: &LossInputs<'_>,
    config: &LossConfig,
) -> Result<(LossBreakdown, EmbeddingField)> {
    inputs.validate(config)?;
    let f = inputs.field_f;
    let mut grad = vec![0.0; f.data().len()];
    let (breakdown, _) = engine::evaluate(inputs, config, Some(&mut grad))?;
    let grad = EmbeddingField::new(f.height(), f.width(), f.channels(), grad)?;
    Ok((breakdown, grad))
}

/// Loss value only.
pub fn loss(inputs: &LossInputs<'_>, config: &LossConfig) -> Result<LossBreakdown> {
    inputs.validate(config)?;
    engine::evaluate(inputs, config, None).map(|(b, _)| b)
}

/// Analytic gradient of the mode's total loss with respect to `field_f`.
pub fn grad(inputs: &LossInputs<'_>, config: &LossConfig) -> Result<EmbeddingField> {
    loss_and_grad(inputs, config).map(|(_, g)| g)
}

pub(crate) fn loss_with_diagnostics(
    inputs: &LossInputs<'_>,
    config: &LossConfig,
) -> Result<(LossBreakdown, Diagnostics)> {
    inputs.validate(config)?;
    engine::evaluate(inputs, config, None)
}

/// Variance, distance and regularization terms over every labeled cluster
/// (labels `>= 1`).
pub fn discriminative_terms(
    field: &EmbeddingField,
    labels: &LabelImage,
    config: &LossConfig,
) -> Result<(f64, f64, f64)> {
    config.validate()?;
    validate_pair(field, labels)?;
    let clusters = engine::Clusters::build(field, labels)?;
    Ok((
        engine::variance_term(field, &clusters, config, None, &mut engine::no_gaps()),
        engine::distance_term(&clusters, config, None, &mut engine::no_gaps()),
        engine::regularization_term(&clusters, None),
    ))
}

/// Mean Dice loss between each object's soft mask and its ground truth.
pub fn object_loss(
    field: &EmbeddingField,
    labels: &LabelImage,
    anchors: &[ObjectAnchor],
    config: &LossConfig,
) -> Result<f64> {
    config.validate()?;
    validate_pair(field, labels)?;
    let clusters = engine::Clusters::build(field, labels)?;
    let kernel = GaussianKernel::from_config(config)?;
    engine::object_term(field, labels, &clusters, anchors, config, &kernel, None)
}

/// Push of every labeled cluster mean away from the unlabeled pixels; `0`
/// when there are none.
pub fn unlabeled_push(
    field: &EmbeddingField,
    labels: &LabelImage,
    config: &LossConfig,
) -> Result<f64> {
    config.validate()?;
    validate_pair(field, labels)?;
    let clusters = engine::Clusters::build(field, labels)?;
    Ok(engine::unlabeled_push_term(
        field,
        labels,
        &clusters,
        config,
        None,
        &mut engine::no_gaps(),
    ))
}

/// Mean Dice disagreement between the soft masks extracted around the same
/// pixels in `field_f` and `field_g`.
pub fn consistency_loss(
    field_f: &EmbeddingField,
    field_g: &EmbeddingField,
    anchors: &[usize],
    config: &LossConfig,
) -> Result<f64> {
    config.validate()?;
    field_f.check_same_shape(field_g, "consistency fields")?;
    let kernel = GaussianKernel::from_config(config)?;
    engine::consistency_term(field_f, field_g, anchors, &kernel, None)
}

/// Single-object loss under full supervision.
pub fn loss_so(
    field: &EmbeddingField,
    labels: &LabelImage,
    anchors: &[ObjectAnchor],
    config: &LossConfig,
) -> Result<LossBreakdown> {
    loss(&LossInputs::full(field, labels, anchors), config)
}

/// Sparse single-object loss under positive-unlabeled supervision.
pub fn loss_sso(
    field_f: &EmbeddingField,
    field_g: &EmbeddingField,
    labels: &LabelImage,
    instance_anchors: &[ObjectAnchor],
    unlabeled_anchors: &[usize],
    config: &LossConfig,
) -> Result<LossBreakdown> {
    loss(
        &LossInputs::sparse(field_f, field_g, labels, instance_anchors, unlabeled_anchors),
        config,
    )
}
