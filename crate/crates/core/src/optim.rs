//! Direct optimization of an embedding field with Adam, plus the
//! exponential-moving-average shadow field used by the consistency term.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{loss_and_grad, LossBreakdown, LossInputs};
use crate::sampling::{sample_object_anchors, sample_unlabeled_anchors, SamplingSpec};
use crate::types::{
    validate_labels_for_mode, EmbeddingField, LabelImage, LossConfig, RngSeed, Supervision,
    UNLABELED,
};

/// A total loss above this aborts the run.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Elementwise `m * g + (1 - m) * f`.
pub fn ema_update(g: &EmbeddingField, f: &EmbeddingField, m: f64) -> Result<EmbeddingField> {
    g.check_same_shape(f, "ema_update")?;
    if !(0.0..1.0).contains(&m) {
        return Err(Error::Domain(format!("momentum must lie in [0, 1), got {m}")));
    }
    let data = g.data().iter().zip(f.data()).map(|(gv, fv)| m * gv + (1.0 - m) * fv).collect();
    EmbeddingField::new(g.height(), g.width(), g.channels(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::InvalidConfig(format!("eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub steps: usize,
    pub adam: AdamParams,
    /// Anchors are redrawn every this many steps.
    pub resample_anchors_every: usize,
    /// Standard deviation of the initial field.
    pub init_std: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { steps: 2000, adam: AdamParams::default(), resample_anchors_every: 1, init_std: 0.1 }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.resample_anchors_every == 0 {
            return Err(Error::InvalidConfig("resample_anchors_every must be >= 1".into()));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "init_std must be > 0, got {}",
                self.init_std
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub field_f: EmbeddingField,
    /// Shadow field; receives no gradient.
    pub field_g: EmbeddingField,
    pub step: usize,
    /// First and second moment estimates, laid out like `field_f`.
    pub moment1: Vec<f64>,
    pub moment2: Vec<f64>,
    /// Loss at each step, evaluated before that step's update.
    pub history: Vec<LossBreakdown>,
}

impl OptimState {
    /// Fresh state with `field_g = field_f` and zero moments.
    pub fn new(field_f: EmbeddingField) -> Self {
        let n = field_f.data().len();
        Self {
            field_g: field_f.clone(),
            field_f,
            step: 0,
            moment1: vec![0.0; n],
            moment2: vec![0.0; n],
            history: Vec::new(),
        }
    }

    /// Field with i.i.d. `N(0, std)` entries.
    pub fn random(
        height: usize,
        width: usize,
        channels: usize,
        std: f64,
        seed: RngSeed,
    ) -> Result<Self> {
        let normal = Normal::new(0.0, std)
            .map_err(|e| Error::Domain(format!("initial std {std}: {e}")))?;
        let mut rng = seed.rng();
        let data = (0..height * width * channels).map(|_| normal.sample(&mut rng)).collect();
        Ok(Self::new(EmbeddingField::new(height, width, channels, data)?))
    }
}

/// One bias-corrected Adam update of `field_f` followed by the EMA update of
/// `field_g`.
pub fn adam_step(
    state: &mut OptimState,
    gradient: &EmbeddingField,
    params: &AdamParams,
    momentum_m: f64,
) -> Result<()> {
    state.field_f.check_same_shape(gradient, "adam_step gradient")?;
    if !gradient.is_finite() {
        return Err(Error::NonFiniteValue("gradient".into()));
    }
    params.validate()?;
    if !(0.0..1.0).contains(&momentum_m) {
        return Err(Error::Domain(format!("momentum must lie in [0, 1), got {momentum_m}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - params.beta1.powi(t);
    let c2 = 1.0 - params.beta2.powi(t);
    let f = state.field_f.data_mut();
    for (i, &g) in gradient.data().iter().enumerate() {
        let m = params.beta1 * state.moment1[i] + (1.0 - params.beta1) * g;
        let v = params.beta2 * state.moment2[i] + (1.0 - params.beta2) * g * g;
        state.moment1[i] = m;
        state.moment2[i] = v;
        f[i] -= params.lr * (m / c1) / ((v / c2).sqrt() + params.eps);
    }
    if !state.field_f.is_finite() {
        return Err(Error::NonFiniteValue("field after Adam step".into()));
    }
    state.field_g = ema_update(&state.field_g, &state.field_f, momentum_m)?;
    Ok(())
}

/// Optimizes a randomly initialized field under the mode's loss.
///
/// `labels` must already be in the mode's label convention; use
/// [`crate::sampling::subsample_objects`] to derive sparse labels.
pub fn run_optimization(
    labels: &LabelImage,
    channels: usize,
    config: &LossConfig,
    schedule: &Schedule,
    sampling: &SamplingSpec,
    mode: Supervision,
    seed: RngSeed,
) -> Result<OptimState> {
    config.validate()?;
    schedule.validate()?;
    sampling.validate()?;
    validate_labels_for_mode(labels, mode)?;
    if channels == 0 {
        return Err(Error::ShapeMismatch("embedding dimension must be >= 1".into()));
    }
    let init = OptimState::random(
        labels.height(),
        labels.width(),
        channels,
        schedule.init_std,
        seed.derive(0x1217),
    )?;
    optimize_from(init, labels, config, schedule, sampling, mode, seed)
}

/// Continues optimization from `state` for `schedule.steps` steps.
pub fn optimize_from(
    mut state: OptimState,
    labels: &LabelImage,
    config: &LossConfig,
    schedule: &Schedule,
    sampling: &SamplingSpec,
    mode: Supervision,
    seed: RngSeed,
) -> Result<OptimState> {
    let has_unlabeled = mode == Supervision::Sparse && labels.has_label(UNLABELED);
    let mut object_anchors = Vec::new();
    let mut unlabeled_anchors = Vec::new();
    for k in 0..schedule.steps {
        if k % schedule.resample_anchors_every == 0 {
            let step_seed = seed.derive(state.step as u64 + 1);
            object_anchors = sample_object_anchors(
                &state.field_f,
                labels,
                config,
                sampling.strategy,
                step_seed,
            )?
            .object_anchors();
            if has_unlabeled {
                unlabeled_anchors = sample_unlabeled_anchors(
                    &state.field_f,
                    &state.field_g,
                    labels,
                    config,
                    sampling.coverage_threshold,
                    step_seed.derive(1),
                )?
                .positions();
            }
        }
        let inputs = match mode {
            Supervision::Full => LossInputs::full(&state.field_f, labels, &object_anchors),
            Supervision::Sparse => LossInputs::sparse(
                &state.field_f,
                &state.field_g,
                labels,
                &object_anchors,
                &unlabeled_anchors,
            ),
        };
        let (breakdown, gradient) = loss_and_grad(&inputs, config)?;
        if !breakdown.total.is_finite() || breakdown.total > DIVERGENCE_LIMIT {
            return Err(Error::DivergenceDetected { step: state.step, total: breakdown.total });
        }
        state.history.push(breakdown);
        adam_step(&mut state, &gradient, &schedule.adam, config.momentum_m)?;
        if state.step.is_multiple_of(200) {
            log::debug!("step {}: total {:.6}", state.step, breakdown.total);
        }
    }
    Ok(state)
}
