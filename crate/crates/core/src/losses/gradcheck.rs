//! Randomized analytic-vs-finite-difference gradient verification.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::fd::{compare, fd_gradient};
use super::{loss_and_grad, loss_with_diagnostics, LossInputs, ObjectAnchor};
use crate::error::Result;
use crate::types::{
    EmbeddingField, LabelImage, LossConfig, RngSeed, Supervision, BACKGROUND, FIRST_INSTANCE,
    UNLABELED,
};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub instances: usize,
    pub mode: Supervision,
    pub h: f64,
    pub trials: usize,
    pub seed: RngSeed,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Coordinates whose gradient magnitude is at or below this are skipped.
    pub min_abs: f64,
    /// Configurations with a hinge argument closer than this to its kink are
    /// excluded.
    pub min_hinge_gap: f64,
    /// Standard deviation of the random embeddings.
    pub field_std: f64,
    /// Number of unlabeled consistency anchors (sparse mode).
    pub unlabeled_anchors: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            height: 8,
            width: 8,
            channels: 4,
            instances: 3,
            mode: Supervision::Full,
            h: 1e-4,
            trials: 100,
            seed: RngSeed(0),
            tolerance: 1e-5,
            min_abs: 1e-8,
            min_hinge_gap: 1e-3,
            field_std: 0.6,
            unlabeled_anchors: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialOutcome {
    pub trial: usize,
    /// `None` when the configuration sits on a hinge boundary.
    pub max_rel_err: Option<f64>,
    pub compared: usize,
    pub min_hinge_gap: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub mode: Supervision,
    pub trials: Vec<TrialOutcome>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn excluded(&self) -> usize {
        self.trials.iter().filter(|t| t.max_rel_err.is_none()).count()
    }

    pub fn passed(&self) -> bool {
        self.excluded() < self.trials.len() && self.max_rel_err < self.tolerance
    }
}

/// A random labeled configuration for gradient checking.
pub struct GradProblem {
    pub field_f: EmbeddingField,
    pub field_g: EmbeddingField,
    pub labels: LabelImage,
    pub object_anchors: Vec<ObjectAnchor>,
    pub unlabeled_anchors: Vec<usize>,
    pub mode: Supervision,
}

impl GradProblem {
    pub fn random(cfg: &GradCheckConfig, seed: RngSeed) -> Result<Self> {
        let mut rng = seed.rng();
        let n = cfg.height * cfg.width;
        let rest = match cfg.mode {
            Supervision::Full => BACKGROUND,
            Supervision::Sparse => UNLABELED,
        };
        let mut ids: Vec<u64> = vec![rest];
        ids.extend((0..cfg.instances as u64).map(|k| FIRST_INSTANCE + k));

        // every id appears at least once
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut labels = vec![rest; n];
        for (slot, &i) in order.iter().enumerate() {
            labels[i] = if slot < ids.len() { ids[slot] } else { ids[rng.random_range(0..ids.len())] };
        }
        let labels = LabelImage::new(cfg.height, cfg.width, labels)?;

        let normal = Normal::new(0.0, cfg.field_std).expect("valid std");
        let data: Vec<f64> = (0..n * cfg.channels).map(|_| normal.sample(&mut rng)).collect();
        let field_f = EmbeddingField::new(cfg.height, cfg.width, cfg.channels, data)?;
        let jitter = Normal::new(0.0, 0.3).expect("valid std");
        let field_g = field_f.map_pixels(|src, dst| {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + jitter.sample(&mut rng);
            }
        })?;

        let config = LossConfig::default();
        let object_anchors = super::object_labels(&labels, &config)
            .into_iter()
            .map(|label| {
                if rng.random_bool(0.5) {
                    let members = labels.pixels_of(label);
                    ObjectAnchor::pixel(label, members[rng.random_range(0..members.len())])
                } else {
                    ObjectAnchor::mean(label)
                }
            })
            .collect();

        let unlabeled_anchors = match cfg.mode {
            Supervision::Full => Vec::new(),
            Supervision::Sparse => {
                let mut u = labels.pixels_of(UNLABELED);
                u.shuffle(&mut rng);
                u.truncate(cfg.unlabeled_anchors.max(1));
                u
            }
        };
        Ok(Self { field_f, field_g, labels, object_anchors, unlabeled_anchors, mode: cfg.mode })
    }

    pub fn inputs(&self) -> LossInputs<'_> {
        LossInputs {
            field_f: &self.field_f,
            field_g: match self.mode {
                Supervision::Full => None,
                Supervision::Sparse => Some(&self.field_g),
            },
            labels: &self.labels,
            object_anchors: &self.object_anchors,
            unlabeled_anchors: &self.unlabeled_anchors,
            mode: self.mode,
        }
    }
}

/// Runs `cfg.trials` random configurations and compares the analytic
/// gradient to central differences.
pub fn run_gradcheck(cfg: &GradCheckConfig, config: &LossConfig) -> Result<GradCheckReport> {
    let mut trials = Vec::with_capacity(cfg.trials);
    let mut worst: f64 = 0.0;
    for trial in 0..cfg.trials {
        let problem = GradProblem::random(cfg, cfg.seed.derive(trial as u64))?;
        let inputs = problem.inputs();
        let (_, diag) = loss_with_diagnostics(&inputs, config)?;
        if diag.min_hinge_gap < cfg.min_hinge_gap {
            log::info!(
                "gradcheck trial {trial}: excluded, hinge gap {:.3e}",
                diag.min_hinge_gap
            );
            trials.push(TrialOutcome {
                trial,
                max_rel_err: None,
                compared: 0,
                min_hinge_gap: diag.min_hinge_gap,
            });
            continue;
        }
        let (_, analytic) = loss_and_grad(&inputs, config)?;
        let numeric = fd_gradient(
            |f| super::loss(&inputs.with_field(f), config).map(|b| b.total),
            &problem.field_f,
            cfg.h,
        )?;
        let cmp = compare(analytic.data(), numeric.data(), cfg.min_abs);
        worst = worst.max(cmp.max_rel_err);
        trials.push(TrialOutcome {
            trial,
            max_rel_err: Some(cmp.max_rel_err),
            compared: cmp.compared,
            min_hinge_gap: diag.min_hinge_gap,
        });
    }
    Ok(GradCheckReport { mode: cfg.mode, trials, max_rel_err: worst, tolerance: cfg.tolerance })
}
