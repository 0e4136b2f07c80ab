//! Flat TOML run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clustering::{ClusterMethod, ClusterParams, PostprocessParams};
use crate::error::{Error, Result};
use crate::metrics::default_thresholds;
use crate::optim::{AdamParams, Schedule};
use crate::sampling::{AnchorStrategy, SamplingSpec};
use crate::types::{LossConfig, RngSeed, Supervision};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Supervision,
    pub seed: u64,

    pub delta_v: f64,
    pub delta_d: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub delta_w: f64,
    pub epsilon_w: f64,
    pub kernel_t: f64,
    pub momentum_m: f64,
    pub background_object: bool,

    pub p: f64,
    pub m_anchors: usize,
    pub coverage_threshold: f64,
    pub anchor_strategy: AnchorStrategy,

    pub channels: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub resample_anchors_every: usize,
    pub init_std: f64,

    pub method: ClusterMethod,
    pub bandwidth: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub min_size: usize,
    pub t_iou: f64,
    pub offsets: Vec<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub merge_delta_d: Option<f64>,
    pub fill_noise: bool,
    pub largest_is_background: bool,

    pub thresholds: Vec<f64>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gfield: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let loss = LossConfig::default();
        let sampling = SamplingSpec::default();
        let schedule = Schedule::default();
        let cluster = ClusterParams::default();
        Self {
            mode: Supervision::Full,
            seed: 0,
            delta_v: loss.delta_v,
            delta_d: loss.delta_d,
            alpha: loss.alpha,
            beta: loss.beta,
            gamma: loss.gamma,
            lambda: loss.lambda,
            delta_w: loss.delta_w,
            epsilon_w: loss.epsilon_w,
            kernel_t: loss.kernel_t,
            momentum_m: loss.momentum_m,
            background_object: loss.background_object,
            p: sampling.p,
            m_anchors: sampling.m_anchors_per_object,
            coverage_threshold: sampling.coverage_threshold,
            anchor_strategy: sampling.strategy,
            channels: 16,
            steps: schedule.steps,
            lr: schedule.adam.lr,
            beta1: schedule.adam.beta1,
            beta2: schedule.adam.beta2,
            eps: schedule.adam.eps,
            resample_anchors_every: schedule.resample_anchors_every,
            init_std: schedule.init_std,
            method: cluster.method,
            bandwidth: cluster.bandwidth,
            max_iters: cluster.max_iters,
            tol: cluster.tol,
            min_size: cluster.min_size,
            t_iou: cluster.t_iou,
            offsets: cluster.offsets,
            merge_delta_d: None,
            fill_noise: false,
            largest_is_background: false,
            thresholds: default_thresholds(),
            labels: None,
            field: None,
            gfield: None,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn seed(&self) -> RngSeed {
        RngSeed(self.seed)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            delta_v: self.delta_v,
            delta_d: self.delta_d,
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            lambda: self.lambda,
            delta_w: self.delta_w,
            epsilon_w: self.epsilon_w,
            kernel_t: self.kernel_t,
            momentum_m: self.momentum_m,
            background_object: self.background_object,
        }
    }

    pub fn sampling_spec(&self) -> SamplingSpec {
        SamplingSpec {
            p: self.p,
            m_anchors_per_object: self.m_anchors,
            coverage_threshold: self.coverage_threshold,
            strategy: self.anchor_strategy,
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            steps: self.steps,
            adam: AdamParams { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps },
            resample_anchors_every: self.resample_anchors_every,
            init_std: self.init_std,
        }
    }

    pub fn cluster_params(&self) -> ClusterParams {
        ClusterParams {
            method: self.method,
            bandwidth: self.bandwidth,
            max_iters: self.max_iters,
            tol: self.tol,
            min_size: self.min_size,
            t_iou: self.t_iou,
            m_anchors: self.m_anchors,
            offsets: self.offsets.clone(),
            delta_d: self.delta_d,
            postprocess: PostprocessParams {
                merge_delta_d: self.merge_delta_d,
                fill_noise: self.fill_noise,
                largest_is_background: self.largest_is_background,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_config().validate()?;
        self.sampling_spec().validate()?;
        self.schedule().validate()?;
        if self.channels == 0 {
            return Err(Error::InvalidConfig("channels must be >= 1".into()));
        }
        if !(self.bandwidth.is_finite() && self.bandwidth > 0.0) {
            return Err(Error::InvalidConfig(format!("bandwidth must be > 0, got {}", self.bandwidth)));
        }
        if self.min_size < 2 {
            return Err(Error::InvalidConfig(format!("min_size must be >= 2, got {}", self.min_size)));
        }
        if !(self.t_iou > 0.0 && self.t_iou < 1.0) {
            return Err(Error::InvalidConfig(format!("t_iou must lie in (0, 1), got {}", self.t_iou)));
        }
        if self.offsets.is_empty() || self.offsets.iter().any(|&s| s < 2) {
            return Err(Error::InvalidConfig("offsets must be non-empty strides >= 2".into()));
        }
        if self.thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) || self.thresholds.is_empty() {
            return Err(Error::InvalidConfig("thresholds must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identity() {
        let cfg = RunConfig {
            mode: Supervision::Sparse,
            p: 0.5,
            merge_delta_d: Some(1.5),
            labels: Some("gt.lbl".into()),
            method: ClusterMethod::Hdbscan,
            anchor_strategy: AnchorStrategy::RandomPixel,
            ..RunConfig::default()
        };
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(RunConfig::from_toml(&back.to_toml().unwrap()).unwrap(), back);
        assert_eq!(RunConfig::from_toml(&RunConfig::default().to_toml().unwrap()).unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_and_unknown_keys() {
        let cfg = RunConfig::from_toml("min_size = 200\nmethod = \"hdbscan\"\n").unwrap();
        assert_eq!(cfg.min_size, 200);
        assert_eq!(cfg.cluster_params().method, ClusterMethod::Hdbscan);
        assert_eq!(cfg.kernel_t, 0.9);
        assert!(matches!(RunConfig::from_toml("bogus = 1\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[section]\nmin_size = 3\n"), Err(Error::Config(_))));
    }

    #[test]
    fn validation() {
        assert!(RunConfig::default().validate().is_ok());
        let bad = RunConfig { kernel_t: 0.97, ..RunConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        let bad = RunConfig { offsets: vec![1], ..RunConfig::default() };
        assert!(bad.validate().is_err());
    }
}
