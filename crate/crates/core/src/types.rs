//! Shared domain types: embedding fields, label images, soft masks, the loss
//! configuration and seeded randomness.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label of pixels that carry no supervision.
pub const UNLABELED: u64 = 0;
/// Label of the background object (full supervision only).
pub const BACKGROUND: u64 = 1;
/// Smallest instance label.
pub const FIRST_INSTANCE: u64 = 2;

/// Kernel thresholds above this value are rejected as unstable.
pub const MAX_STABLE_KERNEL_T: f64 = 0.95;

/// A `channels`-dimensional embedding vector for every pixel of a
/// `height` x `width` grid, stored row-major and channel-last.
#[derive(Clone, PartialEq)]
pub struct EmbeddingField {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl fmt::Debug for EmbeddingField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EmbeddingField")
            .field("height", &self.height)
            .field("width", &self.width)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

impl EmbeddingField {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::ShapeMismatch(format!(
                "field dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "field {height}x{width}x{channels} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(format!("field value at flat index {pos}")));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(height, width, channels, vec![0.0; height * width * channels])
    }

    /// Builds a field whose pixel `i` (row-major) is produced by `f(i, out)`.
    pub fn from_pixels<F>(height: usize, width: usize, channels: usize, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, &mut [f64]),
    {
        let mut data = vec![0.0; height * width * channels];
        for (i, px) in data.chunks_exact_mut(channels.max(1)).enumerate() {
            f(i, px);
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Embedding of pixel `i` (row-major index).
    #[inline]
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    /// Embedding at grid position `(row, col)`.
    #[inline]
    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        self.pixel(row * self.width + col)
    }

    pub fn same_shape(&self, other: &EmbeddingField) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns a copy with `f` applied to every pixel vector.
    pub fn map_pixels<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(&[f64], &mut [f64]),
    {
        let mut out = vec![0.0; self.data.len()];
        for (src, dst) in self
            .data
            .chunks_exact(self.channels)
            .zip(out.chunks_exact_mut(self.channels))
        {
            f(src, dst);
        }
        Self::new(self.height, self.width, self.channels, out)
    }

    pub(crate) fn check_same_shape(&self, other: &EmbeddingField, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )))
        }
    }
}

/// Per-pixel instance ids. `0` is unlabeled, `1` is background and every
/// id `>= 2` is an instance. Ids need not be contiguous.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct LabelImage {
    height: usize,
    width: usize,
    labels: Vec<u64>,
}

impl LabelImage {
    pub fn new(height: usize, width: usize, labels: Vec<u64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::ShapeMismatch(format!(
                "label image dimensions must be positive, got {height}x{width}"
            )));
        }
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "label image {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, label: u64) -> Result<Self> {
        Self::new(height, width, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_pixels(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[u64] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<u64> {
        self.labels
    }

    #[inline]
    pub fn get(&self, i: usize) -> u64 {
        self.labels[i]
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> u64 {
        self.labels[row * self.width + col]
    }

    pub fn same_shape(&self, other: &LabelImage) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn matches_field(&self, field: &EmbeddingField) -> bool {
        self.height == field.height() && self.width == field.width()
    }

    /// Pixel indices grouped by label, in ascending label order.
    pub fn groups(&self) -> BTreeMap<u64, Vec<usize>> {
        let mut out: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            out.entry(l).or_default().push(i);
        }
        out
    }

    /// Sorted distinct instance ids (labels `>= 2`).
    pub fn instance_ids(&self) -> Vec<u64> {
        self.groups().into_keys().filter(|&l| l >= FIRST_INSTANCE).collect()
    }

    pub fn num_instances(&self) -> usize {
        self.instance_ids().len()
    }

    pub fn has_label(&self, label: u64) -> bool {
        self.labels.contains(&label)
    }

    pub fn pixels_of(&self, label: u64) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == label).then_some(i))
            .collect()
    }

    pub(crate) fn check_same_shape(&self, other: &LabelImage) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "label images {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }
}

/// Per-pixel kernel response in `[0, 1]`.
#[derive(Clone, PartialEq, Debug)]
pub struct SoftMask {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl SoftMask {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "soft mask {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::NonFiniteValue(format!("soft mask value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Full supervision (every pixel labeled, background included) or sparse
/// positive-unlabeled supervision (a subset of instances, no background).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    Full,
    Sparse,
}

impl FromStr for Supervision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Supervision::Full),
            "sparse" => Ok(Supervision::Sparse),
            other => Err(Error::InvalidConfig(format!("unknown mode {other:?}"))),
        }
    }
}

impl fmt::Display for Supervision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Supervision::Full => "full",
            Supervision::Sparse => "sparse",
        })
    }
}

/// Margins, weights and kernel parameters of the single-object losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Pull margin; also the kernel radius and the clustering bandwidth.
    pub delta_v: f64,
    /// Push margin; cluster means are pushed `2 * delta_d` apart.
    pub delta_d: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    /// Weight of the unlabeled push term.
    pub delta_w: f64,
    /// Weight of the unlabeled consistency term.
    pub epsilon_w: f64,
    /// Kernel value required at distance `delta_v` from the anchor.
    pub kernel_t: f64,
    /// EMA coefficient of the shadow field.
    pub momentum_m: f64,
    /// Whether the background receives its own object term under full
    /// supervision.
    pub background_object: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            delta_v: 0.5,
            delta_d: 2.0,
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.001,
            lambda: 1.0,
            delta_w: 1.0,
            epsilon_w: 1.0,
            kernel_t: 0.9,
            momentum_m: 0.999,
            background_object: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let margins = [("delta_v", self.delta_v), ("delta_d", self.delta_d)];
        for (name, v) in margins {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be > 0, got {v}")));
            }
        }
        let weights = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("delta_w", self.delta_w),
            ("epsilon_w", self.epsilon_w),
        ];
        for (name, v) in weights {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.kernel_t > 0.0 && self.kernel_t < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "kernel_t must lie in (0, 1), got {}",
                self.kernel_t
            )));
        }
        if self.kernel_t > MAX_STABLE_KERNEL_T {
            log::warn!("kernel_t = {} > {MAX_STABLE_KERNEL_T} is unstable", self.kernel_t);
            return Err(Error::InvalidConfig(format!(
                "kernel_t = {} exceeds {MAX_STABLE_KERNEL_T}; larger thresholds make training unstable",
                self.kernel_t
            )));
        }
        if !(self.momentum_m >= 0.0 && self.momentum_m < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "momentum_m must lie in [0, 1), got {}",
                self.momentum_m
            )));
        }
        Ok(())
    }

    pub fn sigma_sq(&self) -> Result<f64> {
        crate::losses::sigma_squared(self.delta_v, self.kernel_t)
    }
}

/// Seed for every randomized operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct RngSeed(pub u64);

impl RngSeed {
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Independent generator for sub-task `stream` under this seed.
    pub fn stream(self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.0);
        rng.set_stream(stream);
        rng
    }

    /// Derives a new seed, e.g. one per optimization step.
    pub fn derive(self, salt: u64) -> RngSeed {
        // splitmix64 finalizer
        let mut z = self.0 ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        RngSeed(z ^ (z >> 31))
    }
}

impl From<u64> for RngSeed {
    fn from(v: u64) -> Self {
        RngSeed(v)
    }
}

/// Checks that `field` and `labels` describe the same grid and that the
/// field is finite.
pub fn validate_pair(field: &EmbeddingField, labels: &LabelImage) -> Result<()> {
    if !labels.matches_field(field) {
        return Err(Error::ShapeMismatch(format!(
            "field is {}x{}, labels are {}x{}",
            field.height(),
            field.width(),
            labels.height(),
            labels.width()
        )));
    }
    if let Some(pos) = field.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue(format!("field value at flat index {pos}")));
    }
    Ok(())
}

/// Checks the reserved-label conventions for a supervision mode.
pub fn validate_labels_for_mode(labels: &LabelImage, mode: Supervision) -> Result<()> {
    match mode {
        Supervision::Full => {
            if !labels.labels().iter().any(|&l| l >= BACKGROUND) {
                return Err(Error::NoLabeledCluster);
            }
        }
        Supervision::Sparse => {
            if labels.has_label(BACKGROUND) {
                return Err(Error::InvalidLabel(
                    "background label 1 is not allowed under sparse supervision".into(),
                ));
            }
            if labels.num_instances() == 0 {
                return Err(Error::NoLabeledCluster);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matching_pair_is_valid() {
        let f = EmbeddingField::zeros(4, 4, 2).unwrap();
        let l = LabelImage::filled(4, 4, 2).unwrap();
        validate_pair(&f, &l).unwrap();
    }

    #[test]
    fn mismatched_pair_is_rejected() {
        let f = EmbeddingField::zeros(4, 4, 2).unwrap();
        let l = LabelImage::filled(5, 4, 2).unwrap();
        assert!(matches!(validate_pair(&f, &l), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn nan_field_is_rejected() {
        let mut data = vec![0.0; 32];
        data[7] = f64::NAN;
        assert!(matches!(
            EmbeddingField::new(4, 4, 2, data),
            Err(Error::NonFiniteValue(_))
        ));
    }

    #[test]
    fn sparse_labels_must_not_contain_background() {
        let l = LabelImage::new(1, 3, vec![0, 1, 2]).unwrap();
        assert!(matches!(
            validate_labels_for_mode(&l, Supervision::Sparse),
            Err(Error::InvalidLabel(_))
        ));
        validate_labels_for_mode(&l, Supervision::Full).unwrap();
        let empty = LabelImage::filled(2, 2, 0).unwrap();
        assert!(matches!(
            validate_labels_for_mode(&empty, Supervision::Full),
            Err(Error::NoLabeledCluster)
        ));
    }

    #[test]
    fn default_config_is_valid() {
        LossConfig::default().validate().unwrap();
        let bad = LossConfig { kernel_t: 0.97, ..LossConfig::default() };
        assert!(bad.validate().is_err());
        let bad = LossConfig { delta_v: 0.0, ..LossConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn seed_streams_are_reproducible() {
        use rand::Rng;
        let a: u64 = RngSeed(3).stream(7).random();
        let b: u64 = RngSeed(3).stream(7).random();
        let c: u64 = RngSeed(3).stream(8).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
