//! Synthetic ground-truth scenes of non-overlapping disks or ellipses.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{EmbeddingField, LabelImage, RngSeed, BACKGROUND, FIRST_INSTANCE};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    #[default]
    Disk,
    Ellipse,
}

impl FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disk" => Ok(Shape::Disk),
            "ellipse" => Ok(Shape::Ellipse),
            other => Err(Error::InvalidConfig(format!("unknown shape {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub n_instances: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Minimum background gap between instance outlines, in pixels.
    pub min_gap: f64,
    pub shape: Shape,
    pub seed: RngSeed,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 48,
            width: 48,
            n_instances: 4,
            radius_min: 5.0,
            radius_max: 7.0,
            min_gap: 2.0,
            shape: Shape::Disk,
            seed: RngSeed(0),
        }
    }
}

/// One placed instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blob {
    pub center: (f64, f64),
    /// Semi-axes along the rotated row and column directions.
    pub axes: (f64, f64),
    pub angle: f64,
}

impl Blob {
    fn bounding_radius(&self) -> f64 {
        self.axes.0.max(self.axes.1)
    }

    pub fn contains(&self, row: f64, col: f64) -> bool {
        let (dr, dc) = (row - self.center.0, col - self.center.1);
        let (s, c) = self.angle.sin_cos();
        let u = c * dr + s * dc;
        let v = -s * dr + c * dc;
        (u / self.axes.0).powi(2) + (v / self.axes.1).powi(2) <= 1.0
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidConfig("scene must be at least 1x1".into()));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max && self.radius_max.is_finite())
        {
            return Err(Error::InvalidConfig(format!(
                "radius range [{}, {}] is invalid",
                self.radius_min, self.radius_max
            )));
        }
        if !(self.min_gap.is_finite() && self.min_gap >= 0.0) {
            return Err(Error::InvalidConfig(format!("min_gap must be >= 0, got {}", self.min_gap)));
        }
        Ok(())
    }
}

/// Places the instances by rejection sampling, at most `10 * n_instances`
/// attempts per instance.
pub fn place_blobs(spec: &SceneSpec) -> Result<Vec<Blob>> {
    spec.validate()?;
    let mut rng = spec.seed.rng();
    let mut blobs: Vec<Blob> = Vec::with_capacity(spec.n_instances);
    let attempts = 10 * spec.n_instances;
    for k in 0..spec.n_instances {
        let mut placed = None;
        for _ in 0..attempts {
            let a = rng.random_range(spec.radius_min..=spec.radius_max);
            let (axes, angle) = match spec.shape {
                Shape::Disk => ((a, a), 0.0),
                Shape::Ellipse => {
                    let b = rng.random_range(spec.radius_min..=spec.radius_max);
                    ((a, b), rng.random_range(0.0..PI))
                }
            };
            let r = a.max(axes.1);
            let (lo_r, hi_r) = (r, spec.height as f64 - 1.0 - r);
            let (lo_c, hi_c) = (r, spec.width as f64 - 1.0 - r);
            if lo_r > hi_r || lo_c > hi_c {
                continue;
            }
            let center = (rng.random_range(lo_r..=hi_r), rng.random_range(lo_c..=hi_c));
            let candidate = Blob { center, axes, angle };
            let clear = blobs.iter().all(|b| {
                let d = ((b.center.0 - center.0).powi(2) + (b.center.1 - center.1).powi(2)).sqrt();
                d >= b.bounding_radius() + r + spec.min_gap
            });
            if clear {
                placed = Some(candidate);
                break;
            }
        }
        match placed {
            Some(b) => blobs.push(b),
            None => {
                return Err(Error::InfeasibleSpec(format!(
                    "could not place instance {} of {} after {attempts} attempts",
                    k + 1,
                    spec.n_instances
                )))
            }
        }
    }
    Ok(blobs)
}

/// Rasterizes the scene: instances are labeled `2..=n_instances + 1`, the
/// rest is background.
pub fn generate(spec: &SceneSpec) -> Result<LabelImage> {
    let blobs = place_blobs(spec)?;
    let mut labels = vec![BACKGROUND; spec.height * spec.width];
    for (k, blob) in blobs.iter().enumerate() {
        let id = FIRST_INSTANCE + k as u64;
        for r in 0..spec.height {
            for c in 0..spec.width {
                if blob.contains(r as f64, c as f64) {
                    labels[r * spec.width + c] = id;
                }
            }
        }
    }
    LabelImage::new(spec.height, spec.width, labels)
}

/// An embedding field for `labels` in which every label, background
/// included, sits at its own random center drawn from `N(0, spread)` per
/// channel, plus i.i.d. `N(0, noise)` jitter per coordinate.
pub fn blob_field(
    labels: &LabelImage,
    channels: usize,
    spread: f64,
    noise: f64,
    seed: RngSeed,
) -> Result<EmbeddingField> {
    let center_dist = Normal::new(0.0, spread)
        .map_err(|e| Error::Domain(format!("center spread {spread}: {e}")))?;
    let noise_dist =
        Normal::new(0.0, noise).map_err(|e| Error::Domain(format!("noise std {noise}: {e}")))?;
    let mut rng = seed.rng();
    let centers: BTreeMap<u64, Vec<f64>> = labels
        .groups()
        .into_keys()
        .map(|l| (l, (0..channels).map(|_| center_dist.sample(&mut rng)).collect()))
        .collect();
    EmbeddingField::from_pixels(labels.height(), labels.width(), channels, |i, px| {
        for (v, m) in px.iter_mut().zip(&centers[&labels.get(i)]) {
            *v = m + noise_dist.sample(&mut rng);
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene_is_background() {
        let spec = SceneSpec { n_instances: 0, ..SceneSpec::default() };
        let img = generate(&spec).unwrap();
        assert!(img.labels().iter().all(|&l| l == BACKGROUND));
    }

    #[test]
    fn default_scene_has_four_disjoint_disks() {
        for seed in 0..20 {
            let spec = SceneSpec { seed: RngSeed(seed), ..SceneSpec::default() };
            let img = generate(&spec).unwrap();
            let blobs = place_blobs(&spec).unwrap();
            assert_eq!(img.instance_ids(), vec![2, 3, 4, 5]);
            let groups = img.groups();
            for (k, blob) in blobs.iter().enumerate() {
                let pixels = &groups[&(FIRST_INSTANCE + k as u64)];
                // every pixel inside the disk carries this label, so none overlap
                let inside = (0..48 * 48)
                    .filter(|i| blob.contains((i / 48) as f64, (i % 48) as f64))
                    .count();
                assert_eq!(pixels.len(), inside);
                assert!(pixels.len() as f64 >= PI * 25.0 / 2.0);
            }
            for (i, a) in blobs.iter().enumerate() {
                for b in &blobs[i + 1..] {
                    let d = ((a.center.0 - b.center.0).powi(2) + (a.center.1 - b.center.1).powi(2))
                        .sqrt();
                    assert!(d >= a.axes.0 + b.axes.0 + 2.0);
                }
            }
            assert_eq!(img, generate(&spec).unwrap());
        }
    }

    #[test]
    fn ellipses_respect_minimum_size() {
        let spec = SceneSpec {
            shape: Shape::Ellipse,
            n_instances: 3,
            radius_min: 4.0,
            radius_max: 8.0,
            seed: RngSeed(3),
            ..SceneSpec::default()
        };
        let img = generate(&spec).unwrap();
        assert_eq!(img.num_instances(), 3);
        for (l, px) in img.groups() {
            if l >= FIRST_INSTANCE {
                assert!(px.len() as f64 >= PI * 16.0 / 2.0);
            }
        }
    }

    #[test]
    fn overcrowded_scene_is_infeasible() {
        let spec = SceneSpec { height: 16, width: 16, n_instances: 10, ..SceneSpec::default() };
        assert!(matches!(generate(&spec), Err(Error::InfeasibleSpec(_))));
        let tiny = SceneSpec { height: 5, width: 5, n_instances: 1, ..SceneSpec::default() };
        assert!(matches!(generate(&tiny), Err(Error::InfeasibleSpec(_))));
    }

    #[test]
    fn blob_field_groups_by_label() {
        let labels = generate(&SceneSpec::default()).unwrap();
        let field = blob_field(&labels, 4, 2.0, 0.0, RngSeed(1)).unwrap();
        for (_, px) in labels.groups() {
            assert!(px.iter().all(|&i| field.pixel(i) == field.pixel(px[0])));
        }
        assert_eq!(field, blob_field(&labels, 4, 2.0, 0.0, RngSeed(1)).unwrap());
        assert!(blob_field(&labels, 4, f64::NAN, 0.1, RngSeed(1)).is_err());
    }
}
