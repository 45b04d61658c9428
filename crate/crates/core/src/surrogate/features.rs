use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{gaussian_smooth, signed_distance, GridShape, PatientRecord, ScalarGrid};
use crate::phantom::falloff_profile;
use crate::scalar::Scalar;

/// Which spatial feature channels the surrogate sees.
///
/// Channel order is fixed: bias, then per ROI channel the signed distance and
/// each falloff width, then per smoothing scale the smoothed CT and smoothed
/// target mask, then the contour-consistency channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    /// ROI names in channel order. A name absent from a record yields the
    /// "far away" channel values so that feature layouts stay aligned.
    pub roi_channels: Vec<String>,
    #[serde(default = "yes")]
    pub signed_distance: bool,
    /// Gaussian falloff widths (mm) applied to each ROI's signed distance.
    #[serde(default)]
    pub falloff_widths_mm: Vec<f64>,
    #[serde(default)]
    pub smoothing_scales_mm: Vec<f64>,
    #[serde(default = "yes")]
    pub include_bias: bool,
    /// When set, adds `max(0, |CT - median target CT| - tol)` inside the
    /// target contours. It is exactly 0 while the image agrees with the
    /// contours and grows when they disagree.
    #[serde(default)]
    pub consistency_tolerance_hu: Option<f64>,
    /// Signed distance assigned to every voxel for an absent ROI.
    #[serde(default = "default_missing_distance")]
    pub missing_distance_mm: f64,
}

fn yes() -> bool {
    true
}

fn default_missing_distance() -> f64 {
    100.0
}

impl FeatureConfig {
    pub fn new(roi_channels: impl IntoIterator<Item = impl Into<String>>) -> Self {
        FeatureConfig {
            roi_channels: roi_channels.into_iter().map(Into::into).collect(),
            signed_distance: true,
            falloff_widths_mm: Vec::new(),
            smoothing_scales_mm: Vec::new(),
            include_bias: true,
            consistency_tolerance_hu: None,
            missing_distance_mm: default_missing_distance(),
        }
    }

    /// Bias-only configuration (F = 1).
    pub fn bias_only() -> Self {
        FeatureConfig {
            signed_distance: false,
            ..Self::new(Vec::<String>::new())
        }
    }

    pub fn n_distance_features(&self) -> usize {
        self.signed_distance as usize + self.falloff_widths_mm.len()
    }

    pub fn n_smoothing_scales(&self) -> usize {
        self.smoothing_scales_mm.len()
    }

    pub fn n_features(&self) -> usize {
        self.include_bias as usize
            + self.roi_channels.len() * self.n_distance_features()
            + 2 * self.n_smoothing_scales()
            + self.consistency_tolerance_hu.is_some() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_features() == 0 {
            return Err(Error::config("feature configuration yields no features"));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !self.falloff_widths_mm.iter().all(|&w| positive(w)) {
            return Err(Error::config("falloff widths must be > 0"));
        }
        if !self.smoothing_scales_mm.iter().all(|&s| positive(s)) {
            return Err(Error::config("smoothing scales must be > 0"));
        }
        if let Some(tol) = self.consistency_tolerance_hu {
            if !(tol.is_finite() && tol >= 0.0) {
                return Err(Error::config("consistency tolerance must be >= 0"));
            }
        }
        if !self.missing_distance_mm.is_finite() {
            return Err(Error::config("missing-ROI distance must be finite"));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = self.roi_channels.iter().find(|n| !seen.insert(*n)) {
            return Err(Error::config(format!("duplicate ROI channel `{dup}`")));
        }
        Ok(())
    }

    /// Channel names in feature order.
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.n_features());
        if self.include_bias {
            names.push("bias".to_string());
        }
        for roi in &self.roi_channels {
            if self.signed_distance {
                names.push(format!("sdist:{roi}"));
            }
            for w in &self.falloff_widths_mm {
                names.push(format!("falloff{w}mm:{roi}"));
            }
        }
        for s in &self.smoothing_scales_mm {
            names.push(format!("ct_smooth{s}mm"));
            names.push(format!("target_smooth{s}mm"));
        }
        if self.consistency_tolerance_hu.is_some() {
            names.push("consistency".to_string());
        }
        names
    }
}

/// F named feature grids sharing one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet<T> {
    names: Vec<String>,
    grids: Vec<ScalarGrid<T>>,
}

impl<T: Scalar> FeatureSet<T> {
    pub fn new(names: Vec<String>, grids: Vec<ScalarGrid<T>>) -> Result<Self> {
        if grids.is_empty() || names.len() != grids.len() {
            return Err(Error::Dimension(format!(
                "{} feature names for {} grids",
                names.len(),
                grids.len()
            )));
        }
        let shape = *grids[0].shape();
        for g in &grids[1..] {
            shape.ensure_same(g.shape(), "feature grids")?;
        }
        Ok(FeatureSet { names, grids })
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    pub fn shape(&self) -> &GridShape {
        self.grids[0].shape()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn grids(&self) -> &[ScalarGrid<T>] {
        &self.grids
    }

    pub fn grid(&self, f: usize) -> &ScalarGrid<T> {
        &self.grids[f]
    }
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn featurize<T: Scalar>(record: &PatientRecord<T>, cfg: &FeatureConfig) -> Result<FeatureSet<T>> {
    cfg.validate()?;
    record.validate()?;
    let shape = *record.shape();
    let n = shape.len();

    let distance_channels: Vec<Vec<Vec<f64>>> = cfg
        .roi_channels
        .par_iter()
        .map(|name| {
            let sd = match record.rois.get(name) {
                Some(roi) if !roi.mask.is_empty() => signed_distance(&roi.mask),
                _ => vec![cfg.missing_distance_mm; n],
            };
            let mut out = Vec::with_capacity(cfg.n_distance_features());
            for &w in &cfg.falloff_widths_mm {
                out.push(falloff_profile(&sd, w));
            }
            if cfg.signed_distance {
                out.insert(0, sd);
            }
            out
        })
        .collect();

    let target = record.target_union().ok();
    let ct: Vec<f64> = record.ct.values().iter().map(|v| v.as_f64()).collect();
    let target_indicator: Vec<f64> = match &target {
        Some(t) => t.members().iter().map(|&m| m as u8 as f64).collect(),
        None => vec![0.0; n],
    };
    let smoothed: Vec<[Vec<f64>; 2]> = cfg
        .smoothing_scales_mm
        .par_iter()
        .map(|&s| {
            [
                gaussian_smooth(&ct, &shape, s),
                gaussian_smooth(&target_indicator, &shape, s),
            ]
        })
        .collect();

    let mut channels: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_features());
    if cfg.include_bias {
        channels.push(vec![1.0; n]);
    }
    channels.extend(distance_channels.into_iter().flatten());
    for [c, t] in smoothed {
        channels.push(c);
        channels.push(t);
    }
    if let Some(tol) = cfg.consistency_tolerance_hu {
        let mut channel = vec![0.0; n];
        if let Some(t) = &target {
            let reference = median(t.indices().map(|i| ct[i]).collect());
            for i in t.indices() {
                channel[i] = ((ct[i] - reference).abs() - tol).max(0.0);
            }
        }
        channels.push(channel);
    }

    let grids = channels
        .into_iter()
        .map(|c| ScalarGrid::new(shape, c.into_iter().map(T::of).collect()))
        .collect::<Result<Vec<_>>>()?;
    FeatureSet::new(cfg.feature_names(), grids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{MaskGrid, Roi, RoiRole};
    use crate::phantom::{generate_phantom, PhantomSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    #[test]
    fn bias_only_is_single_ones_grid() {
        let record = generate_phantom(&PhantomSpec::<f64>::desk_default("p", 1)).unwrap();
        let fs = featurize(&record, &FeatureConfig::bias_only()).unwrap();
        assert_eq!(fs.len(), 1);
        assert!(fs.grid(0).values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn layout_matches_names() {
        let mut cfg = FeatureConfig::new(["PTV", "Cord", "Missing"]);
        cfg.falloff_widths_mm = vec![5.0, 7.0];
        cfg.smoothing_scales_mm = vec![3.0];
        cfg.consistency_tolerance_hu = Some(50.0);
        let record = generate_phantom(&PhantomSpec::<f64>::desk_default("p", 1)).unwrap();
        let fs = featurize(&record, &cfg).unwrap();
        assert_eq!(fs.len(), 1 + 3 * 3 + 2 + 1);
        assert_eq!(fs.names()[1], "sdist:PTV");
        assert_eq!(fs.names()[2], "falloff5mm:PTV");
        // Absent ROI: constant far distance, zero-ish falloff.
        assert!(fs.grid(7).values().iter().all(|&v| v == 100.0));
        // Anatomy consistent with contours: consistency channel is exactly 0.
        assert!(fs.grid(12).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn distance_features_match_brute_nearest_surface() {
        let shape = GridShape::new(8, 8, 8, [1.0, 1.5, 2.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mask = MaskGrid::from_fn(shape, |i| {
            let p = shape.position(i);
            let c = [4.0, 5.0, 7.0];
            (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>() <= 9.0 + rng.random::<f64>()
        });
        let mut rois = BTreeMap::new();
        rois.insert(
            "T".to_string(),
            Roi {
                role: RoiRole::Target,
                mask: mask.clone(),
            },
        );
        let ct = ScalarGrid::<f64>::zeros(shape);
        let record = PatientRecord::new("r", ct, rois, MaskGrid::full(shape), None, 1.0).unwrap();
        let cfg = FeatureConfig {
            include_bias: false,
            ..FeatureConfig::new(["T"])
        };
        let fs = featurize(&record, &cfg).unwrap();
        let sd = fs.grid(0).values();

        let on_surface = |i: usize| {
            let (x, y, z) = shape.unflatten(i);
            let c = [x as isize, y as isize, z as isize];
            let dims = shape.dims();
            (0..3).any(|a| {
                [-1isize, 1].iter().any(|&d| {
                    let mut q = c;
                    q[a] += d;
                    q[a] < 0
                        || q[a] >= dims[a] as isize
                        || !mask.contains(shape.flatten(q[0] as usize, q[1] as usize, q[2] as usize))
                })
            })
        };
        let surface: Vec<usize> = mask.indices().filter(|&i| on_surface(i)).collect();
        for i in 0..shape.len() {
            let p = shape.position(i);
            let d = surface
                .iter()
                .map(|&s| {
                    let q = shape.position(s);
                    (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>().sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            let expected = if mask.contains(i) { -d } else { d };
            assert!((sd[i] - expected).abs() < 1e-9, "voxel {i}: {} vs {expected}", sd[i]);
            if surface.contains(&i) {
                assert_eq!(sd[i], 0.0);
            }
        }
    }

    #[test]
    fn rejects_empty_configuration() {
        let cfg = FeatureConfig {
            include_bias: false,
            ..FeatureConfig::new(Vec::<String>::new())
        };
        assert!(cfg.validate().is_err());
        let mut cfg = FeatureConfig::new(["A"]);
        cfg.smoothing_scales_mm = vec![0.0];
        assert!(cfg.validate().is_err());
    }
}
