use serde::{Deserialize, Serialize};

use super::linalg::Matrix;
use super::model::FractionObservation;
use crate::error::{Error, Result};
use crate::grid::PatientRecord;
use crate::scalar::{ordered_sum, Scalar};
use crate::surrogate::{pre_activation, FeatureSet, ParamVector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecalibrationConfig<T> {
    /// Weight of the pull `‖w − w_prev‖²` toward the pre-update decoder.
    pub ridge: T,
    pub max_iterations: usize,
    /// Stops once an accepted step lowers the objective by less than this.
    pub tolerance: T,
}

impl<T: Scalar> Default for RecalibrationConfig<T> {
    fn default() -> Self {
        RecalibrationConfig {
            ridge: T::one(),
            max_iterations: 50,
            tolerance: T::of(1e-12),
        }
    }
}

impl<T: Scalar> RecalibrationConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.ridge > T::zero() && self.ridge.is_finite()) {
            return Err(Error::config("recalibration ridge must be > 0"));
        }
        if self.max_iterations == 0 {
            return Err(Error::config("recalibration needs at least one iteration"));
        }
        if !(self.tolerance >= T::zero()) {
            return Err(Error::config("recalibration tolerance must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RecalibrationOutcome<T> {
    pub params: ParamVector<T>,
    /// Summary misfit plus ridge, at the pre-update and returned decoder.
    pub objective_before: T,
    pub objective_after: T,
    /// Number of (fraction, ROI) summaries used.
    pub n_summaries: usize,
}

struct Term<T> {
    roi_voxels: Vec<usize>,
    scale: T,
    observed: T,
}

/// Decoder-only recalibration to fraction-level per-ROI mean doses.
///
/// Minimizes `Σ (y − s · mean_R relu(Σ a_f w_f φ_f))² + ridge · ‖w − w_prev‖²`
/// over the decoder `w` by damped Gauss-Newton. Steps that do not lower the
/// objective are rejected, and the encoder is never touched. Observations
/// without a dose scale, and ROIs unknown to `patient`, are ignored.
pub fn proxy_recalibrate<T: Scalar>(
    params: &ParamVector<T>,
    patient: &PatientRecord<T>,
    features: &FeatureSet<T>,
    observations: &[FractionObservation<T>],
    cfg: &RecalibrationConfig<T>,
) -> Result<RecalibrationOutcome<T>> {
    cfg.validate()?;
    if features.len() != params.n_features() {
        return Err(Error::Dimension(format!(
            "{} features for {} decoder weights",
            features.len(),
            params.n_features()
        )));
    }
    features.shape().ensure_same(patient.shape(), "features vs patient")?;
    let mut terms = Vec::new();
    for obs in observations {
        obs.validate()?;
        let Some(scale) = obs.dose_scale else { continue };
        for (roi, observed) in &obs.roi_means {
            if let Some(r) = patient.rois.get(roi) {
                if !r.mask.is_empty() {
                    terms.push(Term {
                        roi_voxels: r.mask.indices().collect(),
                        scale,
                        observed: *observed,
                    });
                }
            }
        }
    }
    if terms.is_empty() {
        return Err(Error::NoObservation(format!(
            "none of {} observations maps to a ROI mean of patient `{}`",
            observations.len(),
            patient.id
        )));
    }

    let w0 = params.decoder().to_vec();
    let n = w0.len();
    let grids = features.grids();
    let encoder = params.encoder();

    // Residuals y - s·m(w) and, on request, their Jacobian d(s·m)/dw.
    let evaluate = |w: &[T], with_jacobian: bool| -> Result<(Vec<T>, Option<Matrix<T>>)> {
        let p = params.with_decoder(w.to_vec())?;
        let z = pre_activation(&p, features, None)?;
        let mut res = Vec::with_capacity(terms.len());
        let mut jac = with_jacobian.then(|| Matrix::zeros(terms.len(), n));
        for (t, term) in terms.iter().enumerate() {
            let count = T::of_usize(term.roi_voxels.len());
            let mean = ordered_sum(term.roi_voxels.iter().map(|&r| z[r].max(T::zero()))) / count;
            res.push(term.observed - term.scale * mean);
            if let Some(j) = jac.as_mut() {
                for f in 0..n {
                    let active = term
                        .roi_voxels
                        .iter()
                        .filter(|&&r| z[r] > T::zero())
                        .map(|&r| grids[f][r]);
                    j[(t, f)] = term.scale * encoder[f] * ordered_sum(active) / count;
                }
            }
        }
        Ok((res, jac))
    };
    let objective = |w: &[T], res: &[T]| -> T {
        let misfit = ordered_sum(res.iter().map(|&r| r * r));
        let pull = ordered_sum(w.iter().zip(&w0).map(|(&a, &b)| (a - b) * (a - b)));
        misfit + cfg.ridge * pull
    };

    let mut w = w0.clone();
    let (mut res, _) = evaluate(&w, false)?;
    let before = objective(&w, &res);
    if !before.is_finite() {
        return Err(Error::NonFiniteObjective(format!(
            "recalibration objective is {before}"
        )));
    }
    let mut current = before;
    for _ in 0..cfg.max_iterations {
        let (_, jac) = evaluate(&w, true)?;
        let jac = jac.expect("jacobian requested");
        // Normal equations of the linearized problem in the step d = w_new - w:
        // (JᵀJ + ridge I) d = Jᵀ res − ridge (w − w0).
        let mut lhs = Matrix::zeros(n, n);
        let mut rhs = vec![T::zero(); n];
        for a in 0..n {
            rhs[a] = ordered_sum((0..terms.len()).map(|t| jac[(t, a)] * res[t])) - cfg.ridge * (w[a] - w0[a]);
            for b in 0..n {
                lhs[(a, b)] = ordered_sum((0..terms.len()).map(|t| jac[(t, a)] * jac[(t, b)]));
            }
            lhs[(a, a)] = lhs[(a, a)] + cfg.ridge;
        }
        let step = lhs.cholesky()?.solve(&rhs);
        let mut accepted = false;
        let mut fraction = T::one();
        for _ in 0..30 {
            let trial: Vec<T> = w.iter().zip(&step).map(|(&a, &d)| a + fraction * d).collect();
            let (trial_res, _) = evaluate(&trial, false)?;
            let value = objective(&trial, &trial_res);
            if value.is_finite() && value < current {
                let decrease = current - value;
                w = trial;
                res = trial_res;
                current = value;
                accepted = decrease > cfg.tolerance * (T::one() + current);
                break;
            }
            fraction = fraction * T::of(0.5);
        }
        if !accepted {
            break;
        }
    }
    Ok(RecalibrationOutcome {
        params: params.with_decoder(w)?,
        objective_before: before,
        objective_after: current,
        n_summaries: terms.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GridShape, MaskGrid, Roi, RoiRole, ScalarGrid};
    use std::collections::BTreeMap;

    fn patient() -> (PatientRecord<f64>, FeatureSet<f64>) {
        let shape = GridShape::cubic(4, 1.0).unwrap();
        let mut rois = BTreeMap::new();
        rois.insert(
            "T".to_string(),
            Roi {
                role: RoiRole::Target,
                mask: MaskGrid::from_fn(shape, |i| i % 2 == 0),
            },
        );
        let record =
            PatientRecord::new("p", ScalarGrid::zeros(shape), rois, MaskGrid::full(shape), None, 60.0).unwrap();
        let phi = ScalarGrid::from_fn(shape, |i| 1.0 + (i % 7) as f64).unwrap();
        let features = FeatureSet::new(vec!["phi".into()], vec![phi]).unwrap();
        (record, features)
    }

    #[test]
    fn empty_observations_rejected() {
        let (record, features) = patient();
        let params = ParamVector::linear(vec![1.0], 0.1).unwrap();
        let err = proxy_recalibrate(&params, &record, &features, &[], &RecalibrationConfig::default());
        assert!(matches!(err, Err(Error::NoObservation(_))));
    }

    #[test]
    fn matching_observation_is_a_fixed_point() {
        let (record, features) = patient();
        let params = ParamVector::new(vec![0.5], vec![3.0], 0.1).unwrap();
        let mean: f64 = record.rois["T"]
            .mask
            .indices()
            .map(|i| 1.5 * features.grid(0)[i])
            .sum::<f64>()
            / record.rois["T"].mask.count() as f64;
        let obs = FractionObservation::new(1, vec![("T".into(), mean)]);
        let out = proxy_recalibrate(&params, &record, &features, &[obs], &RecalibrationConfig::default()).unwrap();
        assert_eq!(out.params, params);
    }
}
