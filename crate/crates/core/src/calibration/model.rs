use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::linalg::{Cholesky, Matrix};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `x_t = f(x_{t-1}, u_{t-1}; θ) + w_t`, `y_t = h(x_t; φ) + v_t` with φ fixed.
pub trait StateSpaceModel<T>: Sync {
    fn state_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn transition(&self, x: &[T], u: &[T], theta: &[T]) -> Vec<T>;
    fn observe(&self, x: &[T]) -> Vec<T>;
}

/// A model with its noise covariances and the ridge prior on θ.
#[derive(Clone, Debug)]
pub struct StateSpaceSpec<T, M> {
    pub model: M,
    process: Cholesky<T>,
    observation: Cholesky<T>,
    /// `R(θ) = ridge · ‖θ − θ₀‖²`.
    pub ridge: T,
    pub theta_prior: Vec<T>,
}

impl<T: Scalar, M: StateSpaceModel<T>> StateSpaceSpec<T, M> {
    pub fn new(model: M, process_cov: &Matrix<T>, obs_cov: &Matrix<T>, ridge: T) -> Result<Self> {
        let theta_prior = vec![T::zero(); model.param_dim()];
        Self::with_prior(model, process_cov, obs_cov, ridge, theta_prior)
    }

    pub fn with_prior(
        model: M,
        process_cov: &Matrix<T>,
        obs_cov: &Matrix<T>,
        ridge: T,
        theta_prior: Vec<T>,
    ) -> Result<Self> {
        if process_cov.rows() != model.state_dim() {
            return Err(Error::Dimension(format!(
                "process covariance is {}x{}, state dimension {}",
                process_cov.rows(),
                process_cov.cols(),
                model.state_dim()
            )));
        }
        if obs_cov.rows() != model.obs_dim() {
            return Err(Error::Dimension(format!(
                "observation covariance is {}x{}, observation dimension {}",
                obs_cov.rows(),
                obs_cov.cols(),
                model.obs_dim()
            )));
        }
        if theta_prior.len() != model.param_dim() {
            return Err(Error::Dimension(
                "θ prior length differs from parameter dimension".into(),
            ));
        }
        if !(ridge >= T::zero() && ridge.is_finite()) {
            return Err(Error::config("ridge weight must be >= 0"));
        }
        Ok(StateSpaceSpec {
            process: process_cov.cholesky()?,
            observation: obs_cov.cholesky()?,
            model,
            ridge,
            theta_prior,
        })
    }

    pub fn process(&self) -> &Cholesky<T> {
        &self.process
    }

    pub fn observation(&self) -> &Cholesky<T> {
        &self.observation
    }

    pub fn regularizer(&self, theta: &[T]) -> T {
        theta
            .iter()
            .zip(&self.theta_prior)
            .fold(T::zero(), |acc, (&t, &t0)| acc + (t - t0) * (t - t0))
            * self.ridge
    }
}

/// `f = A x + B u (+ θ)`, `h = C x`. With `drift` the parameter vector is a
/// state-sized additive offset in the transition.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel<T> {
    pub a: Matrix<T>,
    pub b: Matrix<T>,
    pub c: Matrix<T>,
    pub drift: bool,
}

impl<T: Scalar> LinearModel<T> {
    pub fn new(a: Matrix<T>, b: Matrix<T>, c: Matrix<T>, drift: bool) -> Result<Self> {
        let n = a.rows();
        if !a.is_square() || b.rows() != n || c.cols() != n {
            return Err(Error::Dimension(format!(
                "A {}x{}, B {}x{}, C {}x{} are inconsistent",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols(),
                c.rows(),
                c.cols()
            )));
        }
        Ok(LinearModel { a, b, c, drift })
    }

    /// Scalar model `x' = a x + b u (+ θ)`, `y = c x`.
    pub fn scalar(a: T, b: T, c: T, drift: bool) -> Self {
        LinearModel {
            a: Matrix::scalar(a),
            b: Matrix::scalar(b),
            c: Matrix::scalar(c),
            drift,
        }
    }
}

impl<T: Scalar> StateSpaceModel<T> for LinearModel<T> {
    fn state_dim(&self) -> usize {
        self.a.rows()
    }

    fn param_dim(&self) -> usize {
        if self.drift {
            self.a.rows()
        } else {
            0
        }
    }

    fn obs_dim(&self) -> usize {
        self.c.rows()
    }

    fn transition(&self, x: &[T], u: &[T], theta: &[T]) -> Vec<T> {
        let ax = self.a.mul_vec(x);
        let bu = if self.b.cols() == 0 || u.is_empty() {
            vec![T::zero(); ax.len()]
        } else {
            self.b.mul_vec(u)
        };
        ax.iter()
            .zip(&bu)
            .enumerate()
            .map(|(i, (&p, &q))| p + q + if self.drift { theta[i] } else { T::zero() })
            .collect()
    }

    fn observe(&self, x: &[T]) -> Vec<T> {
        self.c.mul_vec(x)
    }
}

/// Per-ROI dose-scaling state: `x_R` is the ratio of delivered to planned
/// mean dose in ROI `R`, following a random walk; `h(x)_R = x_R · planned_R`.
#[derive(Clone, Debug, PartialEq)]
pub struct DoseScalingModel<T> {
    pub planned_means: Vec<T>,
}

impl<T: Scalar> StateSpaceModel<T> for DoseScalingModel<T> {
    fn state_dim(&self) -> usize {
        self.planned_means.len()
    }

    fn param_dim(&self) -> usize {
        0
    }

    fn obs_dim(&self) -> usize {
        self.planned_means.len()
    }

    fn transition(&self, x: &[T], _u: &[T], _theta: &[T]) -> Vec<T> {
        x.to_vec()
    }

    fn observe(&self, x: &[T]) -> Vec<T> {
        x.iter().zip(&self.planned_means).map(|(&s, &p)| s * p).collect()
    }
}

/// Fraction-level summary measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FractionObservation<T> {
    pub fraction: usize,
    /// Id of the action delivered before this measurement.
    pub action: String,
    /// Control vector u_{t-1} for state-space models.
    pub control: Vec<T>,
    /// Global factor relating the delivered dose to the surrogate's planned
    /// prediction; `None` when the delivery is not a rescaled prediction.
    pub dose_scale: Option<T>,
    /// Observed mean dose per ROI (Gy), in ROI order.
    pub roi_means: Vec<(String, T)>,
}

impl<T: Scalar> FractionObservation<T> {
    pub fn new(fraction: usize, roi_means: Vec<(String, T)>) -> Self {
        FractionObservation {
            fraction,
            action: String::new(),
            control: Vec::new(),
            dose_scale: Some(T::one()),
            roi_means,
        }
    }

    pub fn values(&self) -> Vec<T> {
        self.roi_means.iter().map(|(_, v)| *v).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = self
            .roi_means
            .iter()
            .map(|(_, v)| *v)
            .chain(self.control.iter().copied())
            .chain(self.dose_scale)
            .any(|v| !v.is_finite());
        if bad {
            return Err(Error::NonFinite {
                what: format!("observation for fraction {}", self.fraction),
                index: 0,
            });
        }
        Ok(())
    }
}

/// Writes observations as `fraction,roi,observed_mean_gy,action,dose_scale`.
pub fn write_observations<T: Scalar>(path: &Path, observations: &[FractionObservation<T>]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "fraction,roi,observed_mean_gy,action,dose_scale").map_err(io)?;
    for o in observations {
        let scale = o.dose_scale.map(|s| s.to_string()).unwrap_or_default();
        for (roi, v) in &o.roi_means {
            writeln!(w, "{},{roi},{v},{},{scale}", o.fraction, o.action).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads the observation CSV. `fraction`, `roi` and `observed_mean_gy` are
/// required columns; `action` and `dose_scale` (empty = not attributable)
/// are optional. Rows are grouped by fraction in ascending order.
pub fn read_observations<T: Scalar>(path: &Path) -> Result<Vec<FractionObservation<T>>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let (Some(c_frac), Some(c_roi), Some(c_val)) = (col("fraction"), col("roi"), col("observed_mean_gy")) else {
        return Err(parse_err(
            1,
            "header must contain fraction, roi, observed_mean_gy".into(),
        ));
    };
    let (c_action, c_scale) = (col("action"), col("dose_scale"));
    let mut by_fraction: std::collections::BTreeMap<usize, FractionObservation<T>> = Default::default();
    for (n, row) in reader.records().enumerate() {
        let row = row?;
        let line = n + 2;
        let field = |c: usize| row.get(c).unwrap_or("").trim();
        let fraction: usize = field(c_frac)
            .parse()
            .map_err(|_| parse_err(line, format!("invalid fraction `{}`", field(c_frac))))?;
        let value: T = field(c_val)
            .parse()
            .map_err(|_| parse_err(line, format!("invalid dose `{}`", field(c_val))))?;
        if !value.is_finite() {
            return Err(parse_err(line, "non-finite observed dose".into()));
        }
        let obs = by_fraction
            .entry(fraction)
            .or_insert_with(|| FractionObservation::new(fraction, Vec::new()));
        if let Some(c) = c_action {
            obs.action = field(c).to_string();
        }
        if let Some(c) = c_scale {
            obs.dose_scale = match field(c) {
                "" => None,
                s => Some(
                    s.parse()
                        .map_err(|_| parse_err(line, format!("invalid dose_scale `{s}`")))?,
                ),
            };
        }
        obs.roi_means.push((field(c_roi).to_string(), value));
    }
    Ok(by_fraction.into_values().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn observation_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.csv");
        let mut a = FractionObservation::new(2, vec![("PTV".into(), 59.5), ("Cord".into(), 20.25)]);
        a.action = "scale_1.00".into();
        let mut b = FractionObservation::new(1, vec![("PTV".into(), 60.0)]);
        b.dose_scale = None;
        write_observations(&path, &[a.clone(), b.clone()]).unwrap();
        let back: Vec<FractionObservation<f64>> = read_observations(&path).unwrap();
        assert_eq!(back, vec![b, a]);
    }

    #[test]
    fn observation_csv_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.csv");
        assert!(matches!(read_observations::<f64>(&path), Err(Error::MissingFile(_))));
        std::fs::write(&path, "fraction,roi\n1,PTV\n").unwrap();
        assert!(read_observations::<f64>(&path).is_err());
        std::fs::write(&path, "fraction,roi,observed_mean_gy\n1,PTV,abc\n").unwrap();
        assert!(matches!(
            read_observations::<f64>(&path),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn spec_rejects_bad_covariances() {
        let m = LinearModel::scalar(1.0, 0.0, 1.0, false);
        assert!(StateSpaceSpec::new(m.clone(), &Matrix::scalar(-1.0), &Matrix::scalar(1.0), 0.0).is_err());
        assert!(StateSpaceSpec::new(m.clone(), &Matrix::identity(2), &Matrix::scalar(1.0), 0.0).is_err());
        assert!(StateSpaceSpec::new(m, &Matrix::scalar(1.0), &Matrix::scalar(1.0), 0.0).is_ok());
    }
}
