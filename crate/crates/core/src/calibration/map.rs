use log::warn;
use serde::{Deserialize, Serialize};

use super::linalg::Matrix;
use super::model::{FractionObservation, StateSpaceModel, StateSpaceSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    pub max_iterations: usize,
    /// Converged when the objective decreases by less than this between steps.
    pub tolerance: f64,
    /// Relative central-difference step for the Jacobian.
    pub fd_step: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            max_iterations: 100,
            tolerance: 1e-14,
            fd_step: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapResult<T> {
    pub x: Vec<T>,
    pub theta: Vec<T>,
    pub objective: T,
    pub initial_objective: T,
    pub iterations: usize,
    /// False when the iteration budget ran out first.
    pub converged: bool,
}

/// Whitened residual vector whose squared norm is the MAP objective
/// `‖y − h(x)‖²_{Σv⁻¹} + ‖x − f(x_prev, u; θ)‖²_{Σw⁻¹} + R(θ)`.
fn residuals<T: Scalar, M: StateSpaceModel<T>>(
    z: &[T],
    x_prev: &[T],
    u_prev: &[T],
    y: &[T],
    spec: &StateSpaceSpec<T, M>,
) -> Vec<T> {
    let nx = spec.model.state_dim();
    let (x, theta) = z.split_at(nx);
    let obs: Vec<T> = y.iter().zip(spec.model.observe(x)).map(|(&a, b)| a - b).collect();
    let pred = spec.model.transition(x_prev, u_prev, theta);
    let dyn_r: Vec<T> = x.iter().zip(pred).map(|(&a, b)| a - b).collect();
    let root = spec.ridge.sqrt();
    let mut out = spec.observation().whiten(&obs);
    out.extend(spec.process().whiten(&dyn_r));
    out.extend(theta.iter().zip(&spec.theta_prior).map(|(&t, &t0)| root * (t - t0)));
    out
}

fn norm2<T: Scalar>(r: &[T]) -> T {
    r.iter().fold(T::zero(), |acc, &v| acc + v * v)
}

/// MAP calibration step.
///
/// Minimizes the whitened least-squares objective with Levenberg-Marquardt
/// steps on a central finite-difference Jacobian. A step is accepted only if
/// it lowers the objective, so the result never exceeds the initial value.
pub fn map_update<T: Scalar, M: StateSpaceModel<T>>(
    x_prev: &[T],
    u_prev: &[T],
    obs: &FractionObservation<T>,
    spec: &StateSpaceSpec<T, M>,
    init: (&[T], &[T]),
    cfg: &MapConfig,
) -> Result<MapResult<T>> {
    obs.validate()?;
    let (nx, nt) = (spec.model.state_dim(), spec.model.param_dim());
    let y = obs.values();
    if x_prev.len() != nx || init.0.len() != nx || init.1.len() != nt || y.len() != spec.model.obs_dim() {
        return Err(Error::Dimension("MAP inputs do not match the model dimensions".into()));
    }
    let mut z: Vec<T> = init.0.iter().chain(init.1).copied().collect();
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteObjective("initial point is not finite".into()));
    }
    let eval = |z: &[T]| residuals(z, x_prev, u_prev, &y, spec);
    let mut r = eval(&z);
    let mut f = norm2(&r);
    if !f.is_finite() {
        return Err(Error::NonFiniteObjective(format!("objective at init is {f}")));
    }
    let initial = f;
    let dim = z.len();
    let mut lambda = T::of(1e-3);
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        iterations += 1;
        if f == T::zero() {
            converged = true;
            break;
        }
        let mut jac = Matrix::zeros(r.len(), dim);
        for j in 0..dim {
            let h = T::of(cfg.fd_step) * z[j].abs().max(T::one());
            let mut up = z.clone();
            let mut down = z.clone();
            up[j] = up[j] + h;
            down[j] = down[j] - h;
            let (ru, rd) = (eval(&up), eval(&down));
            for i in 0..r.len() {
                jac[(i, j)] = (ru[i] - rd[i]) / (h + h);
            }
        }
        let mut jtj = Matrix::zeros(dim, dim);
        let mut jtr = vec![T::zero(); dim];
        for a in 0..dim {
            for i in 0..r.len() {
                jtr[a] = jtr[a] + jac[(i, a)] * r[i];
            }
            for b in 0..dim {
                let mut s = T::zero();
                for i in 0..r.len() {
                    s = s + jac[(i, a)] * jac[(i, b)];
                }
                jtj[(a, b)] = s;
            }
        }

        let mut accepted = None;
        for _ in 0..40 {
            let mut damped = jtj.clone();
            for a in 0..dim {
                damped[(a, a)] = damped[(a, a)] * (T::one() + lambda) + lambda * T::of(1e-12);
            }
            let Ok(chol) = damped.cholesky() else {
                lambda = lambda * T::of(10.0);
                continue;
            };
            let step = chol.solve(&jtr);
            let trial: Vec<T> = z.iter().zip(&step).map(|(&a, &s)| a - s).collect();
            let rt = eval(&trial);
            let ft = norm2(&rt);
            if ft.is_finite() && ft < f {
                lambda = (lambda / T::of(10.0)).max(T::of(1e-12));
                accepted = Some((trial, rt, ft));
                break;
            }
            lambda = lambda * T::of(10.0);
        }
        match accepted {
            Some((trial, rt, ft)) => {
                let decrease = f - ft;
                z = trial;
                r = rt;
                f = ft;
                if decrease.as_f64() < cfg.tolerance * (1.0 + f.as_f64()) {
                    converged = true;
                    break;
                }
            }
            None => {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        warn!(
            "MAP update for fraction {} stopped after {} iterations without converging",
            obs.fraction, iterations
        );
    }
    let theta = z.split_off(nx);
    Ok(MapResult {
        x: z,
        theta,
        objective: f,
        initial_objective: initial,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::model::LinearModel;

    fn obs(v: f64) -> FractionObservation<f64> {
        FractionObservation::new(1, vec![("y".into(), v)])
    }

    #[test]
    fn identity_model_averages() {
        let spec = StateSpaceSpec::new(
            LinearModel::scalar(1.0, 0.0, 1.0, false),
            &Matrix::scalar(1.0),
            &Matrix::scalar(1.0),
            0.0,
        )
        .unwrap();
        let res = map_update(&[2.0], &[], &obs(5.0), &spec, (&[0.0], &[]), &MapConfig::default()).unwrap();
        assert!((res.x[0] - 3.5).abs() < 1e-9, "{}", res.x[0]);
        assert!(res.converged);
        assert!(res.objective <= res.initial_objective);
    }

    #[test]
    fn perfect_observation_has_zero_objective() {
        let spec = StateSpaceSpec::new(
            LinearModel::scalar(1.0, 0.0, 2.0, false),
            &Matrix::scalar(0.5),
            &Matrix::scalar(0.3),
            0.0,
        )
        .unwrap();
        let res = map_update(&[1.5], &[], &obs(3.0), &spec, (&[1.5], &[]), &MapConfig::default()).unwrap();
        assert_eq!(res.objective, 0.0);
        assert_eq!(res.x, vec![1.5]);
    }

    #[test]
    fn non_finite_init_rejected() {
        let spec = StateSpaceSpec::new(
            LinearModel::scalar(1.0, 0.0, 1.0, false),
            &Matrix::scalar(1.0),
            &Matrix::scalar(1.0),
            0.0,
        )
        .unwrap();
        let err = map_update(&[0.0], &[], &obs(1.0), &spec, (&[f64::NAN], &[]), &MapConfig::default());
        assert!(matches!(err, Err(Error::NonFiniteObjective(_))));
    }
}
