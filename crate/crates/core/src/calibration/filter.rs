use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::linalg::{Cholesky, Matrix};
use super::model::{FractionObservation, StateSpaceModel, StateSpaceSpec};
use crate::error::{Error, Result};
use crate::scalar::{ordered_sum, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct Particle<T> {
    pub x: Vec<T>,
    pub theta: Vec<T>,
    pub weight: T,
}

/// Weighted particle approximation of the joint belief over `(x_t, θ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BeliefState<T> {
    particles: Vec<Particle<T>>,
    pub t: usize,
}

fn particle_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn standard_normal<T: Scalar>(rng: &mut ChaCha8Rng, n: usize) -> Vec<T> {
    (0..n).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect()
}

impl<T: Scalar> BeliefState<T> {
    pub fn new(particles: Vec<Particle<T>>, t: usize) -> Result<Self> {
        let first = particles
            .first()
            .ok_or_else(|| Error::config("belief needs at least one particle"))?;
        let (nx, nt) = (first.x.len(), first.theta.len());
        for (i, p) in particles.iter().enumerate() {
            if p.x.len() != nx || p.theta.len() != nt {
                return Err(Error::Dimension(format!("particle {i} has inconsistent dimensions")));
            }
            if p.x.iter().chain(&p.theta).any(|v| !v.is_finite()) || !p.weight.is_finite() {
                return Err(Error::NonFinite {
                    what: "particle".into(),
                    index: i,
                });
            }
            if p.weight < T::zero() {
                return Err(Error::config(format!("particle {i} has negative weight")));
            }
        }
        let total = ordered_sum(particles.iter().map(|p| p.weight));
        if (total - T::one()).abs() > T::of(1e-9) {
            return Err(Error::config(format!("particle weights sum to {total}, not 1")));
        }
        Ok(BeliefState { particles, t })
    }

    /// Equally weighted particles.
    pub fn uniform(states: Vec<Vec<T>>, thetas: Vec<Vec<T>>, t: usize) -> Result<Self> {
        if states.len() != thetas.len() {
            return Err(Error::Dimension("state and parameter sample counts differ".into()));
        }
        let w = T::one() / T::of_usize(states.len().max(1));
        let particles = states
            .into_iter()
            .zip(thetas)
            .map(|(x, theta)| Particle { x, theta, weight: w })
            .collect();
        Self::new(particles, t)
    }

    /// `n` draws of `x ~ N(mean, cov)` sharing the parameter vector `theta`.
    pub fn gaussian(mean: &[T], cov: &Matrix<T>, theta: &[T], n: usize, seed: u64) -> Result<Self> {
        let chol = cov.cholesky()?;
        if chol.dim() != mean.len() {
            return Err(Error::Dimension("prior mean and covariance differ in size".into()));
        }
        let states = (0..n as u64)
            .map(|i| {
                let z = standard_normal(&mut particle_rng(seed, i), mean.len());
                chol.color(&z).iter().zip(mean).map(|(&d, &m)| m + d).collect()
            })
            .collect();
        Self::uniform(states, vec![theta.to_vec(); n], 0)
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn particles(&self) -> &[Particle<T>] {
        &self.particles
    }

    pub fn effective_sample_size(&self) -> T {
        T::one() / ordered_sum(self.particles.iter().map(|p| p.weight * p.weight))
    }

    fn weighted_mean(&self, pick: impl Fn(&Particle<T>) -> &[T]) -> Vec<T> {
        let dim = pick(&self.particles[0]).len();
        (0..dim)
            .map(|d| ordered_sum(self.particles.iter().map(|p| p.weight * pick(p)[d])))
            .collect()
    }

    pub fn mean_state(&self) -> Vec<T> {
        self.weighted_mean(|p| &p.x)
    }

    pub fn mean_theta(&self) -> Vec<T> {
        self.weighted_mean(|p| &p.theta)
    }

    /// Weighted per-component variance of the state.
    pub fn state_variance(&self) -> Vec<T> {
        let mean = self.mean_state();
        (0..mean.len())
            .map(|d| {
                ordered_sum(self.particles.iter().map(|p| {
                    let e = p.x[d] - mean[d];
                    p.weight * e * e
                }))
            })
            .collect()
    }

    /// CSV columns: `t,particle,weight,x0..,theta0..`.
    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        let p0 = &self.particles[0];
        let mut header = vec!["t".to_string(), "particle".into(), "weight".into()];
        header.extend((0..p0.x.len()).map(|i| format!("x{i}")));
        header.extend((0..p0.theta.len()).map(|i| format!("theta{i}")));
        writeln!(w, "{}", header.join(",")).map_err(io)?;
        for (i, p) in self.particles.iter().enumerate() {
            let mut row = vec![self.t.to_string(), i.to_string(), p.weight.to_string()];
            row.extend(p.x.iter().chain(&p.theta).map(|v| v.to_string()));
            writeln!(w, "{}", row.join(",")).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Systematic resampling with a single uniform offset.
fn systematic_resample<T: Scalar>(particles: &[Particle<T>], u0: f64) -> Vec<Particle<T>> {
    let n = particles.len();
    let w = T::one() / T::of_usize(n);
    let mut out = Vec::with_capacity(n);
    let mut cumulative = particles[0].weight.as_f64();
    let mut j = 0;
    for i in 0..n {
        let target = (u0 + i as f64) / n as f64;
        while cumulative < target && j + 1 < n {
            j += 1;
            cumulative += particles[j].weight.as_f64();
        }
        out.push(Particle {
            x: particles[j].x.clone(),
            theta: particles[j].theta.clone(),
            weight: w,
        });
    }
    out
}

/// Log of the unnormalized Gaussian likelihood `-½ ‖y − h(x)‖²_{Σv⁻¹}`.
fn log_likelihood<T: Scalar>(obs_chol: &Cholesky<T>, y: &[T], hx: &[T]) -> T {
    let r: Vec<T> = y.iter().zip(hx).map(|(&a, &b)| a - b).collect();
    -T::of(0.5) * obs_chol.mahalanobis(&r)
}

/// One predict-update step of the particle filter.
///
/// Particle `i` draws its process noise from stream `i` of `seed`, so the
/// result does not depend on the thread schedule. Resampling runs when the
/// effective sample size drops below N/2.
pub fn filter_update<T: Scalar, M: StateSpaceModel<T>>(
    belief: &BeliefState<T>,
    obs: &FractionObservation<T>,
    spec: &StateSpaceSpec<T, M>,
    seed: u64,
) -> Result<BeliefState<T>> {
    obs.validate()?;
    let model = &spec.model;
    let y = obs.values();
    if y.len() != model.obs_dim() {
        return Err(Error::Dimension(format!(
            "observation has {} entries, model expects {}",
            y.len(),
            model.obs_dim()
        )));
    }
    let p0 = &belief.particles[0];
    if p0.x.len() != model.state_dim() || p0.theta.len() != model.param_dim() {
        return Err(Error::Dimension("belief dimensions differ from the model".into()));
    }

    let propagated: Vec<(Particle<T>, T)> = belief
        .particles
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = particle_rng(seed, i as u64);
            let noise = spec.process().color(&standard_normal(&mut rng, model.state_dim()));
            let x: Vec<T> = model
                .transition(&p.x, &obs.control, &p.theta)
                .into_iter()
                .zip(noise)
                .map(|(m, w)| m + w)
                .collect();
            let ll = log_likelihood(spec.observation(), &y, &model.observe(&x));
            let particle = Particle {
                x,
                theta: p.theta.clone(),
                weight: p.weight,
            };
            (particle, ll)
        })
        .collect();

    let max_log = propagated
        .iter()
        .filter(|(p, _)| p.weight > T::zero())
        .map(|(p, ll)| p.weight.ln() + *ll)
        .fold(T::neg_infinity(), T::max);
    if !max_log.is_finite() {
        return Err(Error::LikelihoodUnderflow(format!(
            "fraction {}: no particle has finite likelihood (max log-weight {max_log})",
            obs.fraction
        )));
    }
    let unnormalized: Vec<T> = propagated
        .iter()
        .map(|(p, ll)| {
            if p.weight > T::zero() {
                (p.weight.ln() + *ll - max_log).exp()
            } else {
                T::zero()
            }
        })
        .collect();
    let total = ordered_sum(unnormalized.iter().copied());
    let mut particles: Vec<Particle<T>> = propagated
        .into_iter()
        .zip(unnormalized)
        .map(|((mut p, _), w)| {
            p.weight = w / total;
            p
        })
        .collect();

    let n = particles.len();
    let ess = T::one() / ordered_sum(particles.iter().map(|p| p.weight * p.weight));
    if ess < T::of_usize(n) / T::of(2.0) {
        let u0: f64 = particle_rng(seed, u64::MAX).random();
        particles = systematic_resample(&particles, u0);
    }
    BeliefState::new(particles, belief.t + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::model::LinearModel;

    fn scalar_spec(q: f64, r: f64) -> StateSpaceSpec<f64, LinearModel<f64>> {
        StateSpaceSpec::new(
            LinearModel::scalar(1.0, 0.0, 1.0, false),
            &Matrix::scalar(q),
            &Matrix::scalar(r),
            0.0,
        )
        .unwrap()
    }

    fn obs(v: f64) -> FractionObservation<f64> {
        FractionObservation::new(1, vec![("y".into(), v)])
    }

    #[test]
    fn dominant_likelihood_takes_the_weight() {
        let belief = BeliefState::uniform(vec![vec![0.0], vec![5.0], vec![-7.0]], vec![vec![]; 3], 0).unwrap();
        let spec = scalar_spec(1e-12, 0.01);
        let out = filter_update(&belief, &obs(5.0), &spec, 1).unwrap();
        let mean = out.mean_state()[0];
        assert!((mean - 5.0).abs() < 1e-6, "{mean}");
        assert!(out.particles().iter().all(|p| p.x[0] == out.particles()[0].x[0]));
    }

    #[test]
    fn uninformative_observation_keeps_weights() {
        let weights = [0.1, 0.2, 0.3, 0.4];
        let particles = weights
            .iter()
            .enumerate()
            .map(|(i, &w)| Particle {
                x: vec![i as f64],
                theta: vec![],
                weight: w,
            })
            .collect();
        let belief = BeliefState::new(particles, 0).unwrap();
        let out = filter_update(&belief, &obs(2.0), &scalar_spec(1e-12, 1e12), 3).unwrap();
        for (p, w) in out.particles().iter().zip(weights) {
            assert!((p.weight - w).abs() < 1e-9);
        }
    }

    #[test]
    fn weights_stay_normalized_and_nonnegative() {
        let belief = BeliefState::gaussian(&[0.0], &Matrix::scalar(4.0), &[], 500, 9).unwrap();
        let mut b = belief;
        for t in 0..10 {
            b = filter_update(&b, &obs(t as f64 * 0.3), &scalar_spec(0.5, 0.2), t).unwrap();
            let total: f64 = b.particles().iter().map(|p| p.weight).sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(b.particles().iter().all(|p| p.weight >= 0.0));
        }
    }

    #[test]
    fn underflow_is_reported() {
        let belief = BeliefState::uniform(vec![vec![0.0]], vec![vec![]], 0).unwrap();
        let err = filter_update(&belief, &obs(f64::MAX), &scalar_spec(1.0, 1e-300), 0).unwrap_err();
        assert!(matches!(err, Error::LikelihoodUnderflow(_)), "{err}");
    }

    #[test]
    fn snapshot_has_one_row_per_particle() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("belief.csv");
        let b = BeliefState::uniform(vec![vec![1.0, 2.0]; 3], vec![vec![0.5]; 3], 4).unwrap();
        b.write_snapshot(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,particle,weight,x0,x1,theta0");
        assert_eq!(lines.len(), 4);
    }
}
