use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{featurize, pre_activation, FeatureConfig, FeatureSet, ParamVector};
use crate::error::{Error, Result};
use crate::grid::{MaskGrid, PatientRecord, ScalarGrid};
use crate::scalar::{ordered_sum, Scalar};

/// Mean absolute difference over the masked voxels.
pub fn masked_l1<T: Scalar>(pred: &ScalarGrid<T>, reference: &ScalarGrid<T>, mask: &MaskGrid) -> Result<T> {
    pred.shape()
        .ensure_same(reference.shape(), "masked_l1 prediction vs reference")?;
    pred.shape().ensure_same(mask.shape(), "masked_l1 prediction vs mask")?;
    mask.ensure_nonempty("masked_l1 mask")?;
    let sum = ordered_sum(mask.indices().map(|i| (pred[i] - reference[i]).abs()));
    Ok(sum / T::of_usize(mask.count()))
}

#[inline]
fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// A featurized patient ready for the masked loss.
#[derive(Clone, Debug)]
pub struct TrainingSample<T> {
    pub id: String,
    pub features: FeatureSet<T>,
    pub reference: ScalarGrid<T>,
    pub mask: MaskGrid,
}

impl<T: Scalar> TrainingSample<T> {
    pub fn new(
        id: impl Into<String>,
        features: FeatureSet<T>,
        reference: ScalarGrid<T>,
        mask: MaskGrid,
    ) -> Result<Self> {
        features
            .shape()
            .ensure_same(reference.shape(), "features vs reference")?;
        features.shape().ensure_same(mask.shape(), "features vs mask")?;
        mask.ensure_nonempty("training mask")?;
        Ok(TrainingSample {
            id: id.into(),
            features,
            reference,
            mask,
        })
    }

    pub fn from_record(record: &PatientRecord<T>, cfg: &FeatureConfig) -> Result<Self> {
        let reference = record.reference()?.clone();
        Self::new(
            record.id.clone(),
            featurize(record, cfg)?,
            reference,
            record.feasible.clone(),
        )
    }
}

/// Loss gradient with respect to both parameter blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient<T> {
    pub encoder: Vec<T>,
    pub decoder: Vec<T>,
}

/// Masked L1 loss of the deterministic prediction and its subgradient.
///
/// Uses `sign(0) = 0` for the absolute value and a zero relu gate at a
/// pre-activation of exactly 0. Only masked voxels enter either quantity.
pub fn loss_and_gradient<T: Scalar>(params: &ParamVector<T>, sample: &TrainingSample<T>) -> Result<(T, Gradient<T>)> {
    let z = pre_activation(params, &sample.features, None)?;
    let n = params.n_features();
    let mut loss = T::zero();
    let mut d_coef = vec![T::zero(); n];
    let grids = sample.features.grids();
    for r in sample.mask.indices() {
        let pred = z[r].max(T::zero());
        let residual = pred - sample.reference[r];
        loss = loss + residual.abs();
        let s = sign(residual);
        if z[r] > T::zero() && s != T::zero() {
            for (d, g) in d_coef.iter_mut().zip(grids) {
                *d = *d + s * g[r];
            }
        }
    }
    let count = T::of_usize(sample.mask.count());
    let d_coef: Vec<T> = d_coef.into_iter().map(|d| d / count).collect();
    let encoder = d_coef.iter().zip(params.decoder()).map(|(&d, &w)| d * w).collect();
    let decoder = d_coef.iter().zip(params.encoder()).map(|(&d, &a)| d * a).collect();
    Ok((loss / count, Gradient { encoder, decoder }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig<T> {
    pub learning_rate: T,
    pub iterations: usize,
    /// Patients per gradient step; values >= the cohort size mean full batch.
    pub batch_size: usize,
    pub seed: u64,
    /// Training stops once the cohort loss is at or below this value.
    pub tolerance: T,
    /// Step-size multiplier applied whenever the cohort loss increases.
    pub step_decay: T,
}

impl<T: Scalar> TrainConfig<T> {
    pub fn new(learning_rate: T, iterations: usize) -> Self {
        TrainConfig {
            learning_rate,
            iterations,
            batch_size: usize::MAX,
            seed: 0,
            tolerance: T::zero(),
            step_decay: T::of(0.5),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > T::zero()) {
            return Err(Error::config("learning rate must be > 0"));
        }
        if self.iterations == 0 {
            return Err(Error::config("iteration budget must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if !(self.tolerance >= T::zero()) {
            return Err(Error::config("tolerance must be >= 0"));
        }
        if !(self.step_decay > T::zero() && self.step_decay <= T::one()) {
            return Err(Error::config("step decay must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: ParamVector<T>,
    /// Cohort loss before each step, followed by the loss after the last step.
    pub losses: Vec<T>,
}

/// Gradient descent on the mean masked L1 over the cohort.
pub fn train<T: Scalar>(
    params: &ParamVector<T>,
    cohort: &[TrainingSample<T>],
    cfg: &TrainConfig<T>,
    freeze_encoder: bool,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if cohort.is_empty() {
        return Err(Error::config("training cohort is empty"));
    }
    for sample in cohort {
        if sample.features.len() != params.n_features() {
            return Err(Error::Dimension(format!(
                "patient `{}` has {} features, parameters expect {}",
                sample.id,
                sample.features.len(),
                params.n_features()
            )));
        }
    }
    let mut params = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch_size = cfg.batch_size.min(cohort.len());
    let mut order: Vec<usize> = (0..cohort.len()).collect();
    let mut cursor = order.len();
    let mut lr = cfg.learning_rate;
    let mut losses = Vec::with_capacity(cfg.iterations + 1);
    let n_cohort = T::of_usize(cohort.len());

    for iteration in 0..=cfg.iterations {
        let evaluated: Vec<(T, Gradient<T>)> = cohort
            .par_iter()
            .map(|s| loss_and_gradient(&params, s))
            .collect::<Result<_>>()?;
        let loss = ordered_sum(evaluated.iter().map(|(l, _)| *l)) / n_cohort;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iteration,
                loss: loss.as_f64(),
            });
        }
        if let Some(&previous) = losses.last() {
            if loss > previous {
                lr = lr * cfg.step_decay;
            }
        }
        losses.push(loss);
        if iteration == cfg.iterations || loss <= cfg.tolerance {
            break;
        }

        let batch: Vec<usize> = if batch_size == cohort.len() {
            order.clone()
        } else {
            (0..batch_size)
                .map(|_| {
                    if cursor == order.len() {
                        order.shuffle(&mut rng);
                        cursor = 0;
                    }
                    cursor += 1;
                    order[cursor - 1]
                })
                .collect()
        };
        let nb = T::of_usize(batch.len());
        let mean_block = |pick: fn(&Gradient<T>) -> &Vec<T>| -> Vec<T> {
            (0..params.n_features())
                .map(|f| ordered_sum(batch.iter().map(|&b| pick(&evaluated[b].1)[f])) / nb)
                .collect()
        };
        let g_dec = mean_block(|g| &g.decoder);
        let decoder = params.decoder().iter().zip(&g_dec).map(|(&w, &g)| w - lr * g).collect();
        let encoder = if freeze_encoder {
            params.encoder().to_vec()
        } else {
            let g_enc = mean_block(|g| &g.encoder);
            params.encoder().iter().zip(&g_enc).map(|(&a, &g)| a - lr * g).collect()
        };
        params.set_blocks(encoder, decoder).map_err(|_| Error::Diverged {
            iteration,
            loss: loss.as_f64(),
        })?;
    }
    Ok(TrainOutcome { params, losses })
}

/// Featurizes a cohort of records for [`train`].
pub fn training_samples<T: Scalar>(cohort: &[PatientRecord<T>], cfg: &FeatureConfig) -> Result<Vec<TrainingSample<T>>> {
    cohort.par_iter().map(|r| TrainingSample::from_record(r, cfg)).collect()
}

/// Largest coordinate-wise relative error between the analytic decoder
/// gradient and central finite differences with step `epsilon`.
pub fn grad_check<T: Scalar>(params: &ParamVector<T>, sample: &TrainingSample<T>, epsilon: T) -> Result<T> {
    if !(epsilon.is_finite() && epsilon > T::zero()) {
        return Err(Error::InvalidStep(epsilon.as_f64()));
    }
    let (_, analytic) = loss_and_gradient(params, sample)?;
    let loss_at = |decoder: Vec<T>| -> Result<T> {
        let p = params.with_decoder(decoder)?;
        Ok(loss_and_gradient(&p, sample)?.0)
    };
    let floor = T::of(1e-12);
    let mut worst = T::zero();
    for f in 0..params.n_features() {
        let mut up = params.decoder().to_vec();
        let mut down = up.clone();
        up[f] = up[f] + epsilon;
        down[f] = down[f] - epsilon;
        let numeric = (loss_at(up)? - loss_at(down)?) / (epsilon + epsilon);
        let a = analytic.decoder[f];
        let scale = a.abs().max(numeric.abs());
        let err = if scale <= floor {
            T::zero()
        } else {
            (a - numeric).abs() / scale
        };
        worst = worst.max(err);
    }
    Ok(worst)
}
