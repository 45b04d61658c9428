use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::FeatureSet;
use crate::error::{Error, Result};
use crate::grid::{MaskGrid, ScalarGrid};
use crate::scalar::Scalar;

/// Surrogate parameters: one encoder gain and one decoder weight per feature.
///
/// The effective coefficient on feature `f` is `encoder[f] * decoder[f]`.
/// Dropout acts on the decoder only.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector<T> {
    encoder: Vec<T>,
    decoder: Vec<T>,
    dropout: T,
}

impl<T: Scalar> ParamVector<T> {
    pub fn new(encoder: Vec<T>, decoder: Vec<T>, dropout: T) -> Result<Self> {
        if encoder.is_empty() || encoder.len() != decoder.len() {
            return Err(Error::Dimension(format!(
                "encoder has {} weights, decoder {}",
                encoder.len(),
                decoder.len()
            )));
        }
        if let Some(index) = encoder.iter().chain(&decoder).position(|w| !w.is_finite()) {
            return Err(Error::NonFinite {
                what: "parameter vector".into(),
                index,
            });
        }
        if !(dropout >= T::zero() && dropout < T::one()) {
            return Err(Error::config(format!("dropout rate {dropout} outside [0, 1)")));
        }
        Ok(ParamVector {
            encoder,
            decoder,
            dropout,
        })
    }

    /// Unit encoder gains with the given decoder weights.
    pub fn linear(decoder: Vec<T>, dropout: T) -> Result<Self> {
        Self::new(vec![T::one(); decoder.len()], decoder, dropout)
    }

    /// Encoder gains standardize each feature to unit RMS over the masked
    /// voxels of the cohort; decoder weights are drawn uniformly from
    /// `[0, init_scale)`.
    ///
    /// A feature that is identically zero on the cohort gets gain 1 and
    /// weight `init_scale`. Training never moves that weight, so any later
    /// activity in the channel carries the full prior scale into the dropout
    /// variance.
    pub fn initialize(cohort: &[(&FeatureSet<T>, &MaskGrid)], dropout: T, init_scale: T, seed: u64) -> Result<Self> {
        let first = cohort
            .first()
            .ok_or_else(|| Error::config("cannot initialize from an empty cohort"))?;
        let n_features = first.0.len();
        let mut sums = vec![0.0f64; n_features];
        let mut count = 0usize;
        for (features, mask) in cohort {
            if features.len() != n_features {
                return Err(Error::Dimension("feature counts differ across the cohort".into()));
            }
            features.shape().ensure_same(mask.shape(), "features vs mask")?;
            for i in mask.indices() {
                for (f, s) in sums.iter_mut().enumerate() {
                    let v = features.grid(f)[i].as_f64();
                    *s += v * v;
                }
            }
            count += mask.count();
        }
        if count == 0 {
            return Err(Error::EmptyMask("cohort feasible masks".into()));
        }
        let rms: Vec<f64> = sums.iter().map(|&s| (s / count as f64).sqrt()).collect();
        let encoder = rms
            .iter()
            .map(|&r| T::of(if r > 0.0 { 1.0 / r } else { 1.0 }))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = init_scale.as_f64();
        let decoder = rms
            .iter()
            .map(|&r| {
                let u = rng.random::<f64>() * scale;
                T::of(if r > 0.0 { u } else { scale })
            })
            .collect();
        Self::new(encoder, decoder, dropout)
    }

    pub fn encoder(&self) -> &[T] {
        &self.encoder
    }

    pub fn decoder(&self) -> &[T] {
        &self.decoder
    }

    pub fn dropout(&self) -> T {
        self.dropout
    }

    pub fn n_features(&self) -> usize {
        self.decoder.len()
    }

    pub fn with_decoder(&self, decoder: Vec<T>) -> Result<Self> {
        Self::new(self.encoder.clone(), decoder, self.dropout)
    }

    pub fn with_dropout(&self, dropout: T) -> Result<Self> {
        Self::new(self.encoder.clone(), self.decoder.clone(), dropout)
    }

    pub(crate) fn set_blocks(&mut self, encoder: Vec<T>, decoder: Vec<T>) -> Result<()> {
        *self = Self::new(encoder, decoder, self.dropout)?;
        Ok(())
    }

    /// Effective per-feature coefficients, with dropout applied when given.
    pub fn coefficients(&self, dropout: Option<&DropoutMask>) -> Result<Vec<T>> {
        let base = self.encoder.iter().zip(&self.decoder).map(|(&a, &w)| a * w);
        match dropout {
            None => Ok(base.collect()),
            Some(mask) => {
                if mask.kept.len() != self.decoder.len() {
                    return Err(Error::Dimension(format!(
                        "dropout mask over {} weights, decoder has {}",
                        mask.kept.len(),
                        self.decoder.len()
                    )));
                }
                let scale = T::one() / (T::one() - self.dropout);
                Ok(base
                    .zip(&mask.kept)
                    .map(|(c, &k)| if k { c * scale } else { T::zero() })
                    .collect())
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        Self::from_text(&text, path)
    }

    /// Plain-text parameter format (version 1):
    ///
    /// ```text
    /// dosetwin-params,1
    /// dropout,<p>
    /// encoder,<n>
    /// <n lines, one weight each>
    /// decoder,<n>
    /// <n lines, one weight each>
    /// ```
    pub fn to_text(&self) -> String {
        let mut out = String::from("dosetwin-params,1\n");
        writeln!(out, "dropout,{}", self.dropout).unwrap();
        for (label, block) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            writeln!(out, "{label},{}", block.len()).unwrap();
            for w in block {
                writeln!(out, "{w}").unwrap();
            }
        }
        out
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let lines: Vec<&str> = text.lines().map(str::trim).collect();
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line + 1,
            message,
        };
        let line_at = |n: usize| {
            lines
                .get(n)
                .copied()
                .ok_or_else(|| err(n, "unexpected end of file".into()))
        };
        let field = |n: usize, key: &str| -> Result<String> {
            let line = line_at(n)?;
            match line.split_once(',') {
                Some((k, v)) if k == key => Ok(v.to_string()),
                _ => Err(err(n, format!("expected `{key},<value>`, got `{line}`"))),
            }
        };
        let number =
            |n: usize, v: &str| -> Result<T> { v.parse::<T>().map_err(|_| err(n, format!("invalid number `{v}`"))) };
        if line_at(0)? != "dosetwin-params,1" {
            return Err(err(0, format!("unsupported header `{}`", lines[0])));
        }
        let dropout = number(1, &field(1, "dropout")?)?;
        let mut n = 2;
        let mut blocks = Vec::with_capacity(2);
        for key in ["encoder", "decoder"] {
            let len = field(n, key)?;
            let len: usize = len
                .parse()
                .map_err(|_| err(n, format!("invalid block length `{len}`")))?;
            n += 1;
            let block = (n..n + len)
                .map(|m| number(m, line_at(m)?))
                .collect::<Result<Vec<T>>>()?;
            n += len;
            blocks.push(block);
        }
        let decoder = blocks.pop().unwrap();
        let encoder = blocks.pop().unwrap();
        Self::new(encoder, decoder, dropout)
    }
}

/// Bernoulli keep pattern over decoder weights, a pure function of
/// `(seed, p, n)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DropoutMask {
    pub seed: u64,
    kept: Vec<bool>,
}

impl DropoutMask {
    pub fn new<T: Scalar>(seed: u64, p: T, n: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = p.as_f64();
        let kept = (0..n).map(|_| rng.random::<f64>() >= p).collect();
        DropoutMask { seed, kept }
    }

    /// Explicit pattern, used for exhaustive enumeration.
    pub fn from_pattern(seed: u64, kept: Vec<bool>) -> Self {
        DropoutMask { seed, kept }
    }

    pub fn kept(&self) -> &[bool] {
        &self.kept
    }
}

fn combine<T: Scalar>(coefficients: &[T], features: &FeatureSet<T>) -> Result<Vec<T>> {
    if features.len() != coefficients.len() {
        return Err(Error::Dimension(format!(
            "{} features for {} decoder weights",
            features.len(),
            coefficients.len()
        )));
    }
    let grids = features.grids();
    Ok((0..features.shape().len())
        .into_par_iter()
        .map(|r| {
            coefficients
                .iter()
                .zip(grids)
                .fold(T::zero(), |acc, (&c, g)| acc + c * g[r])
        })
        .collect())
}

/// Pre-relu activation `Σ_f c_f φ_f(r)` per voxel.
pub fn pre_activation<T: Scalar>(
    params: &ParamVector<T>,
    features: &FeatureSet<T>,
    dropout: Option<&DropoutMask>,
) -> Result<Vec<T>> {
    combine(&params.coefficients(dropout)?, features)
}

/// Dose prediction `relu(Σ_f c_f φ_f(r))`, optionally under a dropout mask.
pub fn predict<T: Scalar>(
    params: &ParamVector<T>,
    features: &FeatureSet<T>,
    dropout: Option<&DropoutMask>,
) -> Result<ScalarGrid<T>> {
    let z = pre_activation(params, features, dropout)?;
    ScalarGrid::new(*features.shape(), z.into_iter().map(|v| v.max(T::zero())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridShape;

    fn random_features(n_features: usize, seed: u64) -> FeatureSet<f64> {
        let shape = GridShape::cubic(3, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grids = (0..n_features)
            .map(|_| ScalarGrid::from_fn(shape, |_| rng.random_range(-2.0..2.0)).unwrap())
            .collect();
        FeatureSet::new((0..n_features).map(|f| format!("f{f}")).collect(), grids).unwrap()
    }

    #[test]
    fn zero_decoder_predicts_zero() {
        let fs = random_features(4, 1);
        let params = ParamVector::linear(vec![0.0; 4], 0.2).unwrap();
        assert!(predict(&params, &fs, None).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_rate_dropout_is_deterministic_model() {
        let fs = random_features(5, 2);
        let params = ParamVector::linear(vec![0.3, -1.0, 2.0, 0.5, 1.5], 0.0).unwrap();
        let det = predict(&params, &fs, None).unwrap();
        for seed in 0..20 {
            let mask = DropoutMask::new(seed, 0.0, 5);
            assert_eq!(predict(&params, &fs, Some(&mask)).unwrap(), det);
        }
    }

    #[test]
    fn dropout_mask_is_pure() {
        assert_eq!(DropoutMask::new(9, 0.3, 12), DropoutMask::new(9, 0.3, 12));
        assert_ne!(DropoutMask::new(9, 0.5, 64), DropoutMask::new(10, 0.5, 64));
    }

    #[test]
    fn exhaustive_dropout_mean_equals_deterministic_pre_activation() {
        for n_features in 1..=10 {
            let fs = random_features(n_features, n_features as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + n_features as u64);
            let decoder = (0..n_features).map(|_| rng.random_range(-3.0..3.0)).collect();
            let encoder = (0..n_features).map(|_| rng.random_range(0.5..2.0)).collect();
            let p = 0.3;
            let params = ParamVector::new(encoder, decoder, p).unwrap();
            let det = pre_activation(&params, &fs, None).unwrap();
            let mut mean = vec![0.0; det.len()];
            for pattern in 0u32..(1 << n_features) {
                let kept: Vec<bool> = (0..n_features).map(|f| pattern >> f & 1 == 1).collect();
                let n_kept = kept.iter().filter(|&&k| k).count();
                let prob = (1.0 - p).powi(n_kept as i32) * p.powi((n_features - n_kept) as i32);
                let z = pre_activation(&params, &fs, Some(&DropoutMask::from_pattern(0, kept))).unwrap();
                for (m, v) in mean.iter_mut().zip(z) {
                    *m += prob * v;
                }
            }
            for (m, d) in mean.iter().zip(&det) {
                assert!((m - d).abs() < 1e-12 * (1.0 + d.abs()), "F={n_features}: {m} vs {d}");
            }
        }
    }

    #[test]
    fn single_feature_identity_regression_is_exact() {
        let shape = GridShape::cubic(4, 2.0).unwrap();
        let dose = ScalarGrid::from_fn(shape, |i| (i as f64 * 0.37).sin().abs() * 60.0).unwrap();
        let fs = FeatureSet::new(vec!["oracle".into()], vec![dose.clone()]).unwrap();
        let params = ParamVector::linear(vec![1.0], 0.1).unwrap();
        assert_eq!(predict(&params, &fs, None).unwrap(), dose);
    }

    #[test]
    fn text_round_trip_is_exact() {
        let params = ParamVector::new(vec![0.1, 1.0 / 3.0], vec![-2.5e-17, 7.0], 0.15).unwrap();
        let back = ParamVector::from_text(&params.to_text(), Path::new("p")).unwrap();
        assert_eq!(back, params);
        assert!(ParamVector::<f64>::from_text("dosetwin-params,2\n", Path::new("p")).is_err());
        let truncated = "dosetwin-params,1\ndropout,0.1\nencoder,2\n1\n";
        assert!(ParamVector::<f64>::from_text(truncated, Path::new("p")).is_err());
    }

    #[test]
    fn rejects_invalid_parameters() {
        assert!(ParamVector::linear(vec![1.0], 1.0).is_err());
        assert!(ParamVector::linear(vec![f64::NAN], 0.0).is_err());
        assert!(ParamVector::new(vec![1.0], vec![1.0, 2.0], 0.0).is_err());
    }
}
