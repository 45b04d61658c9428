//! Ensemble statistics, dose-volume histograms, predictive DVH bands and the
//! benchmark dose and DVH scores.

use std::io::Write;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{MaskGrid, PatientRecord, RoiRole, ScalarGrid};
use crate::scalar::{ordered_sum, Scalar};

/// K stochastic dose samples and the dropout seeds that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct DoseEnsemble<T> {
    members: Vec<ScalarGrid<T>>,
    seeds: Vec<u64>,
}

impl<T: Scalar> DoseEnsemble<T> {
    pub fn new(members: Vec<ScalarGrid<T>>, seeds: Vec<u64>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::EnsembleTooSmall { needed: 1, got: 0 });
        }
        if members.len() != seeds.len() {
            return Err(Error::Dimension(format!(
                "{} ensemble members for {} seeds",
                members.len(),
                seeds.len()
            )));
        }
        let shape = *members[0].shape();
        for m in &members[1..] {
            shape.ensure_same(m.shape(), "ensemble members")?;
        }
        Ok(DoseEnsemble { members, seeds })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[ScalarGrid<T>] {
        &self.members
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    /// Applies `f` to every member, keeping the seeds.
    pub fn try_map(&self, f: impl Fn(&ScalarGrid<T>) -> Result<ScalarGrid<T>> + Sync + Send) -> Result<Self> {
        let members = self.members.par_iter().map(f).collect::<Result<Vec<_>>>()?;
        Self::new(members, self.seeds.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleStats<T> {
    pub mean: ScalarGrid<T>,
    /// Unbiased voxel variance (K - 1 denominator), Gy².
    pub variance: ScalarGrid<T>,
    pub std: ScalarGrid<T>,
}

pub fn ensemble_stats<T: Scalar>(ensemble: &DoseEnsemble<T>) -> Result<EnsembleStats<T>> {
    let k = ensemble.len();
    if k < 2 {
        return Err(Error::EnsembleTooSmall { needed: 2, got: k });
    }
    let shape = *ensemble.members[0].shape();
    let kt = T::of_usize(k);
    let km1 = T::of_usize(k - 1);
    let (mean, variance): (Vec<T>, Vec<T>) = (0..shape.len())
        .into_par_iter()
        .map(|r| {
            let mean = ordered_sum(ensemble.members.iter().map(|m| m[r])) / kt;
            let ss = ordered_sum(ensemble.members.iter().map(|m| {
                let d = m[r] - mean;
                d * d
            }));
            (mean, ss / km1)
        })
        .unzip();
    let std = variance.iter().map(|v| v.sqrt()).collect();
    Ok(EnsembleStats {
        mean: ScalarGrid::new(shape, mean)?,
        variance: ScalarGrid::new(shape, variance)?,
        std: ScalarGrid::new(shape, std)?,
    })
}

/// Mean absolute voxel difference over the feasible mask.
pub fn dose_score<T: Scalar>(pred: &ScalarGrid<T>, reference: &ScalarGrid<T>, feasible: &MaskGrid) -> Result<T> {
    crate::surrogate::masked_l1(pred, reference, feasible)
}

fn roi_doses<T: Scalar>(dose: &ScalarGrid<T>, roi: &MaskGrid, what: &str) -> Result<Vec<T>> {
    dose.shape().ensure_same(roi.shape(), what)?;
    roi.ensure_nonempty(what)?;
    Ok(roi.indices().map(|i| dose[i]).collect())
}

fn sort_ascending<T: Scalar>(values: &mut [T]) {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite doses"));
}

/// Fraction of `sorted_ascending` that is >= `level`.
fn fraction_at_least<T: Scalar>(sorted_ascending: &[T], level: T) -> T {
    let below = sorted_ascending.partition_point(|&v| v < level);
    T::of_usize(sorted_ascending.len() - below) / T::of_usize(sorted_ascending.len())
}

/// Exact fraction of ROI voxels receiving at least `level` Gy.
pub fn volume_fraction<T: Scalar>(dose: &ScalarGrid<T>, roi: &MaskGrid, level: T) -> Result<T> {
    let mut d = roi_doses(dose, roi, "DVH ROI")?;
    sort_ascending(&mut d);
    Ok(fraction_at_least(&d, level))
}

/// `n_levels` uniformly spaced levels from 0 to `max`.
pub fn dose_levels<T: Scalar>(max: T, n_levels: usize) -> Vec<T> {
    match n_levels {
        0 => Vec::new(),
        1 => vec![T::zero()],
        n => (0..n).map(|i| max * T::of_usize(i) / T::of_usize(n - 1)).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DvhCurve<T> {
    pub roi: String,
    pub levels: Vec<T>,
    /// Fraction of ROI voxels with dose >= the matching level.
    pub volume: Vec<T>,
}

pub fn dvh<T: Scalar>(roi_name: &str, dose: &ScalarGrid<T>, roi: &MaskGrid, n_levels: usize) -> Result<DvhCurve<T>> {
    let mut d = roi_doses(dose, roi, roi_name)?;
    sort_ascending(&mut d);
    let levels = dose_levels(*d.last().unwrap(), n_levels);
    let volume = levels.iter().map(|&l| fraction_at_least(&d, l)).collect();
    Ok(DvhCurve {
        roi: roi_name.to_string(),
        levels,
        volume,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DvhMetricKind {
    /// Dose received by at least `percent` % of the ROI.
    DoseAtVolume {
        percent: f64,
    },
    MeanDose,
    /// Dose to the hottest `cc` cubic centimetres.
    DoseAtCc {
        cc: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMetricSpec")]
pub struct DvhMetricSpec {
    pub roi: String,
    #[serde(flatten)]
    pub kind: DvhMetricKind,
}

#[derive(Deserialize)]
#[serde(rename_all = "snake_case")]
enum RawKind {
    DoseAtVolume,
    MeanDose,
    DoseAtCc,
}

/// Flat form read from config files, so that stray keys are rejected.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMetricSpec {
    roi: String,
    kind: RawKind,
    percent: Option<f64>,
    cc: Option<f64>,
}

impl TryFrom<RawMetricSpec> for DvhMetricSpec {
    type Error = String;

    fn try_from(raw: RawMetricSpec) -> std::result::Result<Self, String> {
        let kind = match (raw.kind, raw.percent, raw.cc) {
            (RawKind::DoseAtVolume, Some(percent), None) => DvhMetricKind::DoseAtVolume { percent },
            (RawKind::MeanDose, None, None) => DvhMetricKind::MeanDose,
            (RawKind::DoseAtCc, None, Some(cc)) => DvhMetricKind::DoseAtCc { cc },
            (RawKind::DoseAtVolume, ..) => return Err("dose_at_volume takes exactly `percent`".into()),
            (RawKind::MeanDose, ..) => return Err("mean_dose takes no parameter".into()),
            (RawKind::DoseAtCc, ..) => return Err("dose_at_cc takes exactly `cc`".into()),
        };
        Ok(DvhMetricSpec { roi: raw.roi, kind })
    }
}

impl DvhMetricSpec {
    pub fn d_x(roi: impl Into<String>, percent: f64) -> Self {
        DvhMetricSpec {
            roi: roi.into(),
            kind: DvhMetricKind::DoseAtVolume { percent },
        }
    }

    pub fn mean(roi: impl Into<String>) -> Self {
        DvhMetricSpec {
            roi: roi.into(),
            kind: DvhMetricKind::MeanDose,
        }
    }

    pub fn d_cc(roi: impl Into<String>, cc: f64) -> Self {
        DvhMetricSpec {
            roi: roi.into(),
            kind: DvhMetricKind::DoseAtCc { cc },
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            DvhMetricKind::DoseAtVolume { percent } if !(percent > 0.0 && percent <= 100.0) => Err(Error::config(
                format!("{}: D_x percent {percent} outside (0, 100]", self.label()),
            )),
            DvhMetricKind::DoseAtCc { cc } if !(cc > 0.0 && cc.is_finite()) => {
                Err(Error::config(format!("{}: D_cc volume must be > 0", self.label())))
            }
            _ => Ok(()),
        }
    }

    /// Short label such as `PTV:D95`, `Cord:mean`, `Cord:D0.1cc`.
    pub fn label(&self) -> String {
        match self.kind {
            DvhMetricKind::DoseAtVolume { percent } => format!("{}:D{percent}", self.roi),
            DvhMetricKind::MeanDose => format!("{}:mean", self.roi),
            DvhMetricKind::DoseAtCc { cc } => format!("{}:D{cc}cc", self.roi),
        }
    }
}

/// Benchmark metric set: D1, D95, D99 for targets; mean dose and D0.1cc for OARs.
pub fn default_dvh_specs<T>(record: &PatientRecord<T>) -> Vec<DvhMetricSpec> {
    let mut specs = Vec::new();
    for (name, roi) in &record.rois {
        match roi.role {
            RoiRole::Target => {
                specs.extend([1.0, 95.0, 99.0].map(|x| DvhMetricSpec::d_x(name, x)));
            }
            RoiRole::Oar => {
                specs.push(DvhMetricSpec::mean(name));
                specs.push(DvhMetricSpec::d_cc(name, 0.1));
            }
        }
    }
    specs
}

/// Rank (1-based, counted from the hottest voxel) for a fraction of `n`.
fn rank_from_top(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

pub fn dvh_metric<T: Scalar>(
    dose: &ScalarGrid<T>,
    roi: &MaskGrid,
    spec: &DvhMetricSpec,
    voxel_volume_cc: f64,
) -> Result<T> {
    spec.validate()?;
    let mut d = roi_doses(dose, roi, &spec.roi)?;
    let n = d.len();
    match spec.kind {
        DvhMetricKind::MeanDose => Ok(ordered_sum(d) / T::of_usize(n)),
        DvhMetricKind::DoseAtVolume { percent } => {
            sort_ascending(&mut d);
            Ok(d[n - rank_from_top(percent / 100.0, n)])
        }
        DvhMetricKind::DoseAtCc { cc } => {
            let voxels = (cc / voxel_volume_cc - 1e-9).ceil().max(1.0) as usize;
            if voxels > n {
                return Err(Error::Metric(format!(
                    "{}: {cc} cc exceeds the ROI volume of {:.4} cc",
                    spec.label(),
                    n as f64 * voxel_volume_cc
                )));
            }
            sort_ascending(&mut d);
            Ok(d[n - voxels])
        }
    }
}

/// Per-spec metric difference; `None` (with a warning) when the ROI is
/// absent or empty or the metric is undefined for it.
pub fn metric_difference<T: Scalar>(
    pred: &ScalarGrid<T>,
    reference: &ScalarGrid<T>,
    record: &PatientRecord<T>,
    spec: &DvhMetricSpec,
) -> Result<Option<T>> {
    let roi = match record.rois.get(&spec.roi) {
        Some(roi) if !roi.mask.is_empty() => &roi.mask,
        _ => {
            warn!("patient `{}`: skipping {} (ROI absent)", record.id, spec.label());
            return Ok(None);
        }
    };
    let cc = record.shape().voxel_volume_cc();
    match (dvh_metric(pred, roi, spec, cc), dvh_metric(reference, roi, spec, cc)) {
        (Ok(a), Ok(b)) => Ok(Some((a - b).abs())),
        (Err(Error::Metric(msg)), _) | (_, Err(Error::Metric(msg))) => {
            warn!("patient `{}`: skipping {}", record.id, msg);
            Ok(None)
        }
        (Err(e), _) | (_, Err(e)) => Err(e),
    }
}

/// Mean absolute DVH-metric difference over the resolvable specs.
pub fn dvh_score<T: Scalar>(
    pred: &ScalarGrid<T>,
    reference: &ScalarGrid<T>,
    record: &PatientRecord<T>,
    specs: &[DvhMetricSpec],
) -> Result<T> {
    let mut diffs = Vec::with_capacity(specs.len());
    for spec in specs {
        if let Some(d) = metric_difference(pred, reference, record, spec)? {
            diffs.push(d);
        }
    }
    if diffs.is_empty() {
        return Err(Error::Metric(format!(
            "patient `{}`: none of the {} DVH specs is resolvable",
            record.id,
            specs.len()
        )));
    }
    let n = T::of_usize(diffs.len());
    Ok(ordered_sum(diffs) / n)
}

/// Pointwise predictive DVH band.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DvhBand<T> {
    pub roi: String,
    pub levels: Vec<T>,
    /// Nearest-rank 2.5th percentile of the member curves.
    pub lower: Vec<T>,
    pub median: Vec<T>,
    /// Nearest-rank 97.5th percentile of the member curves.
    pub upper: Vec<T>,
    /// DVH of the ensemble-mean dose. Not guaranteed to lie inside the band.
    pub mean_dose: Vec<T>,
}

/// Nearest-rank percentile (`q` in (0, 1]) of `sorted_ascending`.
pub fn nearest_rank<T: Copy>(sorted_ascending: &[T], q: f64) -> T {
    let n = sorted_ascending.len();
    sorted_ascending[rank_from_top(q, n) - 1]
}

pub fn dvh_band<T: Scalar>(
    roi_name: &str,
    ensemble: &DoseEnsemble<T>,
    roi: &MaskGrid,
    n_levels: usize,
) -> Result<DvhBand<T>> {
    let stats = ensemble_stats(ensemble)?;
    let mut member_doses = ensemble
        .members()
        .iter()
        .map(|m| roi_doses(m, roi, roi_name))
        .collect::<Result<Vec<_>>>()?;
    member_doses.iter_mut().for_each(|d| sort_ascending(d));
    let mut mean_doses = roi_doses(&stats.mean, roi, roi_name)?;
    sort_ascending(&mut mean_doses);

    let max = member_doses
        .iter()
        .map(|d| *d.last().unwrap())
        .fold(*mean_doses.last().unwrap(), T::max);
    let levels = dose_levels(max, n_levels);
    let mut band = DvhBand {
        roi: roi_name.to_string(),
        levels: levels.clone(),
        lower: Vec::with_capacity(n_levels),
        median: Vec::with_capacity(n_levels),
        upper: Vec::with_capacity(n_levels),
        mean_dose: Vec::with_capacity(n_levels),
    };
    for &level in &levels {
        let mut v: Vec<T> = member_doses.iter().map(|d| fraction_at_least(d, level)).collect();
        sort_ascending(&mut v);
        band.lower.push(nearest_rank(&v, 0.025));
        band.median.push(nearest_rank(&v, 0.5));
        band.upper.push(nearest_rank(&v, 0.975));
        band.mean_dose.push(fraction_at_least(&mean_doses, level));
    }
    Ok(band)
}

/// How the voxel σ map is reduced to the scalar penalty U_t.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyAggregation {
    #[default]
    TargetMean,
    TargetMax,
    FeasibleMean,
}

/// Mean σ over the ROI.
pub fn uncertainty_summary<T: Scalar>(stats: &EnsembleStats<T>, roi: &MaskGrid) -> Result<T> {
    let s = roi_doses(&stats.std, roi, "uncertainty ROI")?;
    let n = T::of_usize(s.len());
    Ok(ordered_sum(s) / n)
}

/// U_t for a patient under the chosen aggregation.
pub fn uncertainty_penalty<T: Scalar>(
    stats: &EnsembleStats<T>,
    record: &PatientRecord<T>,
    aggregation: UncertaintyAggregation,
) -> Result<T> {
    match aggregation {
        UncertaintyAggregation::TargetMean => uncertainty_summary(stats, &record.target_union()?),
        UncertaintyAggregation::FeasibleMean => uncertainty_summary(stats, &record.feasible),
        UncertaintyAggregation::TargetMax => {
            let s = roi_doses(&stats.std, &record.target_union()?, "uncertainty ROI")?;
            Ok(s.into_iter().fold(T::zero(), T::max))
        }
    }
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// CSV columns: `roi,dose_gy,volume_fraction`.
pub fn write_dvh_curves<T: Scalar>(path: &Path, curves: &[DvhCurve<T>]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "roi,dose_gy,volume_fraction").map_err(io)?;
    for c in curves {
        for (l, v) in c.levels.iter().zip(&c.volume) {
            writeln!(w, "{},{l},{v}", c.roi).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// CSV columns: `label,roi,dose_gy,lower,median,upper,mean_dose`.
pub fn write_dvh_bands<T: Scalar>(path: &Path, bands: &[(String, DvhBand<T>)]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "label,roi,dose_gy,lower,median,upper,mean_dose").map_err(io)?;
    for (label, b) in bands {
        for i in 0..b.levels.len() {
            writeln!(
                w,
                "{label},{},{},{},{},{},{}",
                b.roi, b.levels[i], b.lower[i], b.median[i], b.upper[i], b.mean_dose[i]
            )
            .map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridShape;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Gamma};

    fn line(n: usize) -> GridShape {
        GridShape::new(n, 1, 1, [1.0; 3]).unwrap()
    }

    fn ensemble_of(values: Vec<Vec<f64>>) -> DoseEnsemble<f64> {
        let shape = line(values[0].len());
        let n = values.len();
        DoseEnsemble::new(
            values.into_iter().map(|v| ScalarGrid::new(shape, v).unwrap()).collect(),
            (0..n as u64).collect(),
        )
        .unwrap()
    }

    #[test]
    fn two_member_variance() {
        let stats = ensemble_stats(&ensemble_of(vec![vec![0.0], vec![2.0]])).unwrap();
        assert_eq!(stats.mean[0], 1.0);
        assert_eq!(stats.variance[0], 2.0);
        let same = ensemble_stats(&ensemble_of(vec![vec![3.0, 1.0]; 5])).unwrap();
        assert!(same.variance.values().iter().all(|&v| v == 0.0));
        assert!(matches!(
            ensemble_stats(&ensemble_of(vec![vec![1.0]])),
            Err(Error::EnsembleTooSmall { .. })
        ));
    }

    #[test]
    fn variance_estimator_is_unbiased() {
        // Gamma(k=2, θ=1.5): variance kθ² = 4.5.
        let gamma = Gamma::new(2.0, 1.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let trials = 10_000;
        let mut acc = 0.0;
        for _ in 0..trials {
            let members = (0..5).map(|_| vec![gamma.sample(&mut rng)]).collect();
            acc += ensemble_stats(&ensemble_of(members)).unwrap().variance[0];
        }
        let mean_var = acc / trials as f64;
        assert!((mean_var / 4.5 - 1.0).abs() < 0.05, "{mean_var}");
    }

    #[test]
    fn dvh_order_statistics() {
        let shape = line(100);
        let dose = ScalarGrid::from_fn(shape, |i| (i + 1) as f64).unwrap();
        let roi = MaskGrid::full(shape);
        let m = |s: DvhMetricSpec| dvh_metric(&dose, &roi, &s, 1.0).unwrap();
        assert_eq!(m(DvhMetricSpec::d_x("r", 95.0)), 6.0);
        assert_eq!(m(DvhMetricSpec::d_x("r", 99.0)), 2.0);
        assert_eq!(m(DvhMetricSpec::d_x("r", 100.0)), 1.0);
        assert_eq!(m(DvhMetricSpec::mean("r")), 50.5);
        assert_eq!(m(DvhMetricSpec::d_cc("r", 3.0)), 98.0);
        assert_eq!(volume_fraction(&dose, &roi, 6.0).unwrap(), 0.95);
        assert!(dvh_metric(&dose, &roi, &DvhMetricSpec::d_cc("r", 101.0), 1.0).is_err());
        assert!(dvh_metric(&dose, &MaskGrid::empty(shape), &DvhMetricSpec::mean("r"), 1.0).is_err());
    }

    #[test]
    fn uniform_dose_dvh_is_step() {
        let shape = line(10);
        let dose = ScalarGrid::filled(shape, 42.0);
        let roi = MaskGrid::full(shape);
        let curve = dvh("r", &dose, &roi, 7).unwrap();
        assert!(curve.volume.iter().all(|&v| v == 1.0));
        assert_eq!(volume_fraction(&dose, &roi, 42.0 + 1e-9).unwrap(), 0.0);
        for x in [1.0, 50.0, 100.0] {
            assert_eq!(dvh_metric(&dose, &roi, &DvhMetricSpec::d_x("r", x), 1.0).unwrap(), 42.0);
        }
        let two = ScalarGrid::new(line(2), vec![0.0, 10.0]).unwrap();
        assert_eq!(
            dvh_metric(&two, &MaskGrid::full(line(2)), &DvhMetricSpec::mean("r"), 1.0).unwrap(),
            5.0
        );
    }

    #[test]
    fn band_conventions() {
        let e = ensemble_of(vec![vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 0.5]]);
        let roi = MaskGrid::full(line(3));
        let band = dvh_band("r", &e, &roi, 9).unwrap();
        for (i, &l) in band.levels.iter().enumerate() {
            let a = volume_fraction(&e.members()[0], &roi, l).unwrap();
            let b = volume_fraction(&e.members()[1], &roi, l).unwrap();
            assert_eq!(band.lower[i], a.min(b));
            assert_eq!(band.upper[i], a.max(b));
        }
        let same = ensemble_of(vec![vec![1.0, 2.0, 3.0]; 4]);
        let band = dvh_band("r", &same, &roi, 5).unwrap();
        let curve = dvh("r", &same.members()[0], &roi, 5).unwrap();
        assert_eq!(band.lower, curve.volume);
        assert_eq!(band.upper, curve.volume);
        assert_eq!(band.mean_dose, curve.volume);
    }

    #[test]
    fn uncertainty_summary_examples() {
        let e = ensemble_of(vec![vec![1.0, 5.0, 2.0]; 3]);
        let stats = ensemble_stats(&e).unwrap();
        assert_eq!(uncertainty_summary(&stats, &MaskGrid::full(line(3))).unwrap(), 0.0);
        let mut stats = stats;
        stats.std = ScalarGrid::filled(line(3), 0.625);
        assert_eq!(uncertainty_summary(&stats, &MaskGrid::full(line(3))).unwrap(), 0.625);
    }

    #[test]
    fn metric_specs_round_trip_and_reject_unknown_keys() {
        for spec in [
            DvhMetricSpec::d_x("PTV", 95.0),
            DvhMetricSpec::mean("Cord"),
            DvhMetricSpec::d_cc("Cord", 0.1),
        ] {
            let text = serde_json::to_string(&spec).unwrap();
            assert_eq!(serde_json::from_str::<DvhMetricSpec>(&text).unwrap(), spec);
        }
        let parsed: DvhMetricSpec = serde_json::from_str(r#"{"kind":"dose_at_cc","roi":"Cord","cc":0.1}"#).unwrap();
        assert_eq!(parsed, DvhMetricSpec::d_cc("Cord", 0.1));
        assert!(serde_json::from_str::<DvhMetricSpec>(r#"{"kind":"mean_dose","roi":"Cord","cc":1}"#).is_err());
        assert!(serde_json::from_str::<DvhMetricSpec>(r#"{"kind":"dose_at_cc","roi":"Cord"}"#).is_err());
    }

    proptest! {
        #[test]
        fn dvh_is_monotone(seed in 0u64..10_000, n_levels in 2usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = line(30);
            let dose = ScalarGrid::<f64>::from_fn(shape, |_| rng.random_range(0.0..70.0)).unwrap();
            let roi = MaskGrid::from_fn(shape, |i| i == 0 || rng.random_bool(0.5));
            let curve = dvh("r", &dose, &roi, n_levels).unwrap();
            prop_assert_eq!(curve.volume[0], 1.0);
            prop_assert!(curve.volume.windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(curve.volume.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn d_x_is_monotone(seed in 0u64..10_000, x1 in 0.1f64..100.0, x2 in 0.1f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = line(25);
            let dose = ScalarGrid::<f64>::from_fn(shape, |_| rng.random_range(0.0..70.0)).unwrap();
            let roi = MaskGrid::full(shape);
            let (lo, hi) = (x1.min(x2), x1.max(x2));
            let d_lo = dvh_metric(&dose, &roi, &DvhMetricSpec::d_x("r", lo), 1.0).unwrap();
            let d_hi = dvh_metric(&dose, &roi, &DvhMetricSpec::d_x("r", hi), 1.0).unwrap();
            prop_assert!(d_lo >= d_hi);
        }

        #[test]
        fn band_is_ordered_and_contains_median(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let members = (0..20).map(|_| (0..12).map(|_| rng.random_range(0.0..60.0)).collect()).collect();
            let e = ensemble_of(members);
            let band = dvh_band("r", &e, &MaskGrid::full(line(12)), 15).unwrap();
            for i in 0..band.levels.len() {
                prop_assert!(band.lower[i] <= band.median[i] && band.median[i] <= band.upper[i]);
            }
        }

        #[test]
        fn scores_are_symmetric(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = line(20);
            let a = ScalarGrid::<f64>::from_fn(shape, |_| rng.random_range(0.0..60.0)).unwrap();
            let b = ScalarGrid::<f64>::from_fn(shape, |_| rng.random_range(0.0..60.0)).unwrap();
            let mask = MaskGrid::from_fn(shape, |i| i == 0 || rng.random_bool(0.5));
            prop_assert_eq!(dose_score(&a, &b, &mask).unwrap(), dose_score(&b, &a, &mask).unwrap());
            prop_assert_eq!(dose_score(&a, &a, &mask).unwrap(), 0.0);
        }
    }
}
