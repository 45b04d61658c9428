//! The fractionated closed loop: anatomy drift, fraction-level observation,
//! recalibration, ensemble prediction and action selection.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{
    filter_update, map_update, proxy_recalibrate, BeliefState, DoseScalingModel, FractionObservation, MapConfig,
    Matrix, RecalibrationConfig, StateSpaceSpec,
};
use crate::decision::{apply_action, select_action, ActionKind, ActionSpec, Comparator, ConstraintSpec, UtilityConfig};
use crate::error::{Error, Result};
use crate::grid::{PatientRecord, ScalarGrid};
use crate::phantom::{apply_shift, generate_cohort, generate_phantom, PhantomSpec, ShiftEvent};
use crate::scalar::{ordered_sum, Scalar};
use crate::surrogate::{
    featurize, predict, train, training_samples, DropoutMask, FeatureConfig, FeatureSet, ParamVector, TrainConfig,
    TrainOutcome,
};
use crate::uq::{
    default_dvh_specs, dose_score, dvh_band, dvh_score, ensemble_stats, uncertainty_penalty, DoseEnsemble, DvhBand,
    DvhMetricSpec, UncertaintyAggregation,
};

/// Compact feature layout for sphere phantoms: bias, one falloff channel per
/// target, and the contour-consistency channel.
pub fn phantom_features<T>(phantom: &PhantomSpec<T>) -> FeatureConfig {
    FeatureConfig {
        signed_distance: false,
        falloff_widths_mm: vec![phantom.kernel_width_mm],
        consistency_tolerance_hu: Some(25.0),
        ..FeatureConfig::new([phantom.target_name.clone()])
    }
}

/// How the twin's initial surrogate is fitted on a jittered phantom cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateFit<T> {
    pub cohort_size: usize,
    pub jitter_mm: f64,
    pub dropout: T,
    pub init_scale: T,
    pub freeze_encoder: bool,
    pub training: TrainConfig<T>,
}

impl<T: Scalar> Default for SurrogateFit<T> {
    fn default() -> Self {
        SurrogateFit {
            cohort_size: 10,
            jitter_mm: 3.0,
            dropout: T::of(0.2),
            init_scale: T::one(),
            freeze_encoder: true,
            training: TrainConfig {
                tolerance: T::of(1e-9),
                ..TrainConfig::new(T::one(), 400)
            },
        }
    }
}

pub fn fit_surrogate<T: Scalar>(
    phantom: &PhantomSpec<T>,
    features: &FeatureConfig,
    fit: &SurrogateFit<T>,
    seed: u64,
) -> Result<TrainOutcome<T>> {
    if fit.cohort_size == 0 {
        return Err(Error::config("surrogate cohort must contain at least one phantom"));
    }
    let cohort = generate_cohort(phantom, fit.cohort_size, fit.jitter_mm, seed)?;
    let samples = training_samples(&cohort, features)?;
    let pairs: Vec<_> = samples.iter().map(|s| (&s.features, &s.mask)).collect();
    let init = ParamVector::initialize(&pairs, fit.dropout, fit.init_scale, seed)?;
    train(&init, &samples, &fit.training, fit.freeze_encoder)
}

/// Fires recalibration when U_t exceeds `ratio` times its trailing mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecalibrationTrigger {
    pub ratio: f64,
    pub window: usize,
}

impl Default for RecalibrationTrigger {
    fn default() -> Self {
        RecalibrationTrigger { ratio: 1.5, window: 3 }
    }
}

#[derive(Clone, Debug)]
pub struct ScenarioSpec<T> {
    pub phantom: PhantomSpec<T>,
    pub n_fractions: usize,
    pub shift_events: Vec<ShiftEvent>,
    pub actions: Vec<ActionSpec<T>>,
    pub plan_library: Vec<ScalarGrid<T>>,
    pub constraints: Vec<ConstraintSpec>,
    pub utility: UtilityConfig,
    pub aggregation: UncertaintyAggregation,
    pub k: usize,
    /// Scheduled recalibration at fractions 1, 1 + n, 1 + 2n, ...
    pub recalibrate_every: usize,
    pub trigger: Option<RecalibrationTrigger>,
    pub recalibration: RecalibrationConfig<T>,
    /// Standard deviation of the noise on observed ROI mean doses (Gy).
    pub obs_noise_gy: f64,
    pub features: FeatureConfig,
    /// The twin's surrogate at the start of treatment.
    pub params: ParamVector<T>,
    pub filter_particles: usize,
    /// Random-walk variance of the diagnostic dose-scaling state.
    pub filter_process_var: f64,
    pub dvh_levels: usize,
    pub seed: u64,
}

impl<T: Scalar> ScenarioSpec<T> {
    /// Identity-action scenario on `phantom` with no drift or constraints.
    pub fn new(phantom: PhantomSpec<T>, params: ParamVector<T>, n_fractions: usize, seed: u64) -> Self {
        ScenarioSpec {
            features: phantom_features(&phantom),
            phantom,
            n_fractions,
            shift_events: Vec::new(),
            actions: vec![ActionSpec::identity()],
            plan_library: Vec::new(),
            constraints: Vec::new(),
            utility: UtilityConfig::default(),
            aggregation: UncertaintyAggregation::default(),
            k: 30,
            recalibrate_every: 5,
            trigger: Some(RecalibrationTrigger::default()),
            recalibration: RecalibrationConfig::default(),
            obs_noise_gy: 0.5,
            params,
            filter_particles: 256,
            filter_process_var: 1e-4,
            dvh_levels: 50,
            seed,
        }
    }

    /// Thirty fractions on the desk phantom with a 6 mm shift along +z at
    /// fraction 10, three global-scaling actions and two OAR chance
    /// constraints.
    pub fn desk_default(params: ParamVector<T>, seed: u64) -> Self {
        let phantom = PhantomSpec::desk_default("desk", seed);
        let mut spec = Self::new(phantom, params, 30, seed);
        spec.shift_events = vec![ShiftEvent {
            fraction_index: 10,
            displacement: [0.0, 0.0, 6.0],
        }];
        spec.actions = vec![
            ActionSpec::identity(),
            ActionSpec::scale("scale_0.95", T::of(0.95)),
            ActionSpec::scale("scale_1.05", T::of(1.05)),
        ];
        spec.constraints = vec![
            ConstraintSpec {
                id: "cord_d0.1cc".into(),
                metric: DvhMetricSpec::d_cc("Cord", 0.1),
                comparator: Comparator::AtMost,
                threshold: 64.0,
                alpha: 0.2,
            },
            ConstraintSpec {
                id: "parotid_mean".into(),
                metric: DvhMetricSpec::mean("Parotid"),
                comparator: Comparator::AtMost,
                threshold: 50.0,
                alpha: 0.2,
            },
        ];
        spec
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.features.validate()?;
        self.utility.validate()?;
        self.recalibration.validate()?;
        if self.n_fractions == 0 {
            return Err(Error::config("scenario needs at least one fraction"));
        }
        if self.k < 2 {
            return Err(Error::config("scenario ensemble size K must be >= 2"));
        }
        if self.recalibrate_every == 0 {
            return Err(Error::config("recalibrate_every must be >= 1"));
        }
        if let Some(t) = &self.trigger {
            if !(t.ratio > 1.0 && t.window >= 1) {
                return Err(Error::config("recalibration trigger needs ratio > 1 and window >= 1"));
            }
        }
        if !(self.obs_noise_gy > 0.0 && self.obs_noise_gy.is_finite()) {
            return Err(Error::config("observation noise must be > 0"));
        }
        if !(self.filter_process_var > 0.0) || self.filter_particles == 0 || self.dvh_levels < 2 {
            return Err(Error::config(
                "filter needs particles >= 1 and process variance > 0; DVH bands need >= 2 levels",
            ));
        }
        if self.params.n_features() != self.features.n_features() {
            return Err(Error::Dimension(format!(
                "surrogate has {} weights, feature configuration yields {}",
                self.params.n_features(),
                self.features.n_features()
            )));
        }
        for e in &self.shift_events {
            if e.fraction_index == 0 || e.fraction_index > self.n_fractions {
                return Err(Error::config(format!(
                    "shift at fraction {} lies outside [1, {}]",
                    e.fraction_index, self.n_fractions
                )));
            }
        }
        if self.actions.is_empty() {
            return Err(Error::config("scenario needs at least one action"));
        }
        let mut ids = std::collections::BTreeSet::new();
        let bounds = Default::default();
        for a in &self.actions {
            if !ids.insert(&a.id) {
                return Err(Error::config(format!("duplicate action id `{}`", a.id)));
            }
            if let ActionKind::SpatialMask(g) = &a.kind {
                g.shape()
                    .ensure_same(&self.phantom.shape, &format!("action `{}`", a.id))?;
            }
            a.validate(&bounds, self.plan_library.len())?;
        }
        for c in &self.constraints {
            c.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FractionLog {
    pub fraction: usize,
    pub action: String,
    pub mean_utility: f64,
    pub tcp: f64,
    pub ntcp: f64,
    /// Uncertainty penalty of the unmodified surrogate ensemble (Gy).
    pub u_t: f64,
    /// Uncertainty penalty of the chosen action's ensemble (Gy).
    pub action_u: f64,
    pub satisfaction: Vec<(String, f64)>,
    /// Ensemble-mean prediction vs the day's ground-truth dose.
    pub dose_score: f64,
    pub dvh_score: f64,
    pub recalibrated: bool,
    pub triggered: bool,
    /// Posterior-mean delivered/predicted ratio per ROI, particle filter.
    pub filter_scale: Vec<(String, f64)>,
    /// The same ratio from the MAP update.
    pub map_scale: Vec<(String, f64)>,
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct ScenarioOutcome<T> {
    pub logs: Vec<FractionLog>,
    /// DVH bands of the chosen action's ensemble, per fraction and ROI.
    pub bands: Vec<(usize, Vec<DvhBand<T>>)>,
    pub params: ParamVector<T>,
}

fn derived_seed(seed: u64, channel: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ channel.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(index);
    rng.random()
}

const MEMBER_CHANNEL: u64 = 1;

/// Dropout seeds of a K-member ensemble; distinct with overwhelming
/// probability and stable across runs.
pub fn member_seeds(seed: u64, k: usize) -> Vec<u64> {
    (0..k as u64).map(|i| derived_seed(seed, MEMBER_CHANNEL, i)).collect()
}
const NOISE_CHANNEL: u64 = 2;
const FILTER_CHANNEL: u64 = 3;

fn roi_means<T: Scalar>(dose: &ScalarGrid<T>, record: &PatientRecord<T>) -> Vec<(String, T)> {
    record
        .rois
        .iter()
        .map(|(name, roi)| {
            let n = T::of_usize(roi.mask.count().max(1));
            (name.clone(), ordered_sum(roi.mask.indices().map(|i| dose[i])) / n)
        })
        .collect()
}

fn dose_scale<T: Scalar>(action: &ActionSpec<T>) -> Option<T> {
    match action.kind {
        ActionKind::Scale(s) => Some(s),
        _ => None,
    }
}

fn ensemble<T: Scalar>(params: &ParamVector<T>, features: &FeatureSet<T>, seeds: &[u64]) -> Result<DoseEnsemble<T>> {
    let n = params.n_features();
    let p = params.dropout();
    let members = seeds
        .par_iter()
        .map(|&s| predict(params, features, Some(&DropoutMask::new(s, p, n))))
        .collect::<Result<Vec<_>>>()?;
    DoseEnsemble::new(members, seeds.to_vec())
}

/// Runs the closed loop for `spec.n_fractions` fractions.
///
/// The ground-truth patient follows the shift events. The twin sees each
/// day's CT but keeps its contours, feasible mask and surrogate from the last
/// recalibration, when it adopts the day's contours and refits the decoder to
/// the observations gathered since. Ensemble member `k` uses the same dropout
/// seed in every fraction.
pub fn run_scenario<T: Scalar>(spec: &ScenarioSpec<T>) -> Result<ScenarioOutcome<T>> {
    spec.validate()?;
    let kernel = spec.phantom.kernel_width_mm;
    let mut truth = generate_phantom(&spec.phantom)?;
    let mut twin = truth.clone();
    twin.reference_dose = None;
    let mut params = spec.params.clone();
    let seeds = member_seeds(spec.seed, spec.k);
    let actions: BTreeMap<&str, &ActionSpec<T>> = spec.actions.iter().map(|a| (a.id.as_str(), a)).collect();

    let n_rois = truth.rois.len();
    let mut belief = BeliefState::gaussian(
        &vec![T::one(); n_rois],
        &Matrix::diagonal(&vec![T::of(0.01); n_rois]),
        &[],
        spec.filter_particles,
        derived_seed(spec.seed, FILTER_CHANNEL, 0),
    )?;
    let mut map_x = vec![T::one(); n_rois];
    let process = Matrix::diagonal(&vec![T::of(spec.filter_process_var); n_rois]);
    let observation_cov = Matrix::diagonal(&vec![T::of(spec.obs_noise_gy * spec.obs_noise_gy); n_rois]);
    let noise_std = T::of(spec.obs_noise_gy);

    let mut previous = ActionSpec::identity();
    let mut pending: Vec<FractionObservation<T>> = Vec::new();
    let mut logs: Vec<FractionLog> = Vec::with_capacity(spec.n_fractions);
    let mut bands = Vec::with_capacity(spec.n_fractions);

    for t in 1..=spec.n_fractions {
        let started = Instant::now();
        let at = |e: Error| e.at_fraction(t);
        for event in spec.shift_events.iter().filter(|e| e.fraction_index == t) {
            truth = apply_shift(&truth, event, kernel).map_err(at)?;
        }
        twin.ct = truth.ct.clone();

        let oracle = truth.reference().map_err(at)?.clone();
        let delivered = apply_action(&oracle, &previous, &spec.plan_library).map_err(at)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(spec.seed, NOISE_CHANNEL, t as u64));
        let observed = roi_means(&delivered, &truth)
            .into_iter()
            .map(|(name, mean)| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (name, mean + noise_std * T::of(z))
            })
            .collect();
        let obs = FractionObservation {
            fraction: t,
            action: previous.id.clone(),
            control: Vec::new(),
            dose_scale: dose_scale(&previous),
            roi_means: observed,
        };
        pending.push(obs.clone());

        let scheduled = (t - 1) % spec.recalibrate_every == 0;
        let triggered = match &spec.trigger {
            Some(trig) if logs.len() > trig.window => {
                let last = logs[logs.len() - 1].u_t;
                let trailing = &logs[logs.len() - 1 - trig.window..logs.len() - 1];
                let mean = trailing.iter().map(|l| l.u_t).sum::<f64>() / trig.window as f64;
                last > trig.ratio * mean
            }
            _ => false,
        };
        let recalibrated = scheduled || triggered;
        if recalibrated {
            twin.rois = truth.rois.clone();
            twin.feasible = truth.feasible.clone();
        }
        let features = featurize(&twin, &spec.features).map_err(at)?;
        if recalibrated {
            let out = proxy_recalibrate(&params, &twin, &features, &pending, &spec.recalibration).map_err(at)?;
            info!(
                "fraction {t}: recalibrated on {} summaries, objective {:.4} -> {:.4}",
                out.n_summaries,
                out.objective_before.as_f64(),
                out.objective_after.as_f64()
            );
            params = out.params;
            pending.clear();
        }

        let planned = predict(&params, &features, None).map_err(at)?;
        let planned_delivery = apply_action(&planned, &previous, &spec.plan_library).map_err(at)?;
        let planned_means: Vec<T> = roi_means(&planned_delivery, &twin)
            .into_iter()
            .map(|(_, m)| m.max(T::of(1e-6)))
            .collect();
        let ss = StateSpaceSpec::new(
            DoseScalingModel { planned_means },
            &process,
            &observation_cov,
            T::zero(),
        )
        .map_err(at)?;
        belief = filter_update(&belief, &obs, &ss, derived_seed(spec.seed, FILTER_CHANNEL, t as u64)).map_err(at)?;
        let map = map_update(&map_x, &[], &obs, &ss, (&map_x, &[]), &MapConfig::default()).map_err(at)?;
        map_x = map.x;

        let base = ensemble(&params, &features, &seeds).map_err(at)?;
        let base_stats = ensemble_stats(&base).map_err(at)?;
        let u_t = uncertainty_penalty(&base_stats, &twin, spec.aggregation)
            .map_err(at)?
            .as_f64();
        let mut per_action = BTreeMap::new();
        for (id, action) in &actions {
            let e = base
                .try_map(|m| apply_action(m, action, &spec.plan_library))
                .map_err(at)?;
            per_action.insert(id.to_string(), e);
        }
        let decision =
            select_action(&per_action, &twin, &spec.constraints, &spec.utility, spec.aggregation).map_err(at)?;
        let chosen = decision.chosen_evaluation();

        let reference_specs: Vec<DvhMetricSpec> = default_dvh_specs(&truth);
        let mean = &base_stats.mean;
        let ds = dose_score(mean, &oracle, &truth.feasible).map_err(at)?.as_f64();
        let dvh = dvh_score(mean, &oracle, &truth, &reference_specs).map_err(at)?.as_f64();

        let chosen_ensemble = &per_action[&decision.chosen];
        let fraction_bands = twin
            .rois
            .iter()
            .filter(|(_, r)| !r.mask.is_empty())
            .map(|(name, roi)| dvh_band(name, chosen_ensemble, &roi.mask, spec.dvh_levels))
            .collect::<Result<Vec<_>>>()
            .map_err(at)?;
        bands.push((t, fraction_bands));

        let names: Vec<String> = truth.rois.keys().cloned().collect();
        let label = |v: Vec<T>| names.iter().cloned().zip(v.into_iter().map(|x| x.as_f64())).collect();
        logs.push(FractionLog {
            fraction: t,
            action: decision.chosen.clone(),
            mean_utility: chosen.mean_utility,
            tcp: chosen.mean_tcp,
            ntcp: chosen.mean_ntcp,
            u_t,
            action_u: chosen.u_penalty,
            satisfaction: chosen
                .satisfaction
                .iter()
                .map(|s| (s.constraint.clone(), s.fraction))
                .collect(),
            dose_score: ds,
            dvh_score: dvh,
            recalibrated,
            triggered,
            filter_scale: label(belief.mean_state()),
            map_scale: label(map_x.clone()),
            seconds: started.elapsed().as_secs_f64(),
        });
        previous = actions[decision.chosen.as_str()].clone();
    }
    Ok(ScenarioOutcome { logs, bands, params })
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// One row per fraction; constraint and ROI columns follow the first log.
pub fn write_fraction_logs_csv(path: &Path, logs: &[FractionLog]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    let mut header = vec![
        "fraction",
        "action",
        "mean_utility",
        "tcp",
        "ntcp",
        "u_t",
        "action_u",
        "dose_score",
        "dvh_score",
        "recalibrated",
        "triggered",
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    if let Some(first) = logs.first() {
        header.extend(first.satisfaction.iter().map(|(c, _)| format!("sat:{c}")));
        header.extend(first.filter_scale.iter().map(|(r, _)| format!("filter_scale:{r}")));
        header.extend(first.map_scale.iter().map(|(r, _)| format!("map_scale:{r}")));
    }
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for l in logs {
        let mut row = vec![
            l.fraction.to_string(),
            l.action.clone(),
            l.mean_utility.to_string(),
            l.tcp.to_string(),
            l.ntcp.to_string(),
            l.u_t.to_string(),
            l.action_u.to_string(),
            l.dose_score.to_string(),
            l.dvh_score.to_string(),
            (l.recalibrated as u8).to_string(),
            (l.triggered as u8).to_string(),
        ];
        row.extend(l.satisfaction.iter().map(|(_, v)| v.to_string()));
        row.extend(l.filter_scale.iter().map(|(_, v)| v.to_string()));
        row.extend(l.map_scale.iter().map(|(_, v)| v.to_string()));
        writeln!(w, "{}", row.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_fraction_logs_json(path: &Path, logs: &[FractionLog]) -> Result<()> {
    let text = serde_json::to_string_pretty(logs)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Wall-clock seconds per fraction, kept apart so the logs stay reproducible.
pub fn write_timing_csv(path: &Path, logs: &[FractionLog]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "fraction,seconds").map_err(io)?;
    for l in logs {
        writeln!(w, "{},{:.6}", l.fraction, l.seconds).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CohortRow {
    pub id: String,
    pub dose_score: f64,
    pub dvh_score: f64,
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation; `None` for fewer than two patients.
    pub std: Option<f64>,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Aggregate> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std =
            (values.len() >= 2).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Some(Aggregate { mean, std })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CohortReport {
    pub rows: Vec<CohortRow>,
    /// Patients without a reference dose.
    pub skipped: Vec<String>,
    pub dose_score: Option<Aggregate>,
    pub dvh_score: Option<Aggregate>,
}

impl CohortReport {
    pub fn from_rows(rows: Vec<CohortRow>, skipped: Vec<String>) -> Self {
        let ds: Vec<f64> = rows.iter().map(|r| r.dose_score).collect();
        let dvh: Vec<f64> = rows.iter().map(|r| r.dvh_score).collect();
        CohortReport {
            dose_score: Aggregate::of(&ds),
            dvh_score: Aggregate::of(&dvh),
            rows,
            skipped,
        }
    }

    /// Per-patient rows followed by `mean` and `std` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = create(path)?;
        let io = |e| Error::io(path, e);
        writeln!(w, "patient,dose_score,dvh_score,seconds").map_err(io)?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{:.6}", r.id, r.dose_score, r.dvh_score, r.seconds).map_err(io)?;
        }
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let (d, v) = (self.dose_score, self.dvh_score);
        writeln!(w, "mean,{},{},", fmt(d.map(|a| a.mean)), fmt(v.map(|a| a.mean))).map_err(io)?;
        writeln!(w, "std,{},{},", fmt(d.and_then(|a| a.std)), fmt(v.and_then(|a| a.std))).map_err(io)?;
        w.flush().map_err(io)
    }
}

/// Deterministic predictions scored against each patient's reference dose.
///
/// `specs` empty means the default DVH metrics of each patient.
pub fn benchmark_cohort<T: Scalar>(
    patients: &[PatientRecord<T>],
    params: &ParamVector<T>,
    features: &FeatureConfig,
    specs: &[DvhMetricSpec],
) -> Result<CohortReport> {
    let mut rows = Vec::with_capacity(patients.len());
    let mut skipped = Vec::new();
    for patient in patients {
        let Some(reference) = &patient.reference_dose else {
            warn!("patient `{}` has no reference dose; skipped", patient.id);
            skipped.push(patient.id.clone());
            continue;
        };
        let started = Instant::now();
        let pred = predict(params, &featurize(patient, features)?, None)?;
        let defaults;
        let specs = if specs.is_empty() {
            defaults = default_dvh_specs(patient);
            &defaults[..]
        } else {
            specs
        };
        rows.push(CohortRow {
            id: patient.id.clone(),
            dose_score: dose_score(&pred, reference, &patient.feasible)?.as_f64(),
            dvh_score: dvh_score(&pred, reference, patient, specs)?.as_f64(),
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(CohortReport::from_rows(rows, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_aggregate() {
        let a = Aggregate::of(&[1.0, 3.0]).unwrap();
        assert_eq!(a.mean, 2.0);
        assert!((a.std.unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(Aggregate::of(&[4.0]).unwrap().std, None);
        assert_eq!(Aggregate::of(&[]), None);
    }

    #[test]
    fn derived_seeds_differ_by_channel_and_index() {
        let s: std::collections::BTreeSet<u64> = (0..3)
            .flat_map(|c| (0..50).map(move |i| derived_seed(7, c, i)))
            .collect();
        assert_eq!(s.len(), 150);
    }
}
