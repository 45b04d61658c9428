//! Candidate actions, schematic TCP/NTCP utility, and action selection under
//! sample-based chance constraints.

use std::collections::BTreeMap;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::grid::{MaskGrid, PatientRecord, ScalarGrid};
use crate::scalar::{ordered_sum, Scalar};
use crate::uq::{dvh_metric, ensemble_stats, uncertainty_penalty, DoseEnsemble, DvhMetricSpec, UncertaintyAggregation};

#[derive(Clone, Debug, PartialEq)]
pub enum ActionKind<T> {
    /// Deliver member `index` of the plan library.
    PlanSelect(usize),
    /// Multiply the dose voxelwise by the given factors.
    SpatialMask(ScalarGrid<T>),
    /// Multiply the dose by a global factor.
    Scale(T),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionSpec<T> {
    pub id: String,
    pub kind: ActionKind<T>,
}

/// Admissible ranges for action payloads.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActionBounds {
    pub scale_min: f64,
    pub scale_max: f64,
    pub modulation_max: f64,
}

impl Default for ActionBounds {
    fn default() -> Self {
        ActionBounds {
            scale_min: 0.8,
            scale_max: 1.2,
            modulation_max: 2.0,
        }
    }
}

impl<T: Scalar> ActionSpec<T> {
    pub fn scale(id: impl Into<String>, factor: T) -> Self {
        ActionSpec {
            id: id.into(),
            kind: ActionKind::Scale(factor),
        }
    }

    pub fn identity() -> Self {
        Self::scale("identity", T::one())
    }

    pub fn validate(&self, bounds: &ActionBounds, library_len: usize) -> Result<()> {
        let fail = |message: String| {
            Err(Error::InvalidAction {
                id: self.id.clone(),
                message,
            })
        };
        if !(bounds.scale_min > 0.0 && bounds.scale_min <= 1.0 && bounds.scale_max >= 1.0) {
            return Err(Error::config("scale bounds must satisfy 0 < min <= 1 <= max"));
        }
        match &self.kind {
            ActionKind::Scale(s) => {
                let s = s.as_f64();
                if !(s >= bounds.scale_min && s <= bounds.scale_max) {
                    return fail(format!(
                        "scale {s} outside [{}, {}]",
                        bounds.scale_min, bounds.scale_max
                    ));
                }
            }
            ActionKind::SpatialMask(factors) => {
                let max = T::of(bounds.modulation_max);
                if factors.values().iter().any(|&f| f < T::zero() || f > max) {
                    return fail(format!("modulation factors must lie in [0, {}]", bounds.modulation_max));
                }
            }
            ActionKind::PlanSelect(i) => {
                if *i >= library_len {
                    return fail(format!("plan index {i} outside a library of {library_len}"));
                }
            }
        }
        Ok(())
    }
}

pub fn apply_action<T: Scalar>(
    dose: &ScalarGrid<T>,
    action: &ActionSpec<T>,
    plan_library: &[ScalarGrid<T>],
) -> Result<ScalarGrid<T>> {
    let clamp = |v: T| v.max(T::zero());
    match &action.kind {
        ActionKind::Scale(s) => dose.map(|d| clamp(d * *s)),
        ActionKind::SpatialMask(factors) => {
            dose.shape()
                .ensure_same(factors.shape(), &format!("action `{}`", action.id))?;
            ScalarGrid::new(
                *dose.shape(),
                dose.values()
                    .iter()
                    .zip(factors.values())
                    .map(|(&d, &f)| clamp(d * f))
                    .collect(),
            )
        }
        ActionKind::PlanSelect(i) => {
            let plan = plan_library.get(*i).ok_or_else(|| Error::InvalidAction {
                id: action.id.clone(),
                message: format!("plan index {i} outside a library of {}", plan_library.len()),
            })?;
            dose.shape()
                .ensure_same(plan.shape(), &format!("action `{}`", action.id))?;
            plan.map(clamp)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = ">=")]
    AtLeast,
}

/// `P(metric cmp threshold) >= 1 − alpha`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    pub id: String,
    pub metric: DvhMetricSpec,
    pub comparator: Comparator,
    pub threshold: f64,
    pub alpha: f64,
}

impl ConstraintSpec {
    pub fn validate(&self) -> Result<()> {
        self.metric.validate()?;
        if !self.threshold.is_finite() {
            return Err(Error::config(format!(
                "constraint `{}`: threshold must be finite",
                self.id
            )));
        }
        if !(self.alpha > 0.0 && self.alpha <= 0.5) {
            return Err(Error::config(format!(
                "constraint `{}`: alpha must lie in (0, 0.5]",
                self.id
            )));
        }
        Ok(())
    }

    /// Nonnegative when the inequality holds for `value`.
    pub fn margin(&self, value: f64) -> f64 {
        match self.comparator {
            Comparator::AtMost => self.threshold - value,
            Comparator::AtLeast => value - self.threshold,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NtcpForm {
    /// `Φ((gEUD − TD50) / (m · TD50))`.
    #[default]
    Probit,
    /// `1 / (1 + (TD50 / gEUD)^{4γ₅₀})` with `γ₅₀ = 1 / (m √(2π))`, the
    /// slope of the probit form at TD50.
    LogLogistic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UtilityConfig {
    /// NTCP weight λ.
    pub lambda: f64,
    /// Uncertainty-penalty weight γ (per Gy).
    pub gamma: f64,
    /// Radiosensitivity α (1/Gy) of the Poisson TCP.
    pub alpha_rad: f64,
    /// Initial clonogen number N₀.
    pub n0: f64,
    pub td50: f64,
    pub m: f64,
    /// Volume exponent of the generalized EUD.
    pub n: f64,
    #[serde(default)]
    pub ntcp_form: NtcpForm,
}

impl Default for UtilityConfig {
    fn default() -> Self {
        UtilityConfig {
            lambda: 1.0,
            gamma: 0.01,
            alpha_rad: 0.3,
            n0: 1e6,
            td50: 50.0,
            m: 0.18,
            n: 0.25,
            ntcp_form: NtcpForm::Probit,
        }
    }
}

impl UtilityConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda >= 0.0
            && self.gamma >= 0.0
            && self.alpha_rad >= 0.0
            && self.n0 >= 1.0
            && self.td50 > 0.0
            && self.m > 0.0
            && self.n > 0.0
            && self.n <= 1.0
            && [
                self.lambda,
                self.gamma,
                self.alpha_rad,
                self.n0,
                self.td50,
                self.m,
                self.n,
            ]
            .iter()
            .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::config(
                "utility requires lambda, gamma, alpha_rad >= 0, N0 >= 1, TD50 > 0, m > 0, n in (0, 1]",
            ))
        }
    }
}

fn standard_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn roi_values<T: Scalar>(dose: &ScalarGrid<T>, roi: &MaskGrid, what: &str) -> Result<Vec<f64>> {
    dose.shape().ensure_same(roi.shape(), what)?;
    roi.ensure_nonempty(what)?;
    Ok(roi.indices().map(|i| dose[i].as_f64()).collect())
}

/// Poisson TCP `exp(−N₀ · mean_target exp(−α d))`.
pub fn tcp<T: Scalar>(dose: &ScalarGrid<T>, target: &MaskGrid, cfg: &UtilityConfig) -> Result<T> {
    let d = roi_values(dose, target, "TCP target")?;
    let survival = d.iter().map(|&v| (-cfg.alpha_rad * v).exp()).sum::<f64>() / d.len() as f64;
    Ok(T::of((-cfg.n0 * survival).exp()))
}

/// Generalized EUD `(mean d^{1/n})^n`.
pub fn geud<T: Scalar>(dose: &ScalarGrid<T>, oar: &MaskGrid, n: f64) -> Result<T> {
    let d = roi_values(dose, oar, "gEUD ROI")?;
    let a = 1.0 / n;
    let mean = d.iter().map(|&v| v.powf(a)).sum::<f64>() / d.len() as f64;
    Ok(T::of(mean.powf(n)))
}

/// LKB NTCP of the gEUD in the configured form.
pub fn ntcp<T: Scalar>(dose: &ScalarGrid<T>, oar: &MaskGrid, cfg: &UtilityConfig) -> Result<T> {
    let g = geud(dose, oar, cfg.n)?.as_f64();
    let p = match cfg.ntcp_form {
        NtcpForm::Probit => standard_normal_cdf((g - cfg.td50) / (cfg.m * cfg.td50)),
        NtcpForm::LogLogistic => {
            let gamma50 = 1.0 / (cfg.m * (2.0 * std::f64::consts::PI).sqrt());
            1.0 / (1.0 + (cfg.td50 / g).powf(4.0 * gamma50))
        }
    };
    Ok(T::of(p))
}

/// Largest NTCP over the record's OARs; 0 without OARs.
pub fn max_ntcp<T: Scalar>(dose: &ScalarGrid<T>, record: &PatientRecord<T>, cfg: &UtilityConfig) -> Result<T> {
    let mut worst = T::zero();
    for (_, roi) in record.oars() {
        if !roi.mask.is_empty() {
            worst = worst.max(ntcp(dose, &roi.mask, cfg)?);
        }
    }
    Ok(worst)
}

/// `TCP − λ · max NTCP − γ · U`.
pub fn utility<T: Scalar>(
    dose: &ScalarGrid<T>,
    record: &PatientRecord<T>,
    u_penalty: T,
    cfg: &UtilityConfig,
) -> Result<T> {
    let t = tcp(dose, &record.target_union()?, cfg)?;
    let n = max_ntcp(dose, record, cfg)?;
    Ok(t - T::of(cfg.lambda) * n - T::of(cfg.gamma) * u_penalty)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConstraintSatisfaction {
    pub constraint: String,
    /// Fraction of members satisfying the inequality.
    pub fraction: f64,
    pub required: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ActionEvaluation {
    pub id: String,
    pub mean_utility: f64,
    pub mean_tcp: f64,
    pub mean_ntcp: f64,
    pub u_penalty: f64,
    pub satisfaction: Vec<ConstraintSatisfaction>,
    pub feasible: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecisionResult {
    pub chosen: String,
    /// Per-action audit, ordered by action id.
    pub actions: Vec<ActionEvaluation>,
    pub k: usize,
    pub seeds: Vec<u64>,
}

impl DecisionResult {
    pub fn chosen_evaluation(&self) -> &ActionEvaluation {
        self.actions
            .iter()
            .find(|a| a.id == self.chosen)
            .expect("chosen action is evaluated")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

struct MemberEval {
    utility: f64,
    tcp: f64,
    ntcp: f64,
    satisfied: Vec<bool>,
}

/// Per-member satisfaction flags of every constraint.
pub fn constraint_flags<T: Scalar>(
    dose: &ScalarGrid<T>,
    record: &PatientRecord<T>,
    constraints: &[ConstraintSpec],
) -> Result<Vec<bool>> {
    let cc = record.shape().voxel_volume_cc();
    constraints
        .iter()
        .map(|c| {
            let roi = &record.roi(&c.metric.roi)?.mask;
            let value = dvh_metric(dose, roi, &c.metric, cc)?.as_f64();
            Ok(c.margin(value) >= 0.0)
        })
        .collect()
}

/// Index of the feasible evaluation with the largest mean utility, ties going
/// to the earliest entry. Errors with every action's worst constraint margin
/// when nothing is feasible.
pub fn choose_action(actions: &[ActionEvaluation]) -> Result<usize> {
    let mut chosen: Option<usize> = None;
    for (i, a) in actions.iter().enumerate().filter(|(_, a)| a.feasible) {
        if chosen.is_none_or(|c| a.mean_utility > actions[c].mean_utility) {
            chosen = Some(i);
        }
    }
    chosen.ok_or_else(|| {
        let margins = actions
            .iter()
            .map(|a| {
                let worst = a
                    .satisfaction
                    .iter()
                    .min_by(|x, y| (x.fraction - x.required).total_cmp(&(y.fraction - y.required)))
                    .expect("infeasible actions have constraints");
                (a.id.clone(), worst.constraint.clone(), worst.fraction - worst.required)
            })
            .collect();
        Error::Infeasible(margins)
    })
}

/// Sample approximation of the chance-constrained decision.
///
/// Each action is feasible when every constraint holds in at least a
/// `1 − α_j` fraction of its ensemble members. Among feasible actions the
/// largest mean utility wins, ties going to the smallest id.
pub fn select_action<T: Scalar>(
    ensembles: &BTreeMap<String, DoseEnsemble<T>>,
    record: &PatientRecord<T>,
    constraints: &[ConstraintSpec],
    cfg: &UtilityConfig,
    aggregation: UncertaintyAggregation,
) -> Result<DecisionResult> {
    cfg.validate()?;
    for c in constraints {
        c.validate()?;
    }
    let first = ensembles
        .values()
        .next()
        .ok_or_else(|| Error::config("no candidate actions"))?;
    let k = first.len();
    for (id, e) in ensembles {
        if e.len() != k {
            return Err(Error::Dimension(format!(
                "action `{id}` has {} members, expected {k}",
                e.len()
            )));
        }
        record
            .shape()
            .ensure_same(e.members()[0].shape(), &format!("action `{id}` ensemble"))?;
    }
    if k < 20 {
        warn!("decision ensemble K = {k} is below the recommended 20");
    }
    if let Some(min_alpha) = constraints.iter().map(|c| c.alpha).reduce(f64::min) {
        if (k as f64) * min_alpha < 5.0 {
            warn!(
                "K·min(alpha) = {:.2} < 5: empirical constraint estimates are coarse",
                k as f64 * min_alpha
            );
        }
    }

    let mut actions = Vec::with_capacity(ensembles.len());
    for (id, ensemble) in ensembles {
        let u = if k >= 2 {
            uncertainty_penalty(&ensemble_stats(ensemble)?, record, aggregation)?
        } else {
            T::zero()
        };
        let members: Vec<MemberEval> = ensemble
            .members()
            .par_iter()
            .map(|dose| {
                let t = tcp(dose, &record.target_union()?, cfg)?.as_f64();
                let n = max_ntcp(dose, record, cfg)?.as_f64();
                Ok(MemberEval {
                    utility: t - cfg.lambda * n - cfg.gamma * u.as_f64(),
                    tcp: t,
                    ntcp: n,
                    satisfied: constraint_flags(dose, record, constraints)?,
                })
            })
            .collect::<Result<_>>()?;
        let mean = |f: fn(&MemberEval) -> f64| ordered_sum(members.iter().map(f)) / k as f64;
        let satisfaction: Vec<ConstraintSatisfaction> = constraints
            .iter()
            .enumerate()
            .map(|(j, c)| ConstraintSatisfaction {
                constraint: c.id.clone(),
                fraction: members.iter().filter(|m| m.satisfied[j]).count() as f64 / k as f64,
                required: 1.0 - c.alpha,
            })
            .collect();
        let feasible = satisfaction.iter().all(|s| s.fraction >= s.required - 1e-12);
        actions.push(ActionEvaluation {
            id: id.clone(),
            mean_utility: mean(|m| m.utility),
            mean_tcp: mean(|m| m.tcp),
            mean_ntcp: mean(|m| m.ntcp),
            u_penalty: u.as_f64(),
            satisfaction,
            feasible,
        });
    }

    let chosen = &actions[choose_action(&actions)?];
    Ok(DecisionResult {
        chosen: chosen.id.clone(),
        k,
        seeds: first.seeds().to_vec(),
        actions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GridShape, Roi, RoiRole};

    fn line(n: usize) -> GridShape {
        GridShape::new(n, 1, 1, [1.0; 3]).unwrap()
    }

    fn cfg() -> UtilityConfig {
        UtilityConfig::default()
    }

    #[test]
    fn action_examples() {
        let s = line(4);
        let dose = ScalarGrid::filled(s, 60.0f64);
        assert_eq!(apply_action(&dose, &ActionSpec::identity(), &[]).unwrap(), dose);
        let ones = ActionSpec {
            id: "m".into(),
            kind: ActionKind::SpatialMask(ScalarGrid::filled(s, 1.0)),
        };
        assert_eq!(apply_action(&dose, &ones, &[]).unwrap(), dose);
        let out: ScalarGrid<f64> = apply_action(&dose, &ActionSpec::scale("s", 0.9), &[]).unwrap();
        assert!(out.values().iter().all(|&v| (v - 54.0).abs() < 1e-12));
        let lib = ActionSpec {
            id: "p".into(),
            kind: ActionKind::PlanSelect(1),
        };
        assert!(apply_action(&dose, &lib, std::slice::from_ref(&dose)).is_err());
        assert!(ActionSpec::scale("s", 1.5)
            .validate(&ActionBounds::default(), 0)
            .is_err());
    }

    #[test]
    fn tcp_examples() {
        let s = line(3);
        let target = MaskGrid::full(s);
        let mut c = cfg();
        c.alpha_rad = 0.0;
        c.n0 = 3.0;
        assert_eq!(tcp(&ScalarGrid::filled(s, 60.0), &target, &c).unwrap(), (-3.0f64).exp());
        let c = cfg();
        let expected = (-1e6 * (-18.0f64).exp()).exp();
        let got: f64 = tcp(&ScalarGrid::filled(s, 60.0), &target, &c).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!(tcp(&ScalarGrid::filled(s, 500.0), &target, &c).unwrap() > 1.0 - 1e-12);
    }

    #[test]
    fn ntcp_examples() {
        let s = line(3);
        let oar = MaskGrid::full(s);
        let c = cfg();
        let mid: f64 = ntcp(&ScalarGrid::filled(s, c.td50), &oar, &c).unwrap();
        assert!((mid - 0.5).abs() < 1e-15);
        let zero: f64 = ntcp(&ScalarGrid::filled(s, 0.0), &oar, &c).unwrap();
        assert!((zero - standard_normal_cdf(-1.0 / c.m)).abs() < 1e-15);
        let g: f64 = geud(&ScalarGrid::filled(s, 37.0), &oar, 0.1).unwrap();
        assert!((g - 37.0).abs() < 1e-9);
    }

    #[test]
    fn log_logistic_matches_probit_midpoint_and_slope() {
        let s = line(2);
        let oar = MaskGrid::full(s);
        let probit = cfg();
        let logistic = UtilityConfig {
            ntcp_form: NtcpForm::LogLogistic,
            ..cfg()
        };
        let at = |c: &UtilityConfig, d: f64| -> f64 { ntcp(&ScalarGrid::filled(s, d), &oar, c).unwrap() };
        assert!((at(&logistic, 50.0) - 0.5).abs() < 1e-15);
        let h = 1e-4;
        let slope = |c: &UtilityConfig| (at(c, 50.0 + h) - at(c, 50.0 - h)) / (2.0 * h);
        assert!((slope(&probit) - slope(&logistic)).abs() < 1e-8);
        assert_eq!(at(&logistic, 0.0), 0.0);
    }

    #[test]
    fn normal_cdf_reference_values() {
        assert!((standard_normal_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-10);
        assert!((standard_normal_cdf(-2.0) - 0.022_750_131_948_179_2).abs() < 1e-10);
    }

    #[test]
    fn utility_is_linear_in_penalty() {
        let s = line(4);
        let mut rois = BTreeMap::new();
        rois.insert(
            "T".into(),
            Roi {
                role: RoiRole::Target,
                mask: MaskGrid::from_fn(s, |i| i < 2),
            },
        );
        rois.insert(
            "O".into(),
            Roi {
                role: RoiRole::Oar,
                mask: MaskGrid::from_fn(s, |i| i >= 2),
            },
        );
        let record = PatientRecord::new("p", ScalarGrid::zeros(s), rois, MaskGrid::full(s), None, 60.0).unwrap();
        let dose = ScalarGrid::new(s, vec![60.0, 60.0, 30.0, 20.0]).unwrap();
        let mut c = cfg();
        c.gamma = 1.0;
        let a: f64 = utility(&dose, &record, 0.2, &c).unwrap();
        let b: f64 = utility(&dose, &record, 0.3, &c).unwrap();
        assert!((a - b - 0.1).abs() < 1e-12);
        c.lambda = 0.0;
        c.gamma = 0.0;
        let t: f64 = tcp(&dose, &record.target_union().unwrap(), &c).unwrap();
        assert_eq!(utility(&dose, &record, 5.0, &c).unwrap(), t);
    }
}
