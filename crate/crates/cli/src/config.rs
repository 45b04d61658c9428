//! The TOML engine configuration. Every section is optional and defaults to
//! the desk-scale scenario; unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;

use dosetwin_core::calibration::RecalibrationConfig;
use dosetwin_core::decision::{ActionBounds, ActionKind, ActionSpec, ConstraintSpec, UtilityConfig};
use dosetwin_core::grid::{load_grid, GridShape, LoadOptions};
use dosetwin_core::phantom::{PhantomSpec, ShiftEvent};
use dosetwin_core::surrogate::{FeatureConfig, ParamVector, TrainConfig};
use dosetwin_core::twin::{phantom_features, RecalibrationTrigger, ScenarioSpec, SurrogateFit};
use dosetwin_core::uq::{DvhMetricSpec, UncertaintyAggregation};

/// A configuration or argument that fails validation (exit status 2).
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn check(r: dosetwin_core::Result<()>) -> Result<()> {
    r.map_err(|e| invalid(e.to_string()))
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub seed: u64,
    pub phantom: PhantomSection,
    /// Surrogate feature channels; defaults to the compact phantom layout.
    pub features: Option<FeatureConfig>,
    pub training: TrainingSection,
    pub calibration: CalibrationSection,
    pub decision: DecisionSection,
    pub scenario: ScenarioSection,
    pub io: IoSection,
}

/// The desk phantom layout, rescaled to `grid_size * voxel_mm`.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSection {
    pub id: String,
    pub grid_size: usize,
    pub voxel_mm: f64,
    pub prescription: f64,
    pub kernel_width_mm: f64,
    pub feasible_margin_mm: f64,
    pub ct_noise_hu: f64,
    /// Phantoms generated by `phantom` and used to fit the twin's surrogate.
    pub cohort_size: usize,
    pub jitter_mm: f64,
}

impl Default for PhantomSection {
    fn default() -> Self {
        let d = PhantomSpec::<f64>::desk_default("desk", 0);
        PhantomSection {
            id: d.id,
            grid_size: 16,
            voxel_mm: 3.0,
            prescription: d.prescription,
            kernel_width_mm: d.kernel_width_mm,
            feasible_margin_mm: d.feasible_margin_mm,
            ct_noise_hu: d.ct_noise_hu,
            cohort_size: 10,
            jitter_mm: 3.0,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub dropout: f64,
    pub init_scale: f64,
    pub freeze_encoder: bool,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Full batch when absent.
    pub batch_size: Option<usize>,
    pub tolerance: f64,
    pub step_decay: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let fit = SurrogateFit::<f64>::default();
        TrainingSection {
            dropout: fit.dropout,
            init_scale: fit.init_scale,
            freeze_encoder: fit.freeze_encoder,
            learning_rate: fit.training.learning_rate,
            iterations: fit.training.iterations,
            batch_size: None,
            tolerance: fit.training.tolerance,
            step_decay: fit.training.step_decay,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSection {
    pub recalibrate_every: usize,
    pub trigger: bool,
    pub trigger_ratio: f64,
    pub trigger_window: usize,
    pub ridge: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub obs_noise_gy: f64,
    pub filter_particles: usize,
    pub filter_process_var: f64,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        let t = RecalibrationTrigger::default();
        let r = RecalibrationConfig::<f64>::default();
        CalibrationSection {
            recalibrate_every: 5,
            trigger: true,
            trigger_ratio: t.ratio,
            trigger_window: t.window,
            ridge: r.ridge,
            max_iterations: r.max_iterations,
            tolerance: r.tolerance,
            obs_noise_gy: 0.5,
            filter_particles: 256,
            filter_process_var: 1e-4,
        }
    }
}

/// One candidate action; exactly one of `scale`, `plan` or `mask` is set.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionEntry {
    pub id: String,
    pub scale: Option<f64>,
    /// Sparse dose CSV added to the plan library.
    pub plan: Option<PathBuf>,
    /// Sparse CSV of voxelwise dose factors; absent voxels get factor 0.
    pub mask: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecisionSection {
    pub k: usize,
    pub aggregation: UncertaintyAggregation,
    pub utility: UtilityConfig,
    pub bounds: ActionBounds,
    /// Defaults to the desk scenario's actions when absent.
    pub actions: Option<Vec<ActionEntry>>,
    /// Defaults to the desk scenario's constraints when absent.
    pub constraints: Option<Vec<ConstraintSpec>>,
    /// Metrics for the DVH score; empty means the benchmark defaults.
    pub dvh_specs: Vec<DvhMetricSpec>,
}

impl Default for DecisionSection {
    fn default() -> Self {
        DecisionSection {
            k: 30,
            aggregation: UncertaintyAggregation::default(),
            utility: UtilityConfig::default(),
            bounds: ActionBounds::default(),
            actions: None,
            constraints: None,
            dvh_specs: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    pub n_fractions: usize,
    /// Defaults to the desk scenario's shift when absent.
    pub shifts: Option<Vec<ShiftEvent>>,
    pub dvh_levels: usize,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        ScenarioSection {
            n_fractions: 30,
            shifts: None,
            dvh_levels: 50,
        }
    }
}

/// Default paths; command-line flags take precedence.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub cohort_dir: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub patients: Option<PathBuf>,
    pub pred_dir: Option<PathBuf>,
    pub ref_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub target_names: Option<Vec<String>>,
    pub oar_names: Option<Vec<String>>,
    /// Voxel counts of patient directories; defaults to the phantom grid.
    pub grid: Option<[usize; 3]>,
}

impl EngineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(EngineConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: EngineConfig = toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Range checks of every section, without touching the filesystem.
    pub fn validate(&self) -> Result<()> {
        let phantom = self.phantom_spec();
        check(phantom.validate())?;
        if self.phantom.cohort_size == 0 {
            return Err(invalid("phantom.cohort_size must be >= 1"));
        }
        if !(self.phantom.jitter_mm >= 0.0) {
            return Err(invalid("phantom.jitter_mm must be >= 0"));
        }
        check(self.features(&phantom).validate())?;
        let fit = self.surrogate_fit();
        check(fit.training.validate())?;
        if !(fit.dropout >= 0.0 && fit.dropout < 1.0) {
            return Err(invalid(format!("training.dropout {} outside [0, 1)", fit.dropout)));
        }
        if !(fit.init_scale > 0.0 && fit.init_scale.is_finite()) {
            return Err(invalid("training.init_scale must be > 0"));
        }
        let c = &self.calibration;
        check(self.recalibration().validate())?;
        if c.recalibrate_every == 0 {
            return Err(invalid("calibration.recalibrate_every must be >= 1"));
        }
        if c.trigger && !(c.trigger_ratio > 1.0 && c.trigger_window >= 1) {
            return Err(invalid(
                "calibration trigger needs trigger_ratio > 1 and trigger_window >= 1",
            ));
        }
        if !(c.obs_noise_gy > 0.0 && c.obs_noise_gy.is_finite()) {
            return Err(invalid("calibration.obs_noise_gy must be > 0"));
        }
        if c.filter_particles == 0 || !(c.filter_process_var > 0.0) {
            return Err(invalid(
                "calibration needs filter_particles >= 1 and filter_process_var > 0",
            ));
        }
        let d = &self.decision;
        if d.k < 2 {
            return Err(invalid("decision.k must be >= 2"));
        }
        check(d.utility.validate())?;
        if !(d.bounds.scale_min > 0.0 && d.bounds.scale_min <= d.bounds.scale_max && d.bounds.modulation_max > 0.0) {
            return Err(invalid(
                "decision.bounds need 0 < scale_min <= scale_max and modulation_max > 0",
            ));
        }
        for c in self.constraints() {
            check(c.validate())?;
        }
        for s in &d.dvh_specs {
            check(s.validate())?;
        }
        if let Some(actions) = &d.actions {
            if actions.is_empty() {
                return Err(invalid("decision.actions must not be empty"));
            }
            let mut ids = std::collections::BTreeSet::new();
            for a in actions {
                if !ids.insert(&a.id) {
                    return Err(invalid(format!("duplicate action id `{}`", a.id)));
                }
                let set = [a.scale.is_some(), a.plan.is_some(), a.mask.is_some()];
                if set.iter().filter(|&&b| b).count() != 1 {
                    return Err(invalid(format!(
                        "action `{}` needs exactly one of scale, plan, mask",
                        a.id
                    )));
                }
                if let Some(s) = a.scale {
                    check(ActionSpec::scale(a.id.clone(), s).validate(&d.bounds, 0))?;
                }
            }
        }
        let s = &self.scenario;
        if s.n_fractions == 0 {
            return Err(invalid("scenario.n_fractions must be >= 1"));
        }
        if s.dvh_levels < 2 {
            return Err(invalid("scenario.dvh_levels must be >= 2"));
        }
        for e in self.shifts() {
            if e.fraction_index == 0 || e.fraction_index > s.n_fractions {
                return Err(invalid(format!(
                    "shift at fraction {} lies outside [1, {}]",
                    e.fraction_index, s.n_fractions
                )));
            }
        }
        if let Some(g) = self.io.grid {
            check(GridShape::new(g[0], g[1], g[2], [1.0; 3]).map(|_| ()))?;
        }
        Ok(())
    }

    pub fn phantom_spec(&self) -> PhantomSpec<f64> {
        let p = &self.phantom;
        let mut spec = PhantomSpec::desk_default(p.id.clone(), self.seed);
        let factor = (p.grid_size as f64 * p.voxel_mm) / (spec.shape.nx as f64 * spec.shape.voxel_dims[0]);
        spec.shape = GridShape {
            nx: p.grid_size,
            ny: p.grid_size,
            nz: p.grid_size,
            voxel_dims: [p.voxel_mm; 3],
        };
        let scale = |s: &mut dosetwin_core::phantom::Sphere| {
            s.center = s.center.map(|c| c * factor);
            s.radius *= factor;
        };
        scale(&mut spec.target);
        spec.oars.iter_mut().for_each(|o| scale(&mut o.sphere));
        spec.prescription = p.prescription;
        spec.kernel_width_mm = p.kernel_width_mm;
        spec.feasible_margin_mm = p.feasible_margin_mm;
        spec.ct_noise_hu = p.ct_noise_hu;
        spec
    }

    pub fn features(&self, phantom: &PhantomSpec<f64>) -> FeatureConfig {
        self.features.clone().unwrap_or_else(|| phantom_features(phantom))
    }

    pub fn train_config(&self) -> TrainConfig<f64> {
        let t = &self.training;
        TrainConfig {
            learning_rate: t.learning_rate,
            iterations: t.iterations,
            batch_size: t.batch_size.unwrap_or(usize::MAX),
            seed: self.seed,
            tolerance: t.tolerance,
            step_decay: t.step_decay,
        }
    }

    pub fn surrogate_fit(&self) -> SurrogateFit<f64> {
        SurrogateFit {
            cohort_size: self.phantom.cohort_size,
            jitter_mm: self.phantom.jitter_mm,
            dropout: self.training.dropout,
            init_scale: self.training.init_scale,
            freeze_encoder: self.training.freeze_encoder,
            training: self.train_config(),
        }
    }

    pub fn recalibration(&self) -> RecalibrationConfig<f64> {
        RecalibrationConfig {
            ridge: self.calibration.ridge,
            max_iterations: self.calibration.max_iterations,
            tolerance: self.calibration.tolerance,
        }
    }

    fn desk(&self) -> ScenarioSpec<f64> {
        ScenarioSpec::desk_default(
            ParamVector::linear(vec![0.0], 0.0).expect("valid placeholder"),
            self.seed,
        )
    }

    pub fn constraints(&self) -> Vec<ConstraintSpec> {
        self.decision
            .constraints
            .clone()
            .unwrap_or_else(|| self.desk().constraints)
    }

    pub fn shifts(&self) -> Vec<ShiftEvent> {
        self.scenario.shifts.clone().unwrap_or_else(|| self.desk().shift_events)
    }

    pub fn grid_shape(&self) -> GridShape {
        let mut shape = self.phantom_spec().shape;
        if let Some([nx, ny, nz]) = self.io.grid {
            (shape.nx, shape.ny, shape.nz) = (nx, ny, nz);
        }
        shape
    }

    pub fn load_options(&self) -> LoadOptions<f64> {
        let phantom = self.phantom_spec();
        let targets = self
            .io
            .target_names
            .clone()
            .unwrap_or_else(|| vec![phantom.target_name.clone()]);
        let oars = self
            .io
            .oar_names
            .clone()
            .unwrap_or_else(|| phantom.oars.iter().map(|o| o.name.clone()).collect());
        LoadOptions::new(targets, self.phantom.prescription).with_oars(oars)
    }

    /// The scenario for `simulate`, with the twin's initial surrogate.
    pub fn scenario(&self, params: ParamVector<f64>) -> Result<ScenarioSpec<f64>> {
        let phantom = self.phantom_spec();
        let mut spec = ScenarioSpec::new(phantom.clone(), params, self.scenario.n_fractions, self.seed);
        spec.features = self.features(&phantom);
        spec.shift_events = self.shifts();
        spec.constraints = self.constraints();
        spec.utility = self.decision.utility.clone();
        spec.aggregation = self.decision.aggregation;
        spec.k = self.decision.k;
        spec.dvh_levels = self.scenario.dvh_levels;
        let c = &self.calibration;
        spec.recalibrate_every = c.recalibrate_every;
        spec.trigger = c.trigger.then_some(RecalibrationTrigger {
            ratio: c.trigger_ratio,
            window: c.trigger_window,
        });
        spec.recalibration = self.recalibration();
        spec.obs_noise_gy = c.obs_noise_gy;
        spec.filter_particles = c.filter_particles;
        spec.filter_process_var = c.filter_process_var;
        match &self.decision.actions {
            None => spec.actions = self.desk().actions,
            Some(entries) => {
                spec.actions = Vec::with_capacity(entries.len());
                for a in entries {
                    let kind = if let Some(s) = a.scale {
                        ActionKind::Scale(s)
                    } else if let Some(path) = &a.plan {
                        spec.plan_library.push(load_grid(path, phantom.shape)?);
                        ActionKind::PlanSelect(spec.plan_library.len() - 1)
                    } else {
                        let path = a.mask.as_ref().expect("validated action payload");
                        ActionKind::SpatialMask(load_grid(path, phantom.shape)?)
                    };
                    let action = ActionSpec { id: a.id.clone(), kind };
                    check(action.validate(&self.decision.bounds, spec.plan_library.len()))?;
                    spec.actions.push(action);
                }
            }
        }
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_desk_scenario() {
        let cfg: EngineConfig = toml::from_str("").unwrap();
        cfg.validate().unwrap();
        let phantom = cfg.phantom_spec();
        assert_eq!(phantom, PhantomSpec::desk_default("desk", 0));
        let params = ParamVector::linear(vec![0.0; cfg.features(&phantom).n_features()], 0.2).unwrap();
        let spec = cfg.scenario(params.clone()).unwrap();
        let desk = ScenarioSpec::desk_default(params, 0);
        assert_eq!(spec.constraints, desk.constraints);
        assert_eq!(spec.shift_events, desk.shift_events);
        assert_eq!(spec.actions, desk.actions);
        assert_eq!(spec.k, desk.k);
        assert_eq!(cfg.surrogate_fit(), SurrogateFit::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<EngineConfig>("sead = 3").is_err());
        assert!(toml::from_str::<EngineConfig>("[training]\niters = 3").is_err());
    }

    #[test]
    fn partial_tables_and_metric_forms_parse() {
        let text = r#"
[decision.utility]
gamma = 0.05

[[decision.constraints]]
id = "cord"
metric = { kind = "dose_at_cc", roi = "Cord", cc = 0.1 }
comparator = "<="
threshold = 64.0
alpha = 0.2

[[decision.dvh_specs]]
kind = "dose_at_volume"
roi = "PTV"
percent = 95.0
"#;
        let cfg: EngineConfig = toml::from_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.decision.utility.gamma, 0.05);
        assert_eq!(cfg.decision.utility.lambda, UtilityConfig::default().lambda);
        assert_eq!(cfg.constraints()[0].metric, DvhMetricSpec::d_cc("Cord", 0.1));
        assert_eq!(cfg.decision.dvh_specs, vec![DvhMetricSpec::d_x("PTV", 95.0)]);
        let stray = text.replace("cc = 0.1", "cc = 0.1, percent = 5.0");
        assert!(toml::from_str::<EngineConfig>(&stray).is_err());
    }

    #[test]
    fn range_violations_fail_validation() {
        for text in [
            "[training]\niterations = 0",
            "[training]\ndropout = 1.0",
            "[decision]\nk = 1",
            "[scenario]\nn_fractions = 5\nshifts = [{ fraction_index = 6, displacement = [0.0, 0.0, 3.0] }]",
            "[calibration]\nobs_noise_gy = 0.0",
            "[[decision.actions]]\nid = \"up\"\nscale = 1.5",
            "[[decision.actions]]\nid = \"both\"\nscale = 1.0\nplan = \"p.csv\"",
            "[phantom]\ngrid_size = 0",
        ] {
            let cfg: EngineConfig = toml::from_str(text).unwrap();
            let err = cfg.validate().unwrap_err();
            assert!(err.downcast_ref::<Invalid>().is_some(), "{text}: {err}");
        }
    }

    #[test]
    fn rescaled_phantom_keeps_the_layout() {
        let cfg: EngineConfig = toml::from_str("[phantom]\ngrid_size = 24\nvoxel_mm = 2.0").unwrap();
        cfg.validate().unwrap();
        let spec = cfg.phantom_spec();
        assert_eq!(spec.target.center, [21.0; 3]);
        assert_eq!(spec.shape.nx, 24);
    }
}
