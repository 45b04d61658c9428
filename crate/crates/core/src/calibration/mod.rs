//! Belief maintenance: particle filtering, MAP calibration, and decoder-only
//! recalibration of the surrogate to fraction-level summaries.

mod filter;
mod linalg;
mod map;
mod model;
mod proxy;

pub use filter::{filter_update, BeliefState, Particle};
pub use linalg::{Cholesky, Matrix};
pub use map::{map_update, MapConfig, MapResult};
pub use model::{
    read_observations, write_observations, DoseScalingModel, FractionObservation, LinearModel, StateSpaceModel,
    StateSpaceSpec,
};
pub use proxy::{proxy_recalibrate, RecalibrationConfig, RecalibrationOutcome};
