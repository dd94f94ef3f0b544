//! Design-based estimation for two-stage randomized experiments in which
//! households are randomized first and one member of each treated household
//! is then treated.
//!
//! The crate covers point estimators for household- and individual-weighted
//! primary, spillover and overall effects, their randomization variances and
//! conservative variance estimates, the equivalent least-squares analyses,
//! exhaustive enumeration oracles, and the Monte Carlo studies used to check
//! interval coverage.

pub mod error;
pub mod estimate;
pub mod model;
pub mod oracle;
pub mod randomize;
pub mod regress;
pub mod simulate;
pub mod variance;

pub use error::{Error, Result};
pub use model::{
    observe, true_estimand, Assignment, Cell, EffectEstimate, EffectKind, EstimatorFamily,
    ExperimentDesign, Household, ObservedData, PotentialOutcomeTable, PotentialOutcomes,
    WeightScheme,
};
