//! Equivalence testing of dose-response curves across subgroups.
//!
//! Subgroup curves are compared with the population curve through the
//! maximum absolute deviation over the dose range. The crate fits E-max
//! models per subgroup, computes the distance statistic, and tests the
//! hypothesis of a large deviation with a constrained parametric bootstrap.
//! Asymptotic limits and a Monte Carlo harness support the simulation study.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod asymptotics;
pub mod bootstrap;
pub mod design;
pub mod distance;
pub mod error;
pub mod estimate;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod rng;
pub mod simharness;

pub use asymptotics::{AsymptoticModel, LimitSample};
pub use bootstrap::{
    calibrate_delta, test_many, test_many_iu, test_one, BootstrapDistribution, Calibration,
    IntersectionUnionResult, TestConfig, TestResult,
};
pub use design::{
    generate, load_csv, load_csv_counted, Dataset, GroupSummary, GroupVariances, Record,
    StudyDesign,
};
pub use distance::{
    d_inf, d_inf_inf, statistic, ArgmaxPoint, DistanceResult, DistanceTarget, PopulationCurve,
};
pub use error::{Error, Result};
pub use estimate::{fit_constrained, fit_mle, ConstrainedFitResult, FitResult};
pub use model::{DoseResponseModel, EmaxParams, ModelFamily, ModelSpec, ParamBounds};
pub use parallel::with_workers;
pub use simharness::{Layout, Scenario, SimOptions, SimResult, SimRow, TestKind};
