//! Constrained parametric bootstrap tests.
//!
//! The null hypothesis is a large deviation, `d >= delta`. Bootstrap data are
//! drawn from the fit projected onto the boundary `d = delta` (or the
//! unconstrained fit when it already lies in the null), refitted, and the
//! observed statistic is compared with the lower `alpha`-quantile of the
//! refitted statistics.
//!
//! Quantile convention: with sorted replicate values `v_(1) <= ... <= v_(B)`
//! the `alpha`-quantile is `v_(m)` with `m = ceil(alpha * B)`. The p-value is
//! `#{b : v_b <= d} / B`. Then `d < v_(m)` holds exactly when fewer than `m`
//! replicates are `<= d`, i.e. when `p < alpha`, so the decision and the
//! p-value always agree.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{simulate_summaries, Dataset, GroupSummary, StudyDesign};
use crate::distance::{self, DistanceOptions, DistanceTarget, PopulationCurve};
use crate::error::{Error, Result};
use crate::estimate::{
    constrain, fit_mle_summaries, fit_summaries, ConstrainedFitResult, ConstraintOptions, FitResult,
};
use crate::model::{DoseResponseModel, ModelSpec};
use crate::optim::LmOptions;
use crate::rng;

/// Share of failed bootstrap refits above which a test is aborted.
pub const MAX_FAILURE_RATE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestConfig {
    pub delta: f64,
    pub alpha: f64,
    /// Number of bootstrap replicates.
    #[serde(rename = "B")]
    pub b: usize,
    pub seed: u64,
    pub target: DistanceTarget,
}

impl TestConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "delta must be > 0, got {}",
                self.delta
            )));
        }
        check_alpha(self.alpha)?;
        if self.b == 0 {
            return Err(Error::InvalidArgument("B must be at least 1".into()));
        }
        self.target.validate(k)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    Ok(())
}

/// Rank `ceil(alpha * B)` (1-based), guarded against representation error in
/// the product.
pub fn quantile_rank(alpha: f64, b: usize) -> usize {
    ((alpha * b as f64 - 1e-9).ceil() as usize).clamp(1, b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapDistribution {
    /// Replicate statistics in replicate order.
    pub values: Vec<f64>,
    pub quantile_alpha: f64,
    /// Replicates whose refit did not converge; their best candidate is kept.
    pub failures: usize,
}

impl BootstrapDistribution {
    fn new(values: Vec<f64>, alpha: f64, failures: usize) -> Self {
        let mut d = BootstrapDistribution {
            values,
            quantile_alpha: f64::NAN,
            failures,
        };
        d.quantile_alpha = d.quantile(alpha);
        d
    }

    pub fn sorted(&self) -> Vec<f64> {
        let mut v = self.values.clone();
        v.sort_by(f64::total_cmp);
        v
    }

    /// Lower order statistic at rank `ceil(alpha * B)`.
    pub fn quantile(&self, alpha: f64) -> f64 {
        let sorted = self.sorted();
        sorted[quantile_rank(alpha, sorted.len()) - 1]
    }

    /// Share of replicates at or below `statistic`.
    pub fn p_value(&self, statistic: f64) -> f64 {
        self.values.iter().filter(|&&v| v <= statistic).count() as f64 / self.values.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub config: TestConfig,
    pub statistic: f64,
    pub distribution: BootstrapDistribution,
    pub p_value: f64,
    pub reject: bool,
    pub fit: FitResult,
    pub constrained: ConstrainedFitResult,
}

impl TestResult {
    /// Decision at another level from the same replicates.
    pub fn reject_at(&self, alpha: f64) -> bool {
        self.statistic < self.distribution.quantile(alpha)
    }
}

/// Bootstrap replicates from `models` with variances `sigma2`.
pub(crate) fn replicate_statistics(
    design: &StudyDesign,
    specs: &[ModelSpec],
    models: &[DoseResponseModel],
    sigma2: &[f64],
    target: &DistanceTarget,
    b: usize,
    seed: u64,
) -> Result<(Vec<f64>, usize)> {
    let opts = LmOptions::default();
    let range = design.dose_range();
    let dopts = DistanceOptions::default();
    let out: Vec<Result<(f64, bool)>> = (0..b)
        .into_par_iter()
        .map(|rep| {
            let mut r = rng::stream(seed, rep as u64);
            let summaries = simulate_summaries(design, models, sigma2, &mut r);
            let (fit, _) = fit_summaries(design, &summaries, specs, Some(models), &opts)?;
            let curve = PopulationCurve::new_unchecked(&fit.models, design.weights());
            let d = distance::max_deviation(&curve, target.subgroups(), range, &dopts).value;
            Ok((d, fit.all_converged()))
        })
        .collect();
    let mut values = Vec::with_capacity(b);
    let mut failures = 0;
    for o in out {
        let (v, ok) = o?;
        values.push(v);
        failures += usize::from(!ok);
    }
    if failures as f64 > MAX_FAILURE_RATE * b as f64 {
        return Err(Error::BootstrapFailure { failures, total: b });
    }
    Ok((values, failures))
}

fn assemble(
    config: &TestConfig,
    fit: FitResult,
    constrained: ConstrainedFitResult,
    values: Vec<f64>,
    failures: usize,
) -> TestResult {
    let statistic = constrained.statistic;
    let distribution = BootstrapDistribution::new(values, config.alpha, failures);
    TestResult {
        config: config.clone(),
        p_value: distribution.p_value(statistic),
        reject: statistic < distribution.quantile_alpha,
        statistic,
        distribution,
        fit,
        constrained,
    }
}

/// The test from sufficient statistics and an existing fit.
pub fn test_with_fit(
    design: &StudyDesign,
    summaries: &[GroupSummary],
    specs: &[ModelSpec],
    fit: &FitResult,
    config: &TestConfig,
) -> Result<TestResult> {
    config.validate(design.k())?;
    let constrained = constrain(
        design,
        summaries,
        specs,
        fit,
        &config.target,
        config.delta,
        &ConstraintOptions::default(),
    )?;
    let (values, failures) = replicate_statistics(
        design,
        specs,
        &constrained.beta_hathat,
        &fit.sigma2,
        &config.target,
        config.b,
        config.seed,
    )?;
    Ok(assemble(config, fit.clone(), constrained, values, failures))
}

/// The test from validated sufficient statistics.
pub fn test_summaries(
    design: &StudyDesign,
    summaries: &[GroupSummary],
    specs: &[ModelSpec],
    config: &TestConfig,
) -> Result<TestResult> {
    config.validate(design.k())?;
    let fit = fit_mle_summaries(design, summaries, specs)?;
    test_with_fit(design, summaries, specs, &fit, config)
}

/// Test of `d_inf >= delta` for one subgroup.
pub fn test_one(
    dataset: &Dataset,
    design: &StudyDesign,
    specs: &[ModelSpec],
    config: &TestConfig,
) -> Result<TestResult> {
    if !matches!(config.target, DistanceTarget::One(_)) {
        return Err(Error::InvalidArgument(
            "test_one needs a single-subgroup target".into(),
        ));
    }
    dataset.validate(design)?;
    test_summaries(design, &dataset.summarize(design), specs, config)
}

/// Test of `d_inf_inf >= delta` over a set of subgroups.
pub fn test_many(
    dataset: &Dataset,
    design: &StudyDesign,
    specs: &[ModelSpec],
    config: &TestConfig,
) -> Result<TestResult> {
    if !matches!(config.target, DistanceTarget::Many(_)) {
        return Err(Error::InvalidArgument(
            "test_many needs a subgroup-set target".into(),
        ));
    }
    dataset.validate(design)?;
    test_summaries(design, &dataset.summarize(design), specs, config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntersectionUnionResult {
    pub subgroups: Vec<usize>,
    pub tests: Vec<TestResult>,
    /// Largest individual p-value.
    pub p_value: f64,
    /// All individual tests reject.
    pub reject: bool,
}

/// Intersection-union test: one single-subgroup test per member of the
/// target set, each at level `alpha` with the configured seed.
pub fn test_many_iu(
    dataset: &Dataset,
    design: &StudyDesign,
    specs: &[ModelSpec],
    config: &TestConfig,
) -> Result<IntersectionUnionResult> {
    config.validate(design.k())?;
    dataset.validate(design)?;
    let summaries = dataset.summarize(design);
    let fit = fit_mle_summaries(design, &summaries, specs)?;
    let subgroups = config.target.subgroups().to_vec();
    let mut tests = Vec::with_capacity(subgroups.len());
    for &i in &subgroups {
        let cfg = TestConfig {
            target: DistanceTarget::One(i),
            ..config.clone()
        };
        tests.push(test_with_fit(design, &summaries, specs, &fit, &cfg)?);
    }
    Ok(IntersectionUnionResult {
        p_value: tests.iter().map(|t| t.p_value).fold(0.0, f64::max),
        reject: tests.iter().all(|t| t.reject),
        subgroups,
        tests,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub delta: f64,
    pub quantile: f64,
    pub p_value: f64,
    pub reject: bool,
    /// The constraint was applied (statistic below delta).
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub statistic: f64,
    pub alpha: f64,
    pub points: Vec<CalibrationPoint>,
    /// Smallest grid threshold at which the test rejects.
    pub delta_hat: Option<f64>,
}

/// Smallest threshold on `grid` at which the test rejects, with common
/// random numbers across thresholds.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_delta(
    dataset: &Dataset,
    design: &StudyDesign,
    specs: &[ModelSpec],
    target: &DistanceTarget,
    alpha: f64,
    b: usize,
    seed: u64,
    grid: &[f64],
) -> Result<Calibration> {
    check_alpha(alpha)?;
    if grid.is_empty() || grid.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
        return Err(Error::InvalidArgument(
            "delta grid must be non-empty and positive".into(),
        ));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(
            "delta grid must be strictly increasing".into(),
        ));
    }
    dataset.validate(design)?;
    let summaries = dataset.summarize(design);
    let fit = fit_mle_summaries(design, &summaries, specs)?;
    calibrate_with_fit(
        design, &summaries, specs, &fit, target, alpha, b, seed, grid,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn calibrate_with_fit(
    design: &StudyDesign,
    summaries: &[GroupSummary],
    specs: &[ModelSpec],
    fit: &FitResult,
    target: &DistanceTarget,
    alpha: f64,
    b: usize,
    seed: u64,
    grid: &[f64],
) -> Result<Calibration> {
    let mut points = Vec::with_capacity(grid.len());
    // every threshold at or below the statistic bootstraps from the
    // unconstrained fit, so that distribution is computed once
    let mut inactive: Option<BootstrapDistribution> = None;
    let mut statistic = f64::NAN;
    for &delta in grid {
        let config = TestConfig {
            delta,
            alpha,
            b,
            seed,
            target: target.clone(),
        };
        config.validate(design.k())?;
        let constrained = constrain(
            design,
            summaries,
            specs,
            fit,
            target,
            delta,
            &ConstraintOptions::default(),
        )?;
        statistic = constrained.statistic;
        let dist = match (&inactive, constrained.active) {
            (Some(d), false) => d.clone(),
            _ => {
                let (values, failures) = replicate_statistics(
                    design,
                    specs,
                    &constrained.beta_hathat,
                    &fit.sigma2,
                    target,
                    b,
                    seed,
                )?;
                let d = BootstrapDistribution::new(values, alpha, failures);
                if !constrained.active {
                    inactive = Some(d.clone());
                }
                d
            }
        };
        points.push(CalibrationPoint {
            delta,
            quantile: dist.quantile_alpha,
            p_value: dist.p_value(statistic),
            reject: statistic < dist.quantile_alpha,
            active: constrained.active,
        });
    }
    Ok(Calibration {
        statistic,
        alpha,
        delta_hat: points.iter().find(|p| p.reject).map(|p| p.delta),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{generate, GroupVariances};
    use crate::model::EmaxParams;
    use crate::parallel::with_workers;
    use proptest::prelude::*;

    fn design() -> StudyDesign {
        StudyDesign::equal_allocation(
            vec![0.0, 10.0, 25.0, 50.0, 100.0, 150.0],
            &[25, 25, 25],
            vec![0.1, 0.3, 0.6],
        )
        .unwrap()
    }

    fn specs() -> Vec<ModelSpec> {
        vec![ModelSpec::emax_fixed_hill(1.0, 150.0); 3]
    }

    fn data(ed50: f64, em: f64, seed: u64) -> Dataset {
        let m = |e: f64, ed: f64| {
            DoseResponseModel::emax(EmaxParams::new(0.0, e, ed, 1.0).unwrap(), true, 150.0).unwrap()
        };
        let truth = [m(em, ed50), m(0.46, 26.0), m(0.46, 25.5)];
        generate(
            &design(),
            &truth,
            &GroupVariances::new(vec![0.01; 3]).unwrap(),
            seed,
        )
        .unwrap()
    }

    fn config(target: DistanceTarget, b: usize) -> TestConfig {
        TestConfig {
            delta: 0.1,
            alpha: 0.1,
            b,
            seed: 42,
            target,
        }
    }

    #[test]
    fn quantile_is_lower_order_statistic() {
        let d = BootstrapDistribution::new((1..=10).rev().map(f64::from).collect(), 0.1, 0);
        assert_eq!(d.quantile_alpha, 1.0);
        assert_eq!(d.quantile(0.25), 3.0);
        assert_eq!(d.quantile(0.3), 3.0);
        assert_eq!(d.quantile(0.99), 10.0);
        assert_eq!(quantile_rank(0.1, 300), 30);
        assert_eq!(quantile_rank(0.05, 1000), 50);
        assert_eq!(d.p_value(3.0), 0.3);
    }

    proptest! {
        #[test]
        fn decision_matches_p_value(
            values in prop::collection::vec(0.0..1.0f64, 1..60),
            stat in 0.0..1.0f64,
            alpha in 0.01..0.99f64,
            tie in any::<bool>(),
        ) {
            let mut values = values;
            let stat = if tie { values[0] } else { stat };
            values.push(stat * 0.5);
            let d = BootstrapDistribution::new(values, alpha, 0);
            let reject = stat < d.quantile_alpha;
            let count = d.values.iter().filter(|&&v| v <= stat).count();
            prop_assert_eq!(reject, count < quantile_rank(alpha, d.values.len()));
            prop_assert_eq!(reject, d.p_value(stat) < alpha);
        }
    }

    #[test]
    fn single_replicate_gives_zero_or_one() {
        let r = test_one(
            &data(7.0, 0.42, 1),
            &design(),
            &specs(),
            &config(DistanceTarget::One(0), 1),
        )
        .unwrap();
        assert!(r.p_value == 0.0 || r.p_value == 1.0);
        assert_eq!(r.reject, r.p_value < 0.1);
    }

    #[test]
    fn single_member_set_reduces_to_one_subgroup() {
        let ds = data(7.0, 0.42, 2);
        let one = test_one(
            &ds,
            &design(),
            &specs(),
            &config(DistanceTarget::One(0), 40),
        )
        .unwrap();
        let many = test_many(
            &ds,
            &design(),
            &specs(),
            &config(DistanceTarget::Many(vec![0]), 40),
        )
        .unwrap();
        assert_eq!(one.distribution, many.distribution);
        assert_eq!(one.statistic, many.statistic);
        assert_eq!(one.reject, many.reject);
        let iu = test_many_iu(
            &ds,
            &design(),
            &specs(),
            &config(DistanceTarget::Many(vec![0]), 40),
        )
        .unwrap();
        assert_eq!(iu.reject, one.reject);
        assert_eq!(iu.p_value, one.p_value);
    }

    #[test]
    fn results_do_not_depend_on_worker_count() {
        let ds = data(10.0, 0.42, 3);
        let cfg = config(DistanceTarget::Many(vec![0, 1, 2]), 64);
        let a = with_workers(Some(1), || {
            test_many(&ds, &design(), &specs(), &cfg).unwrap()
        });
        let b = with_workers(Some(4), || {
            test_many(&ds, &design(), &specs(), &cfg).unwrap()
        });
        assert_eq!(a, b);
        assert!(a
            .distribution
            .values
            .iter()
            .zip(&b.distribution.values)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn many_statistic_is_max_of_single_statistics() {
        let ds = data(6.0, 0.42, 4);
        let iu = test_many_iu(
            &ds,
            &design(),
            &specs(),
            &config(DistanceTarget::Many(vec![0, 1, 2]), 20),
        )
        .unwrap();
        let many = test_many(
            &ds,
            &design(),
            &specs(),
            &config(DistanceTarget::Many(vec![0, 1, 2]), 20),
        )
        .unwrap();
        let max = iu.tests.iter().map(|t| t.statistic).fold(0.0, f64::max);
        assert_eq!(many.statistic, max);
        assert_eq!(iu.reject, iu.tests.iter().all(|t| t.reject));
        if iu.reject {
            assert!(iu.tests.iter().all(|t| t.reject));
        }
    }

    #[test]
    fn mismatched_targets_are_rejected() {
        let ds = data(7.0, 0.42, 1);
        assert!(test_one(
            &ds,
            &design(),
            &specs(),
            &config(DistanceTarget::Many(vec![0]), 2)
        )
        .is_err());
        assert!(test_many(&ds, &design(), &specs(), &config(DistanceTarget::One(0), 2)).is_err());
        let mut bad = config(DistanceTarget::One(0), 2);
        bad.alpha = 1.0;
        assert!(test_one(&ds, &design(), &specs(), &bad).is_err());
    }

    #[test]
    fn calibration_is_monotone_and_reuses_inactive_draws() {
        let ds = data(25.0, 0.47, 5);
        let grid = [0.005, 0.01, 0.05, 0.1, 0.2, 0.4, 10.0];
        let cal = calibrate_delta(
            &ds,
            &design(),
            &specs(),
            &DistanceTarget::One(0),
            0.1,
            100,
            7,
            &grid,
        )
        .unwrap();
        for w in cal.points.windows(2) {
            assert!(w[0].quantile <= w[1].quantile, "{cal:?}");
            assert!(!w[0].reject || w[1].reject);
        }
        let last = cal.points.last().unwrap();
        assert!(last.reject && last.p_value == 0.0);
        assert_eq!(
            cal.delta_hat,
            cal.points.iter().find(|p| p.reject).map(|p| p.delta)
        );
        let inactive: Vec<_> = cal.points.iter().filter(|p| !p.active).collect();
        assert!(inactive.windows(2).all(|w| w[0].quantile == w[1].quantile));
    }
}
