//! Monte Carlo rejection rates for the three-region simulation scenarios.
//!
//! Each scenario fixes the curves of subgroups 2..k and lists parameter rows
//! for subgroup 1. For every row `nsim` data sets are drawn, the configured
//! test is run on each, and the share of rejections is reported together
//! with the true distance of the row.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{test_summaries, TestConfig};
use crate::design::{simulate_summaries, StudyDesign};
use crate::distance::{self, DistanceTarget};
use crate::error::{Error, Result};
use crate::model::{DoseResponseModel, EmaxParams, ModelSpec};
use crate::rng;

/// Patients per subgroup and per dose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// 150 per subgroup, equal counts per dose.
    BalancedEqual,
    /// 150 per subgroup, (35, 20, 20, 20, 20, 35) per dose.
    BalancedUnequal,
    /// 66 / 192 / 192, equal counts per dose.
    UnbalancedEqual,
    /// 66 / 192 / 192 with (15, 9, 9, 9, 9, 15) and (46, 25, 25, 25, 25, 46).
    UnbalancedUnequal,
}

impl Layout {
    pub fn allocations(&self, k: usize) -> Vec<Vec<usize>> {
        match self {
            Layout::BalancedEqual => vec![vec![25; 6]; k],
            Layout::BalancedUnequal => vec![vec![35, 20, 20, 20, 20, 35]; k],
            Layout::UnbalancedEqual => (0..k)
                .map(|l| vec![if l == 0 { 11 } else { 32 }; 6])
                .collect(),
            Layout::UnbalancedUnequal => (0..k)
                .map(|l| {
                    if l == 0 {
                        vec![15, 9, 9, 9, 9, 15]
                    } else {
                        vec![46, 25, 25, 25, 25, 46]
                    }
                })
                .collect(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layout::BalancedEqual => "balanced_equal",
            Layout::BalancedUnequal => "balanced_unequal",
            Layout::UnbalancedEqual => "unbalanced_equal",
            Layout::UnbalancedUnequal => "unbalanced_unequal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    /// Subgroup 1 against the population.
    One,
    /// All subgroups against the population.
    Many,
}

fn default_layout() -> Layout {
    Layout::BalancedEqual
}

fn default_test() -> TestKind {
    TestKind::One
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub doses: Vec<f64>,
    pub weights: Vec<f64>,
    /// Error standard deviation, common to all subgroups.
    pub sigma: f64,
    /// True curves of subgroups 2..k.
    pub reference: Vec<EmaxParams>,
    /// Subgroup-1 curves, one per table row.
    pub rows: Vec<EmaxParams>,
    /// Rows on the boundary of the null hypothesis.
    #[serde(default)]
    pub boundary_rows: Vec<usize>,
    #[serde(default = "default_layout")]
    pub layout: Layout,
    /// Fit with the Hill coefficient fixed at its true value.
    #[serde(default)]
    pub fixed_hill: bool,
    #[serde(default = "default_test")]
    pub test: TestKind,
    /// Published rounded distances for `test = one`.
    #[serde(default)]
    pub printed_d_inf: Option<Vec<f64>>,
    /// Published rounded distances for `test = many`.
    #[serde(default)]
    pub printed_d_inf_inf: Option<Vec<f64>>,
}

const DOSES: [f64; 6] = [0.0, 10.0, 25.0, 50.0, 100.0, 150.0];
const WEIGHTS: [f64; 3] = [0.1, 0.3, 0.6];

fn p(e0: f64, emax: f64, ed50: f64, h: f64) -> EmaxParams {
    EmaxParams { e0, emax, ed50, h }
}

impl Scenario {
    /// Built-in scenarios "A", "B" and "C".
    pub fn builtin(name: &str) -> Result<Scenario> {
        let (reference, rows, boundary_rows, one, many) = match name {
            "A" => (
                vec![p(0.0, 0.46, 26.0, 1.0), p(0.0, 0.46, 25.5, 1.0)],
                [
                    (25.0, 0.47),
                    (15.0, 0.44),
                    (10.0, 0.42),
                    (8.0, 0.42),
                    (7.0, 0.42),
                    (6.0, 0.42),
                    (4.0, 0.41),
                    (2.0, 0.40),
                ]
                .iter()
                .map(|&(ed50, em)| p(0.0, em, ed50, 1.0))
                .collect::<Vec<_>>(),
                vec![4],
                vec![0.00, 0.04, 0.07, 0.09, 0.10, 0.11, 0.14, 0.19],
                vec![0.00, 0.04, 0.07, 0.09, 0.10, 0.12, 0.15, 0.19],
            ),
            "B" => {
                let d = vec![0.10, 0.06, 0.03, 0.00, 0.04, 0.08, 0.10, 0.12, 0.13, 0.14];
                (
                    vec![p(0.0, 0.46, 26.0, 1.0), p(0.0, 0.46, 25.5, 1.0)],
                    [
                        (0.3, 0.47),
                        (0.5, 0.47),
                        (0.75, 0.47),
                        (1.0, 0.47),
                        (1.5, 0.43),
                        (2.5, 0.41),
                        (3.5, 0.40),
                        (4.5, 0.40),
                        (5.5, 0.40),
                        (6.5, 0.40),
                    ]
                    .iter()
                    .map(|&(h, em)| p(0.0, em, 25.0, h))
                    .collect(),
                    vec![0, 6],
                    d.clone(),
                    d,
                )
            }
            "C" => {
                let d = vec![0.03, 0.04, 0.06, 0.10, 0.13, 0.16, 0.20];
                (
                    vec![p(0.0, 0.46, 27.0, 2.5), p(0.0, 0.46, 26.5, 2.5)],
                    [
                        (2.0, 25.0, 0.47),
                        (2.25, 23.0, 0.47),
                        (2.5, 21.0, 0.46),
                        (2.75, 18.5, 0.46),
                        (3.0, 17.0, 0.46),
                        (3.25, 15.0, 0.46),
                        (3.5, 13.0, 0.46),
                    ]
                    .iter()
                    .map(|&(h, ed50, em)| p(0.0, em, ed50, h))
                    .collect(),
                    vec![3],
                    d.clone(),
                    d,
                )
            }
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown scenario {other:?}"
                )))
            }
        };
        Ok(Scenario {
            name: name.to_string(),
            doses: DOSES.to_vec(),
            weights: WEIGHTS.to_vec(),
            sigma: 0.1,
            reference,
            rows,
            boundary_rows,
            layout: Layout::BalancedEqual,
            fixed_hill: false,
            test: TestKind::One,
            printed_d_inf: Some(one),
            printed_d_inf_inf: Some(many),
        })
    }

    pub fn with_layout(mut self, layout: Layout) -> Self {
        self.layout = layout;
        self
    }

    pub fn with_fixed_hill(mut self, fixed: bool) -> Self {
        self.fixed_hill = fixed;
        self
    }

    pub fn with_test(mut self, test: TestKind) -> Self {
        self.test = test;
        self
    }

    pub fn k(&self) -> usize {
        self.reference.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        self.design()?;
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma must be > 0, got {}",
                self.sigma
            )));
        }
        if self.rows.is_empty() {
            return Err(Error::InvalidArgument("scenario has no rows".into()));
        }
        if let Some(&bad) = self.boundary_rows.iter().find(|&&r| r >= self.rows.len()) {
            return Err(Error::InvalidArgument(format!(
                "boundary row {bad} out of range"
            )));
        }
        for printed in [&self.printed_d_inf, &self.printed_d_inf_inf]
            .into_iter()
            .flatten()
        {
            if printed.len() != self.rows.len() {
                return Err(Error::InvalidArgument(
                    "printed distances must match the rows".into(),
                ));
            }
        }
        for r in 0..self.rows.len() {
            self.true_models(r)?;
        }
        Ok(())
    }

    pub fn design(&self) -> Result<StudyDesign> {
        if self.doses.len() != 6 {
            return Err(Error::InvalidArgument(
                "scenario layouts assume six doses".into(),
            ));
        }
        if self.weights.len() != self.k() {
            return Err(Error::InvalidArgument(format!(
                "{} weights for {} subgroups",
                self.weights.len(),
                self.k()
            )));
        }
        StudyDesign::new(
            self.doses.clone(),
            self.layout.allocations(self.k()),
            self.weights.clone(),
        )
    }

    fn max_dose(&self) -> f64 {
        self.doses.last().copied().unwrap_or(0.0)
    }

    pub fn true_models(&self, row: usize) -> Result<Vec<DoseResponseModel>> {
        std::iter::once(&self.rows[row])
            .chain(&self.reference)
            .map(|&params| DoseResponseModel::emax(params, self.fixed_hill, self.max_dose()))
            .collect()
    }

    /// Families fitted in row `row`; fixed Hill coefficients take the true
    /// values of that row.
    pub fn specs(&self, row: usize) -> Result<Vec<ModelSpec>> {
        Ok(self.true_models(row)?.iter().map(|m| m.spec).collect())
    }

    pub fn target(&self) -> DistanceTarget {
        match self.test {
            TestKind::One => DistanceTarget::One(0),
            TestKind::Many => DistanceTarget::Many((0..self.k()).collect()),
        }
    }

    pub fn printed(&self) -> Option<&[f64]> {
        match self.test {
            TestKind::One => self.printed_d_inf.as_deref(),
            TestKind::Many => self.printed_d_inf_inf.as_deref(),
        }
    }

    pub fn true_distance(&self, row: usize) -> Result<f64> {
        let models = self.true_models(row)?;
        let range = (self.doses[0], self.max_dose());
        Ok(distance::statistic(&models, &self.weights, &self.target(), range)?.value)
    }

    /// Computed against published distances, row by row.
    pub fn distance_check(&self, tolerance: f64) -> Result<Vec<DistanceCheck>> {
        let printed = self.printed().ok_or_else(|| {
            Error::InvalidArgument(format!("scenario {} has no printed distances", self.name))
        })?;
        (0..self.rows.len())
            .map(|r| {
                let computed = self.true_distance(r)?;
                Ok(DistanceCheck {
                    row: r,
                    computed,
                    printed: printed[r],
                    within: (computed - printed[r]).abs() <= tolerance,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceCheck {
    pub row: usize,
    pub computed: f64,
    pub printed: f64,
    pub within: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimOptions {
    pub nsim: usize,
    #[serde(rename = "B")]
    pub b: usize,
    pub alpha: f64,
    pub delta: f64,
    pub seed: u64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            nsim: 500,
            b: 300,
            alpha: 0.1,
            delta: 0.1,
            seed: 20240,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub row: usize,
    pub params: EmaxParams,
    pub true_distance: f64,
    pub printed_distance: Option<f64>,
    pub rejection_rate: f64,
    pub mc_se: f64,
    pub nsim: usize,
    #[serde(rename = "B")]
    pub b: usize,
    /// Data sets whose test could not be completed.
    pub failures: usize,
    pub runtime_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub scenario: String,
    pub layout: Layout,
    pub fixed_hill: bool,
    pub test: TestKind,
    pub options: SimOptions,
    pub rows: Vec<SimRow>,
    /// Rejection rates ordered alternative >= boundary >= interior null,
    /// within two Monte Carlo standard errors.
    pub monotone: Option<bool>,
}

/// Simulate one row of `scenario`.
pub fn run_row(scenario: &Scenario, row: usize, opts: &SimOptions) -> Result<SimRow> {
    if opts.nsim == 0 || opts.b == 0 {
        return Err(Error::InvalidArgument(
            "nsim and B must be at least 1".into(),
        ));
    }
    if row >= scenario.rows.len() {
        return Err(Error::InvalidArgument(format!("row {row} out of range")));
    }
    let started = Instant::now();
    let design = scenario.design()?;
    let models = scenario.true_models(row)?;
    let specs = scenario.specs(row)?;
    let sigma2 = vec![scenario.sigma * scenario.sigma; scenario.k()];
    let target = scenario.target();
    let outcomes: Vec<Option<bool>> = (0..opts.nsim)
        .into_par_iter()
        .map(|s| {
            let data_seed = rng::derive_seed(opts.seed, &[row as u64, s as u64, 0]);
            let mut r = rng::stream(data_seed, 0);
            let summaries = simulate_summaries(&design, &models, &sigma2, &mut r);
            let config = TestConfig {
                delta: opts.delta,
                alpha: opts.alpha,
                b: opts.b,
                seed: rng::derive_seed(opts.seed, &[row as u64, s as u64, 1]),
                target: target.clone(),
            };
            test_summaries(&design, &summaries, &specs, &config)
                .ok()
                .map(|t| t.reject)
        })
        .collect();
    let failures = outcomes.iter().filter(|o| o.is_none()).count();
    if failures as f64 > crate::bootstrap::MAX_FAILURE_RATE * opts.nsim as f64 {
        return Err(Error::BootstrapFailure {
            failures,
            total: opts.nsim,
        });
    }
    let done = (opts.nsim - failures) as f64;
    let rate = outcomes.iter().filter(|o| **o == Some(true)).count() as f64 / done;
    Ok(SimRow {
        row,
        params: scenario.rows[row],
        true_distance: scenario.true_distance(row)?,
        printed_distance: scenario.printed().map(|p| p[row]),
        rejection_rate: rate,
        mc_se: (rate * (1.0 - rate) / done).sqrt(),
        nsim: opts.nsim,
        b: opts.b,
        failures,
        runtime_s: started.elapsed().as_secs_f64(),
    })
}

/// Simulate the selected rows (all rows when `rows` is `None`).
pub fn run_scenario(
    scenario: &Scenario,
    opts: &SimOptions,
    rows: Option<&[usize]>,
) -> Result<SimResult> {
    scenario.validate()?;
    let all: Vec<usize> = (0..scenario.rows.len()).collect();
    let selected = rows.unwrap_or(&all);
    let rows = selected
        .iter()
        .map(|&r| run_row(scenario, r, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(SimResult {
        monotone: monotonicity(scenario, &rows),
        scenario: scenario.name.clone(),
        layout: scenario.layout,
        fixed_hill: scenario.fixed_hill,
        test: scenario.test,
        options: *opts,
        rows,
    })
}

/// Compare the row closest to equal curves, the boundary rows and the rows
/// deeper in the null. `None` when a class is missing from `rows`.
pub fn monotonicity(scenario: &Scenario, rows: &[SimRow]) -> Option<bool> {
    let boundary: Vec<&SimRow> = rows
        .iter()
        .filter(|r| scenario.boundary_rows.contains(&r.row))
        .collect();
    let level = boundary
        .iter()
        .map(|r| r.true_distance)
        .fold(f64::INFINITY, f64::min);
    let closest = rows
        .iter()
        .filter(|r| !scenario.boundary_rows.contains(&r.row))
        .min_by(|a, b| a.true_distance.total_cmp(&b.true_distance))?;
    let interior: Vec<&SimRow> = rows
        .iter()
        .filter(|r| !scenario.boundary_rows.contains(&r.row) && r.true_distance > level)
        .collect();
    if boundary.is_empty() || interior.is_empty() || closest.true_distance >= level {
        return None;
    }
    let slack = |a: &SimRow, b: &SimRow| 2.0 * (a.mc_se.powi(2) + b.mc_se.powi(2)).sqrt() + 1e-12;
    let ok_upper = boundary
        .iter()
        .all(|b| closest.rejection_rate + slack(closest, b) >= b.rejection_rate);
    let ok_lower = boundary.iter().all(|b| {
        interior
            .iter()
            .all(|i| b.rejection_rate + slack(b, i) >= i.rejection_rate)
    });
    Some(ok_upper && ok_lower)
}

pub const CSV_HEADER: &str =
    "scenario,layout,test,fixed_hill,row,e0,emax,ed50,h,true_distance,printed_distance,rejection_rate,mc_se,nsim,B,failures,runtime_s";

/// CSV rendering; the header is always present.
pub fn emit_csv(results: &[SimResult]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for res in results {
        for r in &res.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{:.6},{},{:.4},{:.4},{},{},{},{:.3}",
                res.scenario,
                res.layout.name(),
                match res.test {
                    TestKind::One => "one",
                    TestKind::Many => "many",
                },
                res.fixed_hill,
                r.row + 1,
                r.params.e0,
                r.params.emax,
                r.params.ed50,
                r.params.h,
                r.true_distance,
                r.printed_distance
                    .map(|v| format!("{v:.2}"))
                    .unwrap_or_default(),
                r.rejection_rate,
                r.mc_se,
                r.nsim,
                r.b,
                r.failures,
                r.runtime_s
            );
        }
    }
    out
}

/// Aligned text rendering in table row order.
pub fn emit_text(results: &[SimResult]) -> String {
    let mut out = String::new();
    for res in results {
        let _ = writeln!(
            out,
            "Scenario {} ({}, {}{}), nsim = {}, B = {}, alpha = {}, delta = {}",
            res.scenario,
            res.layout.name(),
            match res.test {
                TestKind::One => "d_inf",
                TestKind::Many => "d_inf_inf",
            },
            if res.fixed_hill { ", fixed Hill" } else { "" },
            res.options.nsim,
            res.options.b,
            res.options.alpha,
            res.options.delta
        );
        let _ = writeln!(
            out,
            "{:>4} {:>6} {:>7} {:>6} {:>9} {:>8} {:>9} {:>7}",
            "row", "emax", "ed50", "h", "distance", "printed", "rejection", "se"
        );
        for r in &res.rows {
            let _ = writeln!(
                out,
                "{:>4} {:>6.2} {:>7.2} {:>6.2} {:>9.4} {:>8} {:>9.3} {:>7.3}",
                r.row + 1,
                r.params.emax,
                r.params.ed50,
                r.params.h,
                r.true_distance,
                r.printed_distance
                    .map(|v| format!("{v:.2}"))
                    .unwrap_or_default(),
                r.rejection_rate,
                r.mc_se
            );
        }
        if let Some(m) = res.monotone {
            let _ = writeln!(out, "monotone: {m}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_validate_and_match_allocations() {
        for name in ["A", "B", "C"] {
            let s = Scenario::builtin(name).unwrap();
            s.validate().unwrap();
            for layout in [
                Layout::BalancedEqual,
                Layout::BalancedUnequal,
                Layout::UnbalancedEqual,
                Layout::UnbalancedUnequal,
            ] {
                let d = s.clone().with_layout(layout).design().unwrap();
                let sizes: Vec<usize> = (0..3).map(|l| d.group_size(l)).collect();
                match layout {
                    Layout::BalancedEqual | Layout::BalancedUnequal => {
                        assert_eq!(sizes, vec![150; 3])
                    }
                    _ => assert_eq!(sizes, vec![66, 192, 192]),
                }
            }
        }
        assert!(Scenario::builtin("D").is_err());
        assert_eq!(
            Scenario::builtin("A")
                .unwrap()
                .design()
                .unwrap()
                .total_size(),
            450
        );
    }

    #[test]
    fn scenario_json_round_trip() {
        let s = Scenario::builtin("C").unwrap().with_test(TestKind::Many);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<Scenario>(&json).unwrap(), s);
        let bad = json.replacen("\"sigma\"", "\"sigma_typo\"", 1);
        assert!(serde_json::from_str::<Scenario>(&bad).is_err());
    }

    #[test]
    fn fixed_hill_uses_row_hill() {
        let s = Scenario::builtin("B").unwrap().with_fixed_hill(true);
        let specs = s.specs(0).unwrap();
        assert_eq!(
            specs[0].family,
            crate::model::ModelFamily::EmaxFixedHill { hill: 0.3 }
        );
        assert_eq!(specs[1].n_params(), 3);
    }

    #[test]
    fn many_distance_is_at_least_one() {
        let a = Scenario::builtin("A").unwrap();
        let m = a.clone().with_test(TestKind::Many);
        for r in 0..a.rows.len() {
            assert!(m.true_distance(r).unwrap() >= a.true_distance(r).unwrap());
        }
    }

    #[test]
    fn csv_header_only_and_one_row() {
        assert_eq!(emit_csv(&[]), format!("{CSV_HEADER}\n"));
        let s = Scenario::builtin("A").unwrap().with_fixed_hill(true);
        let opts = SimOptions {
            nsim: 4,
            b: 10,
            ..SimOptions::default()
        };
        let res = run_scenario(&s, &opts, Some(&[0])).unwrap();
        let csv = emit_csv(std::slice::from_ref(&res));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        let fields: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(fields.len(), CSV_HEADER.split(',').count());
        assert!(fields.iter().all(|f| !f.is_empty()));
        assert!(emit_text(&[res]).contains("Scenario A"));
    }

    #[test]
    fn rows_are_reproducible() {
        let s = Scenario::builtin("A").unwrap().with_fixed_hill(true);
        let opts = SimOptions {
            nsim: 6,
            b: 20,
            ..SimOptions::default()
        };
        let a = crate::parallel::with_workers(Some(1), || run_row(&s, 4, &opts).unwrap());
        let b = crate::parallel::with_workers(Some(3), || run_row(&s, 4, &opts).unwrap());
        assert_eq!(a.rejection_rate, b.rejection_rate);
        assert!((0.0..=1.0).contains(&a.rejection_rate));
        assert_eq!(
            a.mc_se,
            (a.rejection_rate * (1.0 - a.rejection_rate) / 6.0).sqrt()
        );
    }
}
