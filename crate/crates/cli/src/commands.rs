use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use curvequiv::bootstrap::CalibrationPoint;
use curvequiv::simharness::{emit_csv, emit_text, run_scenario};
use curvequiv::{
    calibrate_delta, load_csv, load_csv_counted, test_many, test_many_iu, test_one, ArgmaxPoint,
    AsymptoticModel, Dataset, DistanceTarget, DoseResponseModel, FitResult, ModelFamily,
    PopulationCurve, StudyDesign, TestConfig, TestResult,
};

use crate::config::{RunConfig, TestMethod, SCHEMA_VERSION};
use crate::CliError;

const CURVE_POINTS: usize = 101;

pub struct Inputs<'a> {
    pub config: &'a RunConfig,
    pub data: Option<&'a Path>,
    pub out: Option<&'a Path>,
    pub seed: Option<u64>,
}

impl Inputs<'_> {
    fn dataset(&self) -> Result<(StudyDesign, Dataset), CliError> {
        let path = self
            .data
            .ok_or_else(|| CliError::Usage("this command needs --data".into()))?;
        let cfg = self.config.design_config()?;
        let loaded = if cfg.allocations.is_some() {
            let design = self.config.full_design()?;
            load_csv(path, &design).map(|data| (design, data))
        } else {
            load_csv_counted(path, cfg.doses.clone(), cfg.weights.clone())
        };
        let (design, data) = loaded.map_err(|e| CliError::data(path, e))?;
        let design = match (&cfg.labels, cfg.allocations.is_some()) {
            (Some(labels), false) => design
                .with_labels(labels.clone())
                .map_err(CliError::config)?,
            _ => design,
        };
        Ok((design, data))
    }

    fn seed(&self, configured: u64) -> u64 {
        self.seed.unwrap_or(configured)
    }
}

fn write_output(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| CliError::Other(format!("{}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

#[derive(Serialize)]
struct SubgroupFit {
    subgroup: usize,
    label: String,
    family: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    hill: Option<f64>,
    params: BTreeMap<&'static str, f64>,
    sigma2: f64,
    n: usize,
    converged: bool,
    iterations: usize,
}

#[derive(Serialize)]
struct Curves {
    dose: Vec<f64>,
    subgroups: Vec<Vec<f64>>,
    population: Vec<f64>,
}

#[derive(Serialize)]
struct FitSummary {
    weights: Vec<f64>,
    doses: Vec<f64>,
    subgroups: Vec<SubgroupFit>,
    loglik: f64,
}

#[derive(Serialize)]
struct FitOutput {
    schema_version: u32,
    command: &'static str,
    #[serde(flatten)]
    fit: FitSummary,
    curves: Curves,
}

fn summarize_fit(design: &StudyDesign, fit: &FitResult) -> FitSummary {
    let subgroups = fit
        .models
        .iter()
        .enumerate()
        .map(|(l, m)| {
            let family = m.spec.family;
            let values = [m.params.e0, m.params.emax, m.params.ed50, m.params.h];
            SubgroupFit {
                subgroup: l + 1,
                label: design.label(l),
                family: family.name(),
                hill: match family {
                    ModelFamily::EmaxFixedHill { hill } => Some(hill),
                    ModelFamily::EmaxFull => None,
                },
                params: family.param_names().iter().copied().zip(values).collect(),
                sigma2: fit.sigma2[l],
                n: design.group_size(l),
                converged: fit.converged[l],
                iterations: fit.iterations[l],
            }
        })
        .collect();
    FitSummary {
        weights: design.weights().to_vec(),
        doses: design.doses().to_vec(),
        subgroups,
        loglik: fit.loglik,
    }
}

fn curves(design: &StudyDesign, models: &[DoseResponseModel]) -> Result<Curves, CliError> {
    let (lo, hi) = design.dose_range();
    let dose: Vec<f64> = (0..CURVE_POINTS)
        .map(|i| lo + (hi - lo) * i as f64 / (CURVE_POINTS - 1) as f64)
        .collect();
    let population = PopulationCurve::new(models, design.weights()).map_err(CliError::from)?;
    Ok(Curves {
        subgroups: models
            .iter()
            .map(|m| dose.iter().map(|&d| m.value(d)).collect())
            .collect(),
        population: dose.iter().map(|&d| population.value(d)).collect(),
        dose,
    })
}

pub fn fit(inputs: &Inputs) -> Result<(), CliError> {
    let (design, data) = inputs.dataset()?;
    let specs = inputs.config.specs(design.k())?;
    let fit = curvequiv::fit_mle(&data, &design, &specs)?;
    let output = FitOutput {
        schema_version: SCHEMA_VERSION,
        command: "fit",
        fit: summarize_fit(&design, &fit),
        curves: curves(&design, &fit.models)?,
    };
    write_output(inputs.out, &to_json(&output)?)
}

#[derive(Serialize)]
struct QuantileRow {
    alpha: f64,
    quantile: f64,
    reject: bool,
}

#[derive(Serialize)]
struct ConstrainedSummary {
    active: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    constraint_residual: Option<f64>,
    params: Vec<Vec<f64>>,
    sigma2: Vec<f64>,
}

#[derive(Serialize)]
struct TestSummary {
    target: Vec<usize>,
    statistic: f64,
    argmax: Vec<ArgmaxOut>,
    p_value: f64,
    quantiles: Vec<QuantileRow>,
    failures: usize,
    constrained: ConstrainedSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    bootstrap_values: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct ArgmaxOut {
    subgroup: usize,
    dose: f64,
    sign: i8,
}

#[derive(Serialize)]
struct TestOutput {
    schema_version: u32,
    command: &'static str,
    method: &'static str,
    delta: f64,
    #[serde(rename = "B")]
    b: usize,
    seed: u64,
    fit: FitSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    result: Option<TestSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    components: Option<Vec<TestSummary>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    p_value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    decisions: Option<Vec<QuantileDecision>>,
}

#[derive(Serialize)]
struct QuantileDecision {
    alpha: f64,
    reject: bool,
}

fn summarize_test(
    design: &StudyDesign,
    models: &[DoseResponseModel],
    result: &TestResult,
    alphas: &[f64],
    include_values: bool,
) -> Result<TestSummary, CliError> {
    let stat = curvequiv::statistic(
        models,
        design.weights(),
        &result.config.target,
        design.dose_range(),
    )?;
    Ok(TestSummary {
        target: result
            .config
            .target
            .subgroups()
            .iter()
            .map(|l| l + 1)
            .collect(),
        statistic: result.statistic,
        argmax: stat.argmax_points.iter().map(argmax_out).collect(),
        p_value: result.p_value,
        quantiles: alphas
            .iter()
            .map(|&a| QuantileRow {
                alpha: a,
                quantile: result.distribution.quantile(a),
                reject: result.reject_at(a),
            })
            .collect(),
        failures: result.distribution.failures,
        constrained: ConstrainedSummary {
            active: result.constrained.active,
            constraint_residual: result.constrained.constraint_residual,
            params: result
                .constrained
                .beta_hathat
                .iter()
                .map(|m| m.free_params())
                .collect(),
            sigma2: result.constrained.sigma2_profiled.clone(),
        },
        bootstrap_values: include_values.then(|| result.distribution.sorted()),
    })
}

fn argmax_out(p: &ArgmaxPoint) -> ArgmaxOut {
    ArgmaxOut {
        subgroup: p.subgroup + 1,
        dose: p.dose,
        sign: p.sign,
    }
}

fn check_alphas(alphas: &[f64]) -> Result<(), CliError> {
    if alphas.is_empty() || alphas.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
        return Err(CliError::Config(
            "`alpha` must be a non-empty list of levels in (0, 1)".into(),
        ));
    }
    Ok(())
}

pub fn test(inputs: &Inputs) -> Result<(), CliError> {
    let section = inputs
        .config
        .test
        .as_ref()
        .ok_or_else(|| CliError::Config("missing `test` section".into()))?;
    check_alphas(&section.alpha)?;
    let (design, data) = inputs.dataset()?;
    let specs = inputs.config.specs(design.k())?;
    let target = section.target.resolve(design.k())?;
    let config = TestConfig {
        delta: section.delta,
        alpha: section.alpha[0],
        b: section.b,
        seed: inputs.seed(section.seed),
        target,
    };
    config.validate(design.k()).map_err(CliError::config)?;
    let mut output = TestOutput {
        schema_version: SCHEMA_VERSION,
        command: "test",
        method: match section.method {
            TestMethod::Max => "max",
            TestMethod::IntersectionUnion => "intersection_union",
        },
        delta: config.delta,
        b: config.b,
        seed: config.seed,
        fit: FitSummary {
            weights: Vec::new(),
            doses: Vec::new(),
            subgroups: Vec::new(),
            loglik: 0.0,
        },
        result: None,
        components: None,
        p_value: None,
        decisions: None,
    };
    match (section.method, &config.target) {
        (TestMethod::Max, target) => {
            let result = match target {
                DistanceTarget::One(_) => test_one(&data, &design, &specs, &config)?,
                DistanceTarget::Many(_) => test_many(&data, &design, &specs, &config)?,
            };
            output.fit = summarize_fit(&design, &result.fit);
            output.result = Some(summarize_test(
                &design,
                &result.fit.models,
                &result,
                &section.alpha,
                section.include_values,
            )?);
        }
        (TestMethod::IntersectionUnion, _) => {
            let iu = test_many_iu(&data, &design, &specs, &config)?;
            let fit = &iu.tests[0].fit;
            output.fit = summarize_fit(&design, fit);
            output.components = Some(
                iu.tests
                    .iter()
                    .map(|t| {
                        summarize_test(
                            &design,
                            &fit.models,
                            t,
                            &section.alpha,
                            section.include_values,
                        )
                    })
                    .collect::<Result<_, _>>()?,
            );
            output.p_value = Some(iu.p_value);
            output.decisions = Some(
                section
                    .alpha
                    .iter()
                    .map(|&a| QuantileDecision {
                        alpha: a,
                        reject: iu.tests.iter().all(|t| t.reject_at(a)),
                    })
                    .collect(),
            );
        }
    }
    write_output(inputs.out, &to_json(&output)?)
}

#[derive(Serialize)]
struct CalibrationSummary {
    schema_version: u32,
    command: &'static str,
    target: Vec<usize>,
    statistic: f64,
    alpha: f64,
    #[serde(rename = "B")]
    b: usize,
    seed: u64,
    delta_hat: Option<f64>,
}

fn calibration_csv(points: &[CalibrationPoint]) -> String {
    let mut out = String::from("delta,p_value,quantile,reject,active\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.delta, p.p_value, p.quantile, p.reject, p.active
        ));
    }
    out
}

/// Where the calibration summary goes next to `curve.csv`.
pub fn summary_path(out: &Path) -> PathBuf {
    out.with_extension("summary.json")
}

pub fn calibrate(inputs: &Inputs) -> Result<(), CliError> {
    let section = inputs
        .config
        .calibrate
        .as_ref()
        .ok_or_else(|| CliError::Config("missing `calibrate` section".into()))?;
    check_alphas(&[section.alpha])?;
    let grid = section.grid.values()?;
    let (design, data) = inputs.dataset()?;
    let specs = inputs.config.specs(design.k())?;
    let target = section.target.resolve(design.k())?;
    let seed = inputs.seed(section.seed);
    if section.b == 0 {
        return Err(CliError::Config("`B` must be at least 1".into()));
    }
    let cal = calibrate_delta(
        &data,
        &design,
        &specs,
        &target,
        section.alpha,
        section.b,
        seed,
        &grid,
    )?;
    write_output(inputs.out, &calibration_csv(&cal.points))?;
    let summary = CalibrationSummary {
        schema_version: SCHEMA_VERSION,
        command: "calibrate",
        target: target.subgroups().iter().map(|l| l + 1).collect(),
        statistic: cal.statistic,
        alpha: cal.alpha,
        b: section.b,
        seed,
        delta_hat: cal.delta_hat,
    };
    match inputs.out {
        Some(out) => write_output(Some(&summary_path(out)), &to_json(&summary)?),
        None => {
            eprintln!(
                "statistic {}, smallest rejecting delta {:?}",
                cal.statistic, cal.delta_hat
            );
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct AsympOutput {
    schema_version: u32,
    command: &'static str,
    target: Vec<usize>,
    samples: usize,
    seed: u64,
    extremal: Vec<ArgmaxOut>,
    multiple_extremal: bool,
    mean: f64,
    sd: f64,
    quantiles: Vec<AlphaQuantile>,
    #[serde(skip_serializing_if = "Option::is_none")]
    values: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct AlphaQuantile {
    alpha: f64,
    quantile: f64,
}

pub fn asymp(inputs: &Inputs) -> Result<(), CliError> {
    let section = inputs
        .config
        .asymp
        .as_ref()
        .ok_or_else(|| CliError::Config("missing `asymp` section".into()))?;
    check_alphas(&section.alpha)?;
    if section.samples == 0 {
        return Err(CliError::Config("`samples` must be at least 1".into()));
    }
    let design = inputs.config.full_design()?;
    let models = inputs.config.models(design.k())?;
    let target = section.target.resolve(design.k())?;
    let seed = inputs.seed(section.seed);
    let model = AsymptoticModel::new(&design, &models, &section.sigma2)?;
    let sample = match &target {
        DistanceTarget::One(l) => model.sample_t(*l, section.samples, seed)?,
        DistanceTarget::Many(set) => model.sample_s(set, section.samples, seed)?,
    };
    if sample.multiple_extremal {
        eprintln!("warning: several extremal points, the limit law may not be continuous");
    }
    let n = sample.values.len() as f64;
    let mean = sample.values.iter().sum::<f64>() / n;
    let var = sample
        .values
        .iter()
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        / (n - 1.0).max(1.0);
    let mut values = sample.values.clone();
    values.sort_by(f64::total_cmp);
    let output = AsympOutput {
        schema_version: SCHEMA_VERSION,
        command: "asymp",
        target: target.subgroups().iter().map(|l| l + 1).collect(),
        samples: section.samples,
        seed,
        extremal: sample.extremal.iter().map(argmax_out).collect(),
        multiple_extremal: sample.multiple_extremal,
        mean,
        sd: var.sqrt(),
        quantiles: section
            .alpha
            .iter()
            .map(|&a| AlphaQuantile {
                alpha: a,
                quantile: sample.quantile(a),
            })
            .collect(),
        values: section.include_values.then_some(values),
    };
    write_output(inputs.out, &to_json(&output)?)
}

pub fn simulate(inputs: &Inputs) -> Result<(), CliError> {
    let section = inputs
        .config
        .simulate
        .as_ref()
        .ok_or_else(|| CliError::Config("missing `simulate` section".into()))?;
    let mut opts = section.options;
    opts.seed = inputs.seed(opts.seed);
    section.scenario.validate().map_err(CliError::config)?;
    let rows = match &section.rows {
        Some(rows) => Some(
            rows.iter()
                .map(|&r| {
                    if r == 0 || r > section.scenario.rows.len() {
                        Err(CliError::Config(format!(
                            "row {r} outside 1..{}",
                            section.scenario.rows.len()
                        )))
                    } else {
                        Ok(r - 1)
                    }
                })
                .collect::<Result<Vec<_>, _>>()?,
        ),
        None => None,
    };
    let result = run_scenario(&section.scenario, &opts, rows.as_deref())?;
    let text = match inputs
        .out
        .and_then(|p| p.extension())
        .and_then(|e| e.to_str())
    {
        Some("json") => to_json(&result)?,
        Some("txt") => emit_text(std::slice::from_ref(&result)),
        _ => emit_csv(std::slice::from_ref(&result)),
    };
    write_output(inputs.out, &text)
}
