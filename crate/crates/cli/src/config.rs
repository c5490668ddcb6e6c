//! Run configuration files. Unknown keys are rejected everywhere; the
//! published schema lives in `schema/run_config.schema.json`.

use serde::Deserialize;

use curvequiv::{
    DistanceTarget, DoseResponseModel, EmaxParams, ModelFamily, ModelSpec, ParamBounds, Scenario,
    SimOptions, StudyDesign,
};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub design: Option<DesignConfig>,
    #[serde(default)]
    pub models: Vec<ModelConfig>,
    #[serde(default)]
    pub test: Option<TestSection>,
    #[serde(default)]
    pub calibrate: Option<CalibrateSection>,
    #[serde(default)]
    pub asymp: Option<AsympSection>,
    #[serde(default)]
    pub simulate: Option<SimulateSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    pub doses: Vec<f64>,
    pub weights: Vec<f64>,
    /// Patients per subgroup and dose. Taken from the data when absent.
    #[serde(default)]
    pub allocations: Option<Vec<Vec<usize>>>,
    #[serde(default)]
    pub labels: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyName {
    Emax,
    EmaxFixedHill,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: FamilyName,
    /// Known Hill coefficient of `emax_fixed_hill`.
    #[serde(default)]
    pub hill: Option<f64>,
    /// Free parameters, needed where the curve is given rather than fitted.
    #[serde(default)]
    pub params: Option<Vec<f64>>,
    /// `[lower, upper]` per free parameter.
    #[serde(default)]
    pub bounds: Option<Vec<[f64; 2]>>,
}

/// 1-based subgroup selection: one index, a list, or `"all"`.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum TargetConfig {
    One(usize),
    Many(Vec<usize>),
    All(AllKeyword),
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllKeyword {
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    /// Bootstrap of the maximum over the selected subgroups.
    #[default]
    Max,
    /// One test per subgroup, reject only if all reject.
    IntersectionUnion,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestSection {
    pub delta: f64,
    pub alpha: Vec<f64>,
    #[serde(rename = "B")]
    pub b: usize,
    pub seed: u64,
    pub target: TargetConfig,
    #[serde(default)]
    pub method: TestMethod,
    /// Write the sorted bootstrap sample.
    #[serde(default)]
    pub include_values: bool,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum GridConfig {
    Values(Vec<f64>),
    Range(GridRange),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridRange {
    pub from: f64,
    pub to: f64,
    pub points: usize,
}

impl GridConfig {
    pub fn values(&self) -> Result<Vec<f64>, CliError> {
        match self {
            GridConfig::Values(v) if !v.is_empty() => Ok(v.clone()),
            GridConfig::Values(_) => Err(CliError::Config("calibration grid is empty".into())),
            GridConfig::Range(r) => {
                if r.points < 2 || r.to.partial_cmp(&r.from) != Some(std::cmp::Ordering::Greater) {
                    return Err(CliError::Config(
                        "grid range needs `to > from` and at least 2 points".into(),
                    ));
                }
                let step = (r.to - r.from) / (r.points - 1) as f64;
                Ok((0..r.points)
                    .map(|i| ((r.from + step * i as f64) * 1e12).round() / 1e12)
                    .collect())
            }
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateSection {
    pub alpha: f64,
    #[serde(rename = "B")]
    pub b: usize,
    pub seed: u64,
    pub target: TargetConfig,
    pub grid: GridConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsympSection {
    pub sigma2: Vec<f64>,
    pub target: TargetConfig,
    pub samples: usize,
    pub seed: u64,
    pub alpha: Vec<f64>,
    #[serde(default)]
    pub include_values: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub scenario: Scenario,
    #[serde(default)]
    pub options: SimOptions,
    /// 1-based rows; all rows when absent.
    #[serde(default)]
    pub rows: Option<Vec<usize>>,
}

pub fn parse(text: &str) -> Result<RunConfig, CliError> {
    let config: RunConfig = serde_json::from_str(text).map_err(|e| {
        let text = e.to_string();
        let message = text.split(" at line ").next().unwrap_or(&text);
        CliError::Config(format!(
            "line {}, column {}: {message}",
            e.line(),
            e.column()
        ))
    })?;
    if config.schema_version != SCHEMA_VERSION {
        return Err(CliError::Config(format!(
            "unsupported schema_version {} (this build reads {SCHEMA_VERSION})",
            config.schema_version
        )));
    }
    Ok(config)
}

impl RunConfig {
    pub fn design_config(&self) -> Result<&DesignConfig, CliError> {
        self.design
            .as_ref()
            .ok_or_else(|| CliError::Config("missing `design` section".into()))
    }

    /// Design with allocations from the config; fails if they are absent.
    pub fn full_design(&self) -> Result<StudyDesign, CliError> {
        let d = self.design_config()?;
        let allocations = d
            .allocations
            .clone()
            .ok_or_else(|| CliError::Config("`design.allocations` is required here".into()))?;
        let design = StudyDesign::new(d.doses.clone(), allocations, d.weights.clone())
            .map_err(CliError::config)?;
        match &d.labels {
            Some(labels) => design.with_labels(labels.clone()).map_err(CliError::config),
            None => Ok(design),
        }
    }

    fn max_dose(&self) -> Result<f64, CliError> {
        Ok(self.design_config()?.doses.last().copied().unwrap_or(0.0))
    }

    pub fn specs(&self, k: usize) -> Result<Vec<ModelSpec>, CliError> {
        if self.models.len() != k {
            return Err(CliError::Config(format!(
                "{} models for {k} subgroups",
                self.models.len()
            )));
        }
        let max_dose = self.max_dose()?;
        self.models.iter().map(|m| m.spec(max_dose)).collect()
    }

    pub fn models(&self, k: usize) -> Result<Vec<DoseResponseModel>, CliError> {
        let specs = self.specs(k)?;
        self.models
            .iter()
            .zip(specs)
            .enumerate()
            .map(|(l, (m, spec))| {
                let free = m
                    .params
                    .as_ref()
                    .ok_or_else(|| CliError::Config(format!("model {} needs `params`", l + 1)))?;
                if free.len() != spec.n_params() {
                    return Err(CliError::Config(format!(
                        "model {} has {} params, family needs {}",
                        l + 1,
                        free.len(),
                        spec.n_params()
                    )));
                }
                let params: EmaxParams = spec.family.params_from_free(free);
                DoseResponseModel::new(spec, params).map_err(CliError::config)
            })
            .collect()
    }
}

impl ModelConfig {
    fn spec(&self, max_dose: f64) -> Result<ModelSpec, CliError> {
        let family = match (self.family, self.hill) {
            (FamilyName::Emax, None) => ModelFamily::EmaxFull,
            (FamilyName::Emax, Some(_)) => {
                return Err(CliError::Config(
                    "`hill` applies to emax_fixed_hill only".into(),
                ));
            }
            (FamilyName::EmaxFixedHill, Some(hill)) => ModelFamily::EmaxFixedHill { hill },
            (FamilyName::EmaxFixedHill, None) => {
                return Err(CliError::Config("emax_fixed_hill needs `hill`".into()));
            }
        };
        let mut bounds = ParamBounds::default_for(max_dose);
        if let Some(b) = &self.bounds {
            if b.len() != family.n_params() {
                return Err(CliError::Config(format!(
                    "{} bounds for {} parameters",
                    b.len(),
                    family.n_params()
                )));
            }
            for (i, [lo, hi]) in b.iter().enumerate() {
                bounds.lower[i] = *lo;
                bounds.upper[i] = *hi;
            }
            bounds = ParamBounds::new(bounds.lower, bounds.upper).map_err(CliError::config)?;
        }
        ModelSpec::new(family, bounds).map_err(CliError::config)
    }
}

impl TargetConfig {
    pub fn resolve(&self, k: usize) -> Result<DistanceTarget, CliError> {
        let check = |i: usize| {
            if i == 0 || i > k {
                Err(CliError::Config(format!("subgroup {i} outside 1..{k}")))
            } else {
                Ok(i - 1)
            }
        };
        let target = match self {
            TargetConfig::One(i) => DistanceTarget::One(check(*i)?),
            TargetConfig::Many(v) => {
                DistanceTarget::Many(v.iter().map(|&i| check(i)).collect::<Result<_, _>>()?)
            }
            TargetConfig::All(_) => DistanceTarget::Many((0..k).collect()),
        };
        target.validate(k).map_err(CliError::config)?;
        Ok(target)
    }
}
