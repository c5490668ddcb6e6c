//! Trial structure, observed data, CSV ingestion and synthetic data.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DoseResponseModel;
use crate::rng;

const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Doses, per-cell allocations and population weights of a multi-group trial.
///
/// Subgroups are indexed from 0 internally; files and the CLI use 1-based
/// indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyDesign {
    doses: Vec<f64>,
    allocations: Vec<Vec<usize>>,
    weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<String>>,
}

impl StudyDesign {
    /// `allocations[l][j]` is the number of patients of subgroup `l` at dose `j`.
    pub fn new(doses: Vec<f64>, allocations: Vec<Vec<usize>>, weights: Vec<f64>) -> Result<Self> {
        let design = StudyDesign {
            doses,
            allocations,
            weights,
            labels: None,
        };
        design.validate()?;
        Ok(design)
    }

    /// Same number of patients at every dose within each subgroup.
    pub fn equal_allocation(
        doses: Vec<f64>,
        per_dose: &[usize],
        weights: Vec<f64>,
    ) -> Result<Self> {
        let r = doses.len();
        let allocations = per_dose.iter().map(|&n| vec![n; r]).collect();
        Self::new(doses, allocations, weights)
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.k() {
            return Err(Error::Design(format!(
                "{} labels for {} subgroups",
                labels.len(),
                self.k()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.doses.len();
        if r < 2 {
            return Err(Error::Design("need at least two dose levels".into()));
        }
        if self.doses[0] != 0.0 {
            return Err(Error::Design(format!(
                "first dose must be placebo (0), got {}",
                self.doses[0]
            )));
        }
        if !self.doses.iter().all(|d| d.is_finite()) || self.doses.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::Design(
                "doses must be finite and strictly increasing".into(),
            ));
        }
        let k = self.allocations.len();
        if k == 0 {
            return Err(Error::Design("need at least one subgroup".into()));
        }
        for (l, row) in self.allocations.iter().enumerate() {
            if row.len() != r {
                return Err(Error::Design(format!(
                    "subgroup {} has {} allocations for {r} doses",
                    l + 1,
                    row.len()
                )));
            }
            if row.contains(&0) {
                return Err(Error::Design(format!(
                    "subgroup {} has an empty dose cell",
                    l + 1
                )));
            }
        }
        if self.weights.len() != k {
            return Err(Error::Design(format!(
                "{} weights for {k} subgroups",
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|&p| !(p.is_finite() && p > 0.0)) {
            return Err(Error::Design("weights must be positive".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::Design(format!("weights sum to {total}, expected 1")));
        }
        Ok(())
    }

    pub fn doses(&self) -> &[f64] {
        &self.doses
    }

    /// Number of subgroups.
    pub fn k(&self) -> usize {
        self.allocations.len()
    }

    /// Number of dose levels.
    pub fn r(&self) -> usize {
        self.doses.len()
    }

    pub fn allocations(&self) -> &[Vec<usize>] {
        &self.allocations
    }

    pub fn allocation(&self, subgroup: usize) -> &[usize] {
        &self.allocations[subgroup]
    }

    pub fn group_size(&self, subgroup: usize) -> usize {
        self.allocations[subgroup].iter().sum()
    }

    pub fn total_size(&self) -> usize {
        (0..self.k()).map(|l| self.group_size(l)).sum()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// The interval `[d_1, d_r]`.
    pub fn dose_range(&self) -> (f64, f64) {
        (self.doses[0], *self.doses.last().unwrap())
    }

    pub fn max_dose(&self) -> f64 {
        self.dose_range().1
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    /// Display label of a 0-based subgroup (its 1-based index when unlabeled).
    pub fn label(&self, subgroup: usize) -> String {
        match &self.labels {
            Some(l) => l[subgroup].clone(),
            None => (subgroup + 1).to_string(),
        }
    }

    /// Index of a dose level, by exact value.
    pub fn dose_index(&self, dose: f64) -> Option<usize> {
        self.doses.iter().position(|&d| d == dose)
    }

    /// Every cell count multiplied by `factor`.
    pub fn scaled(&self, factor: usize) -> Result<Self> {
        let allocations = self
            .allocations
            .iter()
            .map(|row| row.iter().map(|&n| n * factor).collect())
            .collect();
        let mut d = StudyDesign::new(self.doses.clone(), allocations, self.weights.clone())?;
        d.labels = self.labels.clone();
        Ok(d)
    }
}

/// One observation: 0-based subgroup, dose index, response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub subgroup: usize,
    pub dose_index: usize,
    pub response: f64,
}

/// Observations validated against a [`StudyDesign`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    records: Vec<Record>,
}

/// Sufficient statistics of one subgroup: cell counts, cell means and the
/// pooled within-cell sum of squares.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    pub counts: Vec<usize>,
    pub means: Vec<f64>,
    pub within_ss: f64,
}

impl GroupSummary {
    pub fn n(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Residual sum of squares of a curve evaluated at the dose levels.
    pub fn rss(&self, doses: &[f64], model: &DoseResponseModel) -> f64 {
        self.within_ss
            + doses
                .iter()
                .zip(&self.counts)
                .zip(&self.means)
                .map(|((&d, &n), &m)| {
                    let r = m - model.value(d);
                    n as f64 * r * r
                })
                .sum::<f64>()
    }
}

impl Dataset {
    pub fn new(records: Vec<Record>, design: &StudyDesign) -> Result<Self> {
        let ds = Dataset { records };
        ds.validate(design)?;
        Ok(ds)
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Check indices, finiteness and per-cell counts against `design`.
    pub fn validate(&self, design: &StudyDesign) -> Result<()> {
        let (k, r) = (design.k(), design.r());
        let mut counts = vec![vec![0usize; r]; k];
        for rec in &self.records {
            if rec.subgroup >= k || rec.dose_index >= r {
                return Err(Error::data(
                    None,
                    format!("record {rec:?} outside design ({k} subgroups, {r} doses)"),
                ));
            }
            if !rec.response.is_finite() {
                return Err(Error::data(None, format!("non-finite response in {rec:?}")));
            }
            counts[rec.subgroup][rec.dose_index] += 1;
        }
        let mut mismatches = String::new();
        for (l, row) in counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                let want = design.allocation(l)[j];
                if c != want {
                    let _ = write!(
                        mismatches,
                        "; subgroup {} dose {}: {c} records, design allocates {want}",
                        l + 1,
                        design.doses()[j]
                    );
                }
            }
        }
        if !mismatches.is_empty() {
            return Err(Error::data(
                None,
                format!("count mismatch{}", mismatches.replacen(';', ":", 1)),
            ));
        }
        Ok(())
    }

    /// Per-subgroup sufficient statistics.
    pub fn summarize(&self, design: &StudyDesign) -> Vec<GroupSummary> {
        let (k, r) = (design.k(), design.r());
        let mut counts = vec![vec![0usize; r]; k];
        let mut sums = vec![vec![0.0; r]; k];
        for rec in &self.records {
            counts[rec.subgroup][rec.dose_index] += 1;
            sums[rec.subgroup][rec.dose_index] += rec.response;
        }
        let means: Vec<Vec<f64>> = sums
            .iter()
            .zip(&counts)
            .map(|(s, c)| {
                s.iter()
                    .zip(c)
                    .map(|(&s, &c)| s / c.max(1) as f64)
                    .collect()
            })
            .collect();
        let mut within = vec![0.0; k];
        for rec in &self.records {
            let dev = rec.response - means[rec.subgroup][rec.dose_index];
            within[rec.subgroup] += dev * dev;
        }
        (0..k)
            .map(|l| GroupSummary {
                counts: counts[l].clone(),
                means: means[l].clone(),
                within_ss: within[l],
            })
            .collect()
    }

    /// Write `subgroup,dose,response` CSV with LF line endings and
    /// 17-significant-digit numbers.
    pub fn write_csv<W: Write>(&self, mut out: W, design: &StudyDesign) -> Result<()> {
        let mut buf = String::with_capacity(self.records.len() * 48 + 32);
        buf.push_str("subgroup,dose,response\n");
        for rec in &self.records {
            let _ = writeln!(
                buf,
                "{},{:.16e},{:.16e}",
                rec.subgroup + 1,
                design.doses()[rec.dose_index],
                rec.response
            );
        }
        out.write_all(buf.as_bytes())?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>, design: &StudyDesign) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file), design)
    }
}

/// Per-subgroup error variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupVariances(Vec<f64>);

impl GroupVariances {
    /// Variances must be finite and non-negative; zero gives noiseless data.
    pub fn new(sigma2: Vec<f64>) -> Result<Self> {
        if sigma2.iter().any(|&s| !(s.is_finite() && s >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "invalid variances {sigma2:?}"
            )));
        }
        Ok(GroupVariances(sigma2))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Read and validate a `subgroup,dose,response` CSV file.
pub fn load_csv(path: impl AsRef<Path>, design: &StudyDesign) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, design)
}

/// Parse CSV from any reader. Doses are matched by value against the design.
pub fn read_csv<R: Read>(reader: R, design: &StudyDesign) -> Result<Dataset> {
    let records = parse_records(reader, design)?;
    Dataset::new(records, design)
}

/// Read a CSV file and take the allocation of the design from its cell
/// counts.
pub fn load_csv_counted(
    path: impl AsRef<Path>,
    doses: Vec<f64>,
    weights: Vec<f64>,
) -> Result<(StudyDesign, Dataset)> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv_counted(file, doses, weights)
}

/// Reader version of [`load_csv_counted`].
pub fn read_csv_counted<R: Read>(
    reader: R,
    doses: Vec<f64>,
    weights: Vec<f64>,
) -> Result<(StudyDesign, Dataset)> {
    let (k, r) = (weights.len(), doses.len());
    let probe = StudyDesign::new(doses.clone(), vec![vec![1; r]; k], weights.clone())?;
    let records = parse_records(reader, &probe)?;
    let mut counts = vec![vec![0usize; r]; k];
    for rec in &records {
        counts[rec.subgroup][rec.dose_index] += 1;
    }
    for (l, row) in counts.iter().enumerate() {
        if let Some(j) = row.iter().position(|&c| c == 0) {
            return Err(Error::data(
                None,
                format!("no records for subgroup {} at dose {}", l + 1, doses[j]),
            ));
        }
    }
    let design = StudyDesign::new(doses, counts, weights)?;
    let data = Dataset::new(records, &design)?;
    Ok((design, data))
}

fn parse_records<R: Read>(reader: R, design: &StudyDesign) -> Result<Vec<Record>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::data(Some(1), format!("unreadable header: {e}")))?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols != ["subgroup", "dose", "response"] {
        return Err(Error::data(
            Some(1),
            format!(
                "expected header `subgroup,dose,response`, got `{}`",
                cols.join(",")
            ),
        ));
    }
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize);
            Error::data(line, format!("unparseable row: {e}"))
        })?;
        let line = row.position().map(|p| p.line() as usize);
        if row.len() != 3 {
            return Err(Error::data(
                line,
                format!("expected 3 fields, got {}", row.len()),
            ));
        }
        let subgroup: usize = row[0]
            .parse()
            .map_err(|_| Error::data(line, format!("bad subgroup `{}`", &row[0])))?;
        if subgroup == 0 || subgroup > design.k() {
            return Err(Error::data(
                line,
                format!("subgroup {subgroup} outside 1..{}", design.k()),
            ));
        }
        let dose: f64 = row[1]
            .parse()
            .map_err(|_| Error::data(line, format!("bad dose `{}`", &row[1])))?;
        let dose_index = design.dose_index(dose).ok_or_else(|| {
            Error::data(
                line,
                format!(
                    "unknown dose level {} (design doses {:?})",
                    &row[1],
                    design.doses()
                ),
            )
        })?;
        let response: f64 = row[2]
            .parse()
            .map_err(|_| Error::data(line, format!("bad response `{}`", &row[2])))?;
        if !response.is_finite() {
            return Err(Error::data(line, "non-finite response"));
        }
        records.push(Record {
            subgroup: subgroup - 1,
            dose_index,
            response,
        });
    }
    Ok(records)
}

fn check_models(design: &StudyDesign, models: &[DoseResponseModel], sigma2: &[f64]) -> Result<()> {
    if models.len() != design.k() || sigma2.len() != design.k() {
        return Err(Error::InvalidArgument(format!(
            "need {} models and variances, got {} and {}",
            design.k(),
            models.len(),
            sigma2.len()
        )));
    }
    Ok(())
}

/// Draw `Y = mu_l(d_j) + sigma_l * z` for every patient, in subgroup, dose,
/// patient order, from stream 0 of `seed`.
pub fn generate(
    design: &StudyDesign,
    models: &[DoseResponseModel],
    variances: &GroupVariances,
    seed: u64,
) -> Result<Dataset> {
    let sigma2 = variances.as_slice();
    check_models(design, models, sigma2)?;
    let mut rng = rng::stream(seed, 0);
    let mut records = Vec::with_capacity(design.total_size());
    for (l, model) in models.iter().enumerate() {
        let sd = sigma2[l].sqrt();
        for (j, &d) in design.doses().iter().enumerate() {
            let mean = model.value(d);
            for _ in 0..design.allocation(l)[j] {
                let z: f64 = rng.sample(StandardNormal);
                records.push(Record {
                    subgroup: l,
                    dose_index: j,
                    response: mean + sd * z,
                });
            }
        }
    }
    Ok(Dataset { records })
}

/// Same draws as [`generate`] but accumulated straight into sufficient
/// statistics (Welford), for Monte Carlo loops.
pub(crate) fn simulate_summaries<R: Rng>(
    design: &StudyDesign,
    models: &[DoseResponseModel],
    sigma2: &[f64],
    rng: &mut R,
) -> Vec<GroupSummary> {
    models
        .iter()
        .enumerate()
        .map(|(l, model)| {
            let sd = sigma2[l].sqrt();
            let r = design.r();
            let mut means = Vec::with_capacity(r);
            let mut within_ss = 0.0;
            for (j, &d) in design.doses().iter().enumerate() {
                let mu = model.value(d);
                let mut mean = 0.0;
                let mut m2 = 0.0;
                for i in 0..design.allocation(l)[j] {
                    let z: f64 = rng.sample(StandardNormal);
                    let y = mu + sd * z;
                    let delta = y - mean;
                    mean += delta / (i + 1) as f64;
                    m2 += delta * (y - mean);
                }
                means.push(mean);
                within_ss += m2;
            }
            GroupSummary {
                counts: design.allocation(l).to_vec(),
                means,
                within_ss,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EmaxParams;

    fn scenario_a_design() -> StudyDesign {
        StudyDesign::equal_allocation(
            vec![0.0, 10.0, 25.0, 50.0, 100.0, 150.0],
            &[25, 25, 25],
            vec![0.1, 0.3, 0.6],
        )
        .unwrap()
    }

    fn emax(e0: f64, emax: f64, ed50: f64) -> DoseResponseModel {
        DoseResponseModel::emax(EmaxParams::new(e0, emax, ed50, 1.0).unwrap(), true, 150.0).unwrap()
    }

    #[test]
    fn design_invariants() {
        let d = scenario_a_design();
        assert_eq!(d.total_size(), 450);
        assert_eq!(d.group_size(0), 150);
        assert!(StudyDesign::new(vec![1.0, 2.0], vec![vec![1, 1]], vec![1.0]).is_err());
        assert!(StudyDesign::new(vec![0.0, 2.0], vec![vec![1, 0]], vec![1.0]).is_err());
        assert!(StudyDesign::new(vec![0.0, 2.0], vec![vec![1, 1]], vec![0.9]).is_err());
        assert!(StudyDesign::new(vec![0.0, 0.0], vec![vec![1, 1]], vec![1.0]).is_err());
        assert!(
            StudyDesign::new(vec![0.0, 1.0], vec![vec![1, 1], vec![1, 1]], vec![0.5, 0.5])
                .unwrap()
                .with_labels(vec!["J".into()])
                .is_err()
        );
    }

    #[test]
    fn minimal_csv() {
        let design = StudyDesign::new(vec![0.0, 1.0, 2.0], vec![vec![1, 1, 1]], vec![1.0]).unwrap();
        let csv = "subgroup,dose,response\r\n1,0,0.1\r\n1,1.0,0.2\r\n1,2,0.3\r\n";
        let ds = read_csv(csv.as_bytes(), &design).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.records()[1].dose_index, 1);
    }

    #[test]
    fn csv_errors_are_specific() {
        let design = StudyDesign::new(vec![0.0, 1.0, 2.0], vec![vec![1, 1, 1]], vec![1.0]).unwrap();
        let err = read_csv(
            "subgroup,dose,response\n1,0,0.1\n1,5,0.2\n1,2,0.3\n".as_bytes(),
            &design,
        )
        .unwrap_err()
        .to_string();
        assert!(
            err.contains("unknown dose level 5") && err.contains("line 3"),
            "{err}"
        );

        let err = read_csv("subgroup,dose,response\n2,0,0.1\n".as_bytes(), &design)
            .unwrap_err()
            .to_string();
        assert!(err.contains("subgroup 2 outside"), "{err}");

        let err = read_csv(
            "subgroup,dose,response\n1,0,0.1\n1,1,abc\n".as_bytes(),
            &design,
        )
        .unwrap_err()
        .to_string();
        assert!(
            err.contains("line 3") && err.contains("bad response"),
            "{err}"
        );

        let err = read_csv(
            "subgroup,dose,response\n1,0,0.1\n1,0,0.1\n1,2,0.3\n".as_bytes(),
            &design,
        )
        .unwrap_err()
        .to_string();
        assert!(
            err.contains("dose 0: 2 records") && err.contains("dose 1: 0 records"),
            "{err}"
        );

        let err = read_csv("group,dose,y\n".as_bytes(), &design)
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn noiseless_generation_is_exact() {
        let design = scenario_a_design();
        let models = [
            emax(0.0, 0.42, 7.0),
            emax(0.0, 0.46, 26.0),
            emax(0.0, 0.46, 25.5),
        ];
        let ds = generate(
            &design,
            &models,
            &GroupVariances::new(vec![0.0; 3]).unwrap(),
            3,
        )
        .unwrap();
        assert_eq!(ds.len(), 450);
        for rec in ds.records() {
            let want = models[rec.subgroup].value(design.doses()[rec.dose_index]);
            assert_eq!(rec.response, want);
        }
        let summ = ds.summarize(&design);
        assert!(summ
            .iter()
            .all(|s| s.counts == vec![25; 6] && s.within_ss < 1e-25));
    }

    #[test]
    fn generation_is_deterministic_and_round_trips() {
        let design = scenario_a_design();
        let models = [
            emax(0.0, 0.42, 7.0),
            emax(0.0, 0.46, 26.0),
            emax(0.0, 0.46, 25.5),
        ];
        let var = GroupVariances::new(vec![0.01; 3]).unwrap();
        let a = generate(&design, &models, &var, 11).unwrap();
        let b = generate(&design, &models, &var, 11).unwrap();
        let c = generate(&design, &models, &var, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        a.save_csv(&path, &design).unwrap();
        let back = load_csv(&path, &design).unwrap();
        assert_eq!(a, back);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains('\r'));
    }

    #[test]
    fn summaries_match_generated_dataset() {
        let design = scenario_a_design();
        let models = [
            emax(0.1, 0.42, 7.0),
            emax(0.0, 0.46, 26.0),
            emax(-0.2, 0.46, 25.5),
        ];
        let sigma2 = [0.01, 0.04, 0.09];
        let ds = generate(
            &design,
            &models,
            &GroupVariances::new(sigma2.to_vec()).unwrap(),
            5,
        )
        .unwrap();
        let direct = simulate_summaries(&design, &models, &sigma2, &mut rng::stream(5, 0));
        for (a, b) in ds.summarize(&design).iter().zip(&direct) {
            assert_eq!(a.counts, b.counts);
            for (x, y) in a.means.iter().zip(&b.means) {
                assert!((x - y).abs() < 1e-14);
            }
            assert!((a.within_ss - b.within_ss).abs() < 1e-11 * a.within_ss.max(1.0));
        }
    }

    #[test]
    fn large_cell_mean_converges() {
        let design =
            StudyDesign::new(vec![0.0, 50.0], vec![vec![100_000, 100_000]], vec![1.0]).unwrap();
        let m = emax(0.3, 0.46, 25.0);
        let sigma = 0.5;
        let ds = generate(
            &design,
            &[m],
            &GroupVariances::new(vec![sigma * sigma]).unwrap(),
            99,
        )
        .unwrap();
        let s = &ds.summarize(&design)[0];
        for (j, &d) in design.doses().iter().enumerate() {
            assert!((s.means[j] - m.value(d)).abs() < 5.0 * sigma / (1e5f64).sqrt());
        }
    }
}
