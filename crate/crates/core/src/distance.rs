//! Population curve and maximum-deviation distances.
//!
//! The maximum of `|mu_i(d) - mu_bar(d)|` over the dose interval is found by
//! scanning a uniform grid and refining every grid-local maximum with a
//! golden-section search.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DoseResponseModel;

pub const DEFAULT_GRID_POINTS: usize = 2001;

/// Which subgroups the distance is taken over (0-based indices).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceTarget {
    /// `d_inf` for one subgroup.
    One(usize),
    /// `d_inf_inf` over a set of subgroups.
    Many(Vec<usize>),
}

impl DistanceTarget {
    pub fn subgroups(&self) -> &[usize] {
        match self {
            DistanceTarget::One(i) => std::slice::from_ref(i),
            DistanceTarget::Many(set) => set,
        }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        let set = self.subgroups();
        if set.is_empty() {
            return Err(Error::InvalidArgument("empty subgroup set".into()));
        }
        if set.len() > k {
            return Err(Error::InvalidArgument(format!(
                "{} subgroups requested, k = {k}",
                set.len()
            )));
        }
        if let Some(&bad) = set.iter().find(|&&i| i >= k) {
            return Err(Error::InvalidArgument(format!(
                "subgroup {} outside 1..{k}",
                bad + 1
            )));
        }
        let mut sorted = set.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != set.len() {
            return Err(Error::InvalidArgument(format!(
                "duplicate subgroups in {set:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceOptions {
    /// Points in the uniform scan grid.
    pub grid_points: usize,
    /// Width at which golden-section refinement stops (dose units).
    pub dose_tol: f64,
    /// Relative tolerance grouping near-ties into the argmax set.
    pub tie_tol: f64,
}

impl Default for DistanceOptions {
    fn default() -> Self {
        DistanceOptions {
            grid_points: DEFAULT_GRID_POINTS,
            dose_tol: 1e-8,
            tie_tol: 1e-6,
        }
    }
}

/// `mu_bar(d) = sum_l p_l mu_l(d)`.
#[derive(Debug, Clone, Copy)]
pub struct PopulationCurve<'a> {
    models: &'a [DoseResponseModel],
    weights: &'a [f64],
}

impl<'a> PopulationCurve<'a> {
    pub fn new(models: &'a [DoseResponseModel], weights: &'a [f64]) -> Result<Self> {
        if models.len() != weights.len() || models.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} models for {} weights",
                models.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|&p| !(p > 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "weights {weights:?} must be positive and sum to 1"
            )));
        }
        Ok(PopulationCurve { models, weights })
    }

    pub(crate) fn new_unchecked(models: &'a [DoseResponseModel], weights: &'a [f64]) -> Self {
        PopulationCurve { models, weights }
    }

    pub fn models(&self) -> &[DoseResponseModel] {
        self.models
    }

    pub fn weights(&self) -> &[f64] {
        self.weights
    }

    pub fn value(&self, d: f64) -> f64 {
        self.models
            .iter()
            .zip(self.weights)
            .map(|(m, &p)| p * m.value(d))
            .sum()
    }

    /// `mu_i(d) - mu_bar(d)`.
    pub fn difference(&self, subgroup: usize, d: f64) -> f64 {
        self.models[subgroup].value(d) - self.value(d)
    }
}

/// A dose (and subgroup) at which the maximum deviation is attained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArgmaxPoint {
    pub subgroup: usize,
    pub dose: f64,
    /// Sign of `mu_i - mu_bar` at the point, +1 or -1.
    pub sign: i8,
    pub difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceResult {
    pub value: f64,
    pub argmax_points: Vec<ArgmaxPoint>,
}

/// Maximum deviation of one subgroup from the population curve over `range`.
pub fn d_inf(
    models: &[DoseResponseModel],
    weights: &[f64],
    subgroup: usize,
    range: (f64, f64),
) -> Result<DistanceResult> {
    d_inf_inf(models, weights, &[subgroup], range)
}

/// Maximum over `subgroups` of the per-subgroup maximum deviation.
pub fn d_inf_inf(
    models: &[DoseResponseModel],
    weights: &[f64],
    subgroups: &[usize],
    range: (f64, f64),
) -> Result<DistanceResult> {
    let curve = PopulationCurve::new(models, weights)?;
    DistanceTarget::Many(subgroups.to_vec()).validate(models.len())?;
    check_range(range)?;
    Ok(max_deviation(
        &curve,
        subgroups,
        range,
        &DistanceOptions::default(),
    ))
}

/// `d_inf` or `d_inf_inf` according to `target`.
pub fn statistic(
    models: &[DoseResponseModel],
    weights: &[f64],
    target: &DistanceTarget,
    range: (f64, f64),
) -> Result<DistanceResult> {
    d_inf_inf(models, weights, target.subgroups(), range)
}

fn check_range(range: (f64, f64)) -> Result<()> {
    if !(range.0.is_finite() && range.1.is_finite() && range.0 >= 0.0 && range.1 >= range.0) {
        return Err(Error::InvalidArgument(format!("bad dose range {range:?}")));
    }
    Ok(())
}

/// Uniform scan grid over `range`.
pub(crate) fn grid(range: (f64, f64), points: usize) -> Vec<f64> {
    if points < 2 || range.1 == range.0 {
        return vec![range.0];
    }
    let step = (range.1 - range.0) / (points - 1) as f64;
    (0..points)
        .map(|t| {
            if t + 1 == points {
                range.1
            } else {
                range.0 + step * t as f64
            }
        })
        .collect()
}

/// Maximize `|f|` on `[lo, hi]` by golden-section search.
fn golden_max<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1).abs();
    let mut f2 = f(x2).abs();
    while hi - lo > tol {
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1).abs();
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2).abs();
        }
    }
    if f1 >= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Grid scan plus golden-section refinement, without argument checks.
pub(crate) fn max_deviation(
    curve: &PopulationCurve<'_>,
    subgroups: &[usize],
    range: (f64, f64),
    opts: &DistanceOptions,
) -> DistanceResult {
    let xs = grid(range, opts.grid_points);
    let g = xs.len();
    let k = curve.models.len();
    let mut values = vec![0.0; k * g];
    let mut bar = vec![0.0; g];
    for (l, m) in curve.models.iter().enumerate() {
        let p = curve.weights[l];
        let row = &mut values[l * g..(l + 1) * g];
        for (t, &x) in xs.iter().enumerate() {
            let v = m.value(x);
            row[t] = v;
            bar[t] += p * v;
        }
    }

    // (subgroup, maximum, candidate points with their signed deviation)
    let mut per_group: Vec<(usize, f64, Vec<(f64, f64)>)> = Vec::with_capacity(subgroups.len());
    let mut abs = vec![0.0; g];
    for &i in subgroups {
        let row = &values[i * g..(i + 1) * g];
        for t in 0..g {
            abs[t] = (row[t] - bar[t]).abs();
        }
        let grid_best = abs.iter().cloned().fold(0.0, f64::max);
        if grid_best <= 1e-12 {
            per_group.push((i, grid_best, vec![(range.0, curve.difference(i, range.0))]));
            continue;
        }
        let mut cands: Vec<(f64, f64)> = Vec::new();
        for t in 0..g {
            let is_peak = if t == 0 {
                g == 1 || abs[0] >= abs[1]
            } else if t + 1 == g {
                abs[t] >= abs[t - 1]
            } else {
                abs[t] > abs[t - 1] && abs[t] >= abs[t + 1]
            };
            if !is_peak {
                continue;
            }
            let lo = xs[t.saturating_sub(1)];
            let hi = xs[(t + 1).min(g - 1)];
            let diff = |d: f64| curve.difference(i, d);
            let (mut x, mut v) = if hi > lo {
                golden_max(diff, lo, hi, opts.dose_tol)
            } else {
                (xs[t], abs[t])
            };
            if abs[t] >= v {
                x = xs[t];
                v = abs[t];
            }
            cands.push((x, v));
        }
        let best = cands.iter().map(|c| c.1).fold(0.0, f64::max);
        let cut = best - opts.tie_tol * best.max(1.0);
        let mut pts: Vec<(f64, f64)> = Vec::new();
        let near = (range.1 - range.0) * 1e-6 + 10.0 * opts.dose_tol;
        for &(x, _) in cands.iter().filter(|c| c.1 >= cut) {
            if pts.iter().all(|p| (p.0 - x).abs() > near) {
                pts.push((x, curve.difference(i, x)));
            }
        }
        per_group.push((i, best, pts));
    }

    let value = per_group.iter().map(|p| p.1).fold(0.0, f64::max);
    if value <= 1e-12 {
        let i = subgroups[0];
        let diff = curve.difference(i, range.0);
        return DistanceResult {
            value,
            argmax_points: vec![ArgmaxPoint {
                subgroup: i,
                dose: range.0,
                sign: 1,
                difference: diff,
            }],
        };
    }
    let cut = value - opts.tie_tol * value.max(1.0);
    let argmax_points = per_group
        .into_iter()
        .filter(|p| p.1 >= cut)
        .flat_map(|(i, _, pts)| {
            pts.into_iter().map(move |(dose, diff)| ArgmaxPoint {
                subgroup: i,
                dose,
                sign: if diff >= 0.0 { 1 } else { -1 },
                difference: diff,
            })
        })
        .filter(|p| p.difference.abs() >= cut)
        .collect();
    DistanceResult {
        value,
        argmax_points,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EmaxParams;
    use proptest::prelude::*;

    fn emax(e0: f64, em: f64, ed50: f64, h: f64) -> DoseResponseModel {
        DoseResponseModel::emax(EmaxParams::new(e0, em, ed50, h).unwrap(), false, 150.0).unwrap()
    }

    const W: [f64; 3] = [0.1, 0.3, 0.6];

    fn scenario_a(ed50: f64, em: f64) -> Vec<DoseResponseModel> {
        vec![
            emax(0.0, em, ed50, 1.0),
            emax(0.0, 0.46, 26.0, 1.0),
            emax(0.0, 0.46, 25.5, 1.0),
        ]
    }

    /// Brute-force oracle: 1.5 million point scan, no refinement.
    fn brute(models: &[DoseResponseModel], w: &[f64], i: usize, range: (f64, f64)) -> f64 {
        let n = 1_500_001;
        let curve = PopulationCurve::new(models, w).unwrap();
        (0..n)
            .map(|t| {
                let d = range.0 + (range.1 - range.0) * t as f64 / (n - 1) as f64;
                curve.difference(i, d).abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn identical_curves_have_zero_distance() {
        let m = vec![emax(0.1, 0.46, 25.0, 1.0); 3];
        let r = d_inf(&m, &W, 0, (0.0, 150.0)).unwrap();
        assert!(r.value < 1e-12);
        assert_eq!(r.argmax_points.len(), 1);
        assert_eq!(r.argmax_points[0].dose, 0.0);
        assert_eq!(r.argmax_points[0].sign, 1);
    }

    #[test]
    fn scenario_a_rows_match_dense_oracle() {
        // Oracle values from the brute-force scan. The printed tables round
        // (7, 0.42) to 0.10 although the curves give 0.1069.
        for (ed50, em, want) in [(7.0, 0.42, 0.106_88), (2.0, 0.40, 0.191_70)] {
            let m = scenario_a(ed50, em);
            let got = d_inf(&m, &W, 0, (0.0, 150.0)).unwrap();
            let oracle = brute(&m, &W, 0, (0.0, 150.0));
            assert!(
                (got.value - oracle).abs() < 1e-6,
                "{} vs {oracle}",
                got.value
            );
            assert!((got.value - want).abs() < 5e-5, "{}", got.value);
        }
        let r = d_inf(&scenario_a(2.0, 0.40), &W, 0, (0.0, 150.0)).unwrap();
        assert!((r.value - 0.19).abs() <= 0.005);
    }

    #[test]
    fn many_groups_scenario_a_six() {
        let m = scenario_a(6.0, 0.42);
        let all = d_inf_inf(&m, &W, &[0, 1, 2], (0.0, 150.0)).unwrap();
        assert!((all.value - 0.12).abs() <= 0.005, "{}", all.value);
        let one = d_inf(&m, &W, 0, (0.0, 150.0)).unwrap();
        // subgroup 1 attains the maximum
        assert_eq!(one.value, all.value);
        assert!(all.argmax_points.iter().all(|p| p.subgroup == 0));
    }

    #[test]
    fn single_group_set_equals_d_inf() {
        let m = scenario_a(10.0, 0.42);
        for i in 0..3 {
            assert_eq!(
                d_inf(&m, &W, i, (0.0, 150.0)).unwrap(),
                d_inf_inf(&m, &W, &[i], (0.0, 150.0)).unwrap()
            );
        }
        assert!(d_inf_inf(&m, &W, &[], (0.0, 150.0)).is_err());
        assert!(d_inf_inf(&m, &W, &[3], (0.0, 150.0)).is_err());
    }

    #[test]
    fn case_study_printed_fits() {
        let m = vec![
            emax(0.38, 0.66, 3.94, 1.0),
            emax(0.0, 0.68, 1.41, 1.0),
            emax(-0.03, 0.90, 0.85, 1.0),
        ];
        let w = [1.0 / 7.0, 3.0 / 7.0, 3.0 / 7.0];
        let r = d_inf_inf(&m, &w, &[0, 1, 2], (0.0, 4.0)).unwrap();
        let oracle = (0..3)
            .map(|i| brute(&m, &w, i, (0.0, 4.0)))
            .fold(0.0, f64::max);
        assert!((r.value - oracle).abs() < 1e-7);
        assert!((r.value - 0.337).abs() <= 0.01);
    }

    #[test]
    fn argmax_points_attain_the_value() {
        let m = scenario_a(4.0, 0.41);
        let r = d_inf_inf(&m, &W, &[0, 1, 2], (0.0, 150.0)).unwrap();
        let curve = PopulationCurve::new(&m, &W).unwrap();
        for p in &r.argmax_points {
            let diff = curve.difference(p.subgroup, p.dose);
            assert!((diff.abs() - r.value).abs() <= 1e-6 * r.value.max(1.0));
            assert_eq!(p.sign as f64, diff.signum());
        }
    }

    #[test]
    fn symmetric_extremes_are_both_reported() {
        // mu_1 - mu_bar = 0.5 * (c - 0.5 * sin-like shape): use two curves that
        // cross so the difference is +a at 0 and -a at the top dose.
        let m = vec![emax(0.1, -0.2, 1e-3, 10.0), emax(0.0, 0.0, 1.0, 1.0)];
        let w = [0.5, 0.5];
        let r = d_inf(&m, &w, 0, (0.0, 1.0)).unwrap();
        assert!((r.value - 0.05).abs() < 1e-9);
        let signs: Vec<i8> = r.argmax_points.iter().map(|p| p.sign).collect();
        assert!(signs.contains(&1) && signs.contains(&-1), "{r:?}");
    }

    fn k2_models() -> impl Strategy<Value = (Vec<DoseResponseModel>, f64)> {
        (
            (-1.0..1.0f64, -2.0..2.0f64, 0.5..100.0f64, 0.3..5.0f64),
            (-1.0..1.0f64, -2.0..2.0f64, 0.5..100.0f64, 0.3..5.0f64),
            0.05..0.95f64,
        )
            .prop_map(|(a, b, p)| (vec![emax(a.0, a.1, a.2, a.3), emax(b.0, b.1, b.2, b.3)], p))
    }

    /// Independent refinement for the two-curve identity.
    fn max_abs_gap(a: &DoseResponseModel, b: &DoseResponseModel, range: (f64, f64)) -> f64 {
        let xs = grid(range, DEFAULT_GRID_POINTS);
        let f = |d: f64| a.value(d) - b.value(d);
        let mut best: f64 = 0.0;
        for t in 0..xs.len() {
            let lo = xs[t.saturating_sub(1)];
            let hi = xs[(t + 1).min(xs.len() - 1)];
            // ternary search on |f|
            let (mut l, mut h) = (lo, hi);
            for _ in 0..80 {
                let m1 = l + (h - l) / 3.0;
                let m2 = h - (h - l) / 3.0;
                if f(m1).abs() >= f(m2).abs() {
                    h = m2;
                } else {
                    l = m1;
                }
            }
            best = best.max(f(0.5 * (l + h)).abs()).max(f(xs[t]).abs());
        }
        best
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]
        #[test]
        fn two_group_identity((m, p) in k2_models()) {
            let w = [p, 1.0 - p];
            let r = d_inf(&m, &w, 0, (0.0, 150.0)).unwrap();
            let other = (1.0 - p) * max_abs_gap(&m[0], &m[1], (0.0, 150.0));
            prop_assert!((r.value - other).abs() <= 1e-12 * other.max(1.0), "{} vs {}", r.value, other);
        }

        #[test]
        fn translation_invariance(
            (m, p) in k2_models(), c in -3.0..3.0f64,
        ) {
            let w = [p, 1.0 - p];
            let shifted: Vec<_> = m.iter().map(|x| {
                let mut y = *x;
                y.params.e0 += c;
                y
            }).collect();
            let a = d_inf(&m, &w, 0, (0.0, 150.0)).unwrap().value;
            let b = d_inf(&shifted, &w, 0, (0.0, 150.0)).unwrap().value;
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }

        #[test]
        fn many_is_max_of_ones(
            a in (-1.0..1.0f64, -2.0..2.0f64, 0.5..100.0f64, 0.3..5.0f64),
            b in (-1.0..1.0f64, -2.0..2.0f64, 0.5..100.0f64, 0.3..5.0f64),
            c in (-1.0..1.0f64, -2.0..2.0f64, 0.5..100.0f64, 0.3..5.0f64),
        ) {
            let m = vec![emax(a.0, a.1, a.2, a.3), emax(b.0, b.1, b.2, b.3), emax(c.0, c.1, c.2, c.3)];
            let all = d_inf_inf(&m, &W, &[0, 1, 2], (0.0, 150.0)).unwrap().value;
            let ones = (0..3).map(|i| d_inf(&m, &W, i, (0.0, 150.0)).unwrap().value).fold(0.0, f64::max);
            prop_assert_eq!(all, ones);
        }
    }
}
