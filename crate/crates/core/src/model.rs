//! Parametric dose-response curves.
//!
//! The only family shipped is the E-max curve
//!
//! ```text
//! mu(d) = e0 + emax * d^h / (d^h + ed50^h)
//! ```
//!
//! either with all four parameters free or with the Hill coefficient `h`
//! held at a known constant. Parameters are exposed to the optimizers as a
//! "free vector" in the order `(e0, emax, ed50[, h])`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of an E-max curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaxParams {
    /// Placebo response.
    pub e0: f64,
    /// Maximum effect over placebo.
    pub emax: f64,
    /// Dose producing half of `emax`.
    pub ed50: f64,
    /// Hill coefficient.
    pub h: f64,
}

impl EmaxParams {
    pub fn new(e0: f64, emax: f64, ed50: f64, h: f64) -> Result<Self> {
        let p = EmaxParams { e0, emax, ed50, h };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.e0, self.emax, self.ed50, self.h]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Model(format!("non-finite parameter in {self:?}")));
        }
        if self.ed50 <= 0.0 {
            return Err(Error::Model(format!("ed50 must be > 0, got {}", self.ed50)));
        }
        if self.h <= 0.0 {
            return Err(Error::Model(format!("h must be > 0, got {}", self.h)));
        }
        Ok(())
    }

    /// Fraction of the maximum effect reached at dose `d`, and its complement.
    #[inline]
    fn occupancy(&self, d: f64) -> (f64, f64) {
        if d <= 0.0 {
            return (0.0, 1.0);
        }
        if self.h == 1.0 {
            let denom = d + self.ed50;
            return (d / denom, self.ed50 / denom);
        }
        // s = 1 / (1 + (ed50/d)^h), written in log space to avoid overflow.
        let t = self.h * (self.ed50.ln() - d.ln());
        if t >= 0.0 {
            let e = (-t).exp();
            (e / (1.0 + e), 1.0 / (1.0 + e))
        } else {
            let e = t.exp();
            (1.0 / (1.0 + e), e / (1.0 + e))
        }
    }

    /// Curve value without argument checks.
    #[inline]
    pub fn value(&self, d: f64) -> f64 {
        if d <= 0.0 {
            return self.e0;
        }
        self.e0 + self.emax * self.occupancy(d).0
    }

    /// Gradient with respect to `(e0, emax, ed50, h)`.
    ///
    /// At `d = 0` the Hill derivative is defined as its limit, 0.
    #[inline]
    pub fn gradient4(&self, d: f64) -> [f64; 4] {
        if d <= 0.0 {
            return [1.0, 0.0, 0.0, 0.0];
        }
        let (s, sc) = self.occupancy(d);
        let ss = s * sc;
        let d_ed50 = -self.emax * self.h * ss / self.ed50;
        let d_h = self.emax * ss * (d.ln() - self.ed50.ln());
        [1.0, s, d_ed50, d_h]
    }
}

/// Curve family. `EmaxFixedHill` treats `h` as known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelFamily {
    EmaxFull,
    EmaxFixedHill { hill: f64 },
}

impl ModelFamily {
    /// Number of free parameters.
    pub fn n_params(&self) -> usize {
        match self {
            ModelFamily::EmaxFull => 4,
            ModelFamily::EmaxFixedHill { .. } => 3,
        }
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            ModelFamily::EmaxFull => &["e0", "emax", "ed50", "h"],
            ModelFamily::EmaxFixedHill { .. } => &["e0", "emax", "ed50"],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelFamily::EmaxFull => "emax_full",
            ModelFamily::EmaxFixedHill { .. } => "emax_fixed_hill",
        }
    }

    /// Build full parameters from a free vector.
    pub fn params_from_free(&self, free: &[f64]) -> EmaxParams {
        match *self {
            ModelFamily::EmaxFull => EmaxParams {
                e0: free[0],
                emax: free[1],
                ed50: free[2],
                h: free[3],
            },
            ModelFamily::EmaxFixedHill { hill } => EmaxParams {
                e0: free[0],
                emax: free[1],
                ed50: free[2],
                h: hill,
            },
        }
    }

    pub fn free_from_params(&self, p: &EmaxParams) -> Vec<f64> {
        match self {
            ModelFamily::EmaxFull => vec![p.e0, p.emax, p.ed50, p.h],
            ModelFamily::EmaxFixedHill { .. } => vec![p.e0, p.emax, p.ed50],
        }
    }

    fn validate(&self) -> Result<()> {
        if let ModelFamily::EmaxFixedHill { hill } = *self {
            if !(hill.is_finite() && hill > 0.0) {
                return Err(Error::Model(format!("fixed hill must be > 0, got {hill}")));
            }
        }
        Ok(())
    }
}

/// Closed box bounds on `(e0, emax, ed50, h)`. The `h` slot is ignored for
/// fixed-Hill families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamBounds {
    pub lower: [f64; 4],
    pub upper: [f64; 4],
}

impl ParamBounds {
    /// Default box for a dose range ending at `max_dose`.
    pub fn default_for(max_dose: f64) -> Self {
        let top = if max_dose > 0.0 {
            10.0 * max_dose
        } else {
            10.0
        };
        ParamBounds {
            lower: [-10.0, -10.0, 1e-3, 0.1],
            upper: [10.0, 10.0, top, 10.0],
        }
    }

    pub fn new(lower: [f64; 4], upper: [f64; 4]) -> Result<Self> {
        for i in 0..4 {
            if !(lower[i].is_finite() && upper[i].is_finite() && lower[i] <= upper[i]) {
                return Err(Error::Model(format!(
                    "bad bound for parameter {i}: [{}, {}]",
                    lower[i], upper[i]
                )));
            }
        }
        if lower[2] <= 0.0 || lower[3] <= 0.0 {
            return Err(Error::Model("ed50 and h lower bounds must be > 0".into()));
        }
        Ok(ParamBounds { lower, upper })
    }

    pub fn contains(&self, p: &EmaxParams, family: &ModelFamily) -> bool {
        let v = [p.e0, p.emax, p.ed50, p.h];
        (0..family.n_params()).all(|i| v[i] >= self.lower[i] && v[i] <= self.upper[i])
    }
}

/// A family together with the box the optimizers must respect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: ModelFamily,
    pub bounds: ParamBounds,
}

impl ModelSpec {
    pub fn new(family: ModelFamily, bounds: ParamBounds) -> Result<Self> {
        family.validate()?;
        Ok(ModelSpec { family, bounds })
    }

    pub fn emax_full(max_dose: f64) -> Self {
        ModelSpec {
            family: ModelFamily::EmaxFull,
            bounds: ParamBounds::default_for(max_dose),
        }
    }

    pub fn emax_fixed_hill(hill: f64, max_dose: f64) -> Self {
        ModelSpec {
            family: ModelFamily::EmaxFixedHill { hill },
            bounds: ParamBounds::default_for(max_dose),
        }
    }

    pub fn n_params(&self) -> usize {
        self.family.n_params()
    }

    pub fn lower(&self) -> &[f64] {
        &self.bounds.lower[..self.n_params()]
    }

    pub fn upper(&self) -> &[f64] {
        &self.bounds.upper[..self.n_params()]
    }

    /// Clamp a free vector into the box in place.
    pub fn clamp(&self, free: &mut [f64]) {
        for (i, v) in free.iter_mut().enumerate() {
            *v = v.clamp(self.bounds.lower[i], self.bounds.upper[i]);
        }
    }

    pub fn model(&self, free: &[f64]) -> DoseResponseModel {
        DoseResponseModel {
            spec: *self,
            params: self.family.params_from_free(free),
        }
    }
}

/// A curve family with concrete parameters inside its bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoseResponseModel {
    pub spec: ModelSpec,
    pub params: EmaxParams,
}

impl DoseResponseModel {
    pub fn new(spec: ModelSpec, params: EmaxParams) -> Result<Self> {
        spec.family.validate()?;
        params.validate()?;
        if let ModelFamily::EmaxFixedHill { hill } = spec.family {
            if params.h != hill {
                return Err(Error::Model(format!(
                    "h = {} does not match fixed hill {hill}",
                    params.h
                )));
            }
        }
        if !spec.bounds.contains(&params, &spec.family) {
            return Err(Error::Model(format!(
                "{params:?} outside bounds {:?}",
                spec.bounds
            )));
        }
        Ok(DoseResponseModel { spec, params })
    }

    /// E-max model with default bounds for `max_dose`; fixed Hill when `fixed_hill`.
    pub fn emax(params: EmaxParams, fixed_hill: bool, max_dose: f64) -> Result<Self> {
        let spec = if fixed_hill {
            ModelSpec::emax_fixed_hill(params.h, max_dose)
        } else {
            ModelSpec::emax_full(max_dose)
        };
        Self::new(spec, params)
    }

    pub fn family(&self) -> ModelFamily {
        self.spec.family
    }

    pub fn n_params(&self) -> usize {
        self.spec.n_params()
    }

    pub fn free_params(&self) -> Vec<f64> {
        self.spec.family.free_from_params(&self.params)
    }

    /// Response at dose `d`.
    pub fn evaluate(&self, d: f64) -> Result<f64> {
        check_dose(d)?;
        self.params.validate()?;
        Ok(self.params.value(d))
    }

    /// Unchecked evaluation for inner loops.
    #[inline]
    pub fn value(&self, d: f64) -> f64 {
        self.params.value(d)
    }

    /// Gradient with respect to the free parameters.
    pub fn gradient(&self, d: f64) -> Result<Vec<f64>> {
        check_dose(d)?;
        self.params.validate()?;
        let mut g = vec![0.0; self.n_params()];
        self.gradient_into(d, &mut g);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Model(format!(
                "singular gradient at d = {d} for {:?}",
                self.params
            )));
        }
        Ok(g)
    }

    /// Write the free-parameter gradient into `out` (length `n_params`).
    #[inline]
    pub fn gradient_into(&self, d: f64, out: &mut [f64]) {
        let g = self.params.gradient4(d);
        let n = out.len();
        out.copy_from_slice(&g[..n]);
    }
}

fn check_dose(d: f64) -> Result<()> {
    if !d.is_finite() || d < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "dose must be finite and >= 0, got {d}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn central_diff(p: EmaxParams, d: f64, idx: usize) -> f64 {
        let step = 1e-6;
        let bump = |delta: f64| {
            let mut v = [p.e0, p.emax, p.ed50, p.h];
            v[idx] += delta;
            EmaxParams {
                e0: v[0],
                emax: v[1],
                ed50: v[2],
                h: v[3],
            }
            .value(d)
        };
        (bump(step) - bump(-step)) / (2.0 * step)
    }

    #[test]
    fn half_effect_at_ed50() {
        let m =
            DoseResponseModel::emax(EmaxParams::new(0.0, 0.46, 25.0, 1.0).unwrap(), true, 150.0)
                .unwrap();
        assert!((m.evaluate(25.0).unwrap() - 0.23).abs() < 1e-15);
        let g = m.gradient(25.0).unwrap();
        assert!((g[1] - 0.5).abs() < 1e-15);
        // d/d(ed50) against a central difference
        let fd = central_diff(m.params, 25.0, 2);
        assert!((g[2] - fd).abs() <= 1e-4 * fd.abs());
        assert!((g[2] - (-0.46 * 25.0 / 50.0_f64.powi(2))).abs() < 1e-15);
    }

    #[test]
    fn placebo_is_e0() {
        let p = EmaxParams::new(0.31, -2.0, 3.0, 0.4).unwrap();
        let m = DoseResponseModel::emax(p, false, 4.0).unwrap();
        assert_eq!(m.evaluate(0.0).unwrap(), 0.31);
        let fixed =
            DoseResponseModel::emax(EmaxParams::new(0.2, 1.0, 3.0, 1.0).unwrap(), true, 4.0)
                .unwrap();
        assert_eq!(fixed.gradient(0.0).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(m.gradient(0.0).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn case_study_japanese_curve_at_four() {
        // 0.38 + 0.66 * 4 / 7.94, by hand
        let p = EmaxParams::new(0.38, 0.66, 3.94, 1.0).unwrap();
        let v = p.value(4.0);
        assert!((v - 0.712_493_702_770_781).abs() < 1e-12, "{v}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = DoseResponseModel::emax(EmaxParams::new(0.0, 0.4, 5.0, 1.0).unwrap(), true, 10.0)
            .unwrap();
        assert!(m.evaluate(-1.0).is_err());
        assert!(m.evaluate(f64::NAN).is_err());
        assert!(EmaxParams::new(f64::INFINITY, 0.4, 5.0, 1.0).is_err());
        assert!(EmaxParams::new(0.0, 0.4, 0.0, 1.0).is_err());
        let mut bad = m;
        bad.params.emax = f64::NAN;
        assert!(bad.evaluate(1.0).is_err());
        // h must match the fixed Hill coefficient
        let spec = ModelSpec::emax_fixed_hill(1.0, 10.0);
        assert!(
            DoseResponseModel::new(spec, EmaxParams::new(0.0, 0.4, 5.0, 2.0).unwrap()).is_err()
        );
        // outside the default box
        assert!(
            DoseResponseModel::new(spec, EmaxParams::new(50.0, 0.4, 5.0, 1.0).unwrap()).is_err()
        );
    }

    #[test]
    fn saturates_at_e0_plus_emax() {
        let p = EmaxParams::new(0.1, 0.46, 25.0, 1.7).unwrap();
        assert!((p.value(1e9) - 0.56).abs() <= 1e-6 * 0.46);
        let p = EmaxParams::new(0.1, -3.0, 0.8, 0.3).unwrap();
        // slow Hill: 1e9^0.3 ~ 500, so only check the trend
        assert!(p.value(1e9) < p.value(1e3));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn gradient_matches_finite_differences(
            e0 in -2.0..2.0f64,
            emax in -3.0..3.0f64,
            ed50 in 0.5..200.0f64,
            h in 0.3..6.0f64,
            d in 0.0..300.0f64,
        ) {
            let p = EmaxParams::new(e0, emax, ed50, h).unwrap();
            prop_assert!(p.value(d).is_finite());
            let g = p.gradient4(d);
            for (idx, gi) in g.iter().enumerate() {
                let fd = central_diff(p, d, idx);
                let scale = fd.abs().max(1e-4);
                prop_assert!((gi - fd).abs() <= 1e-4 * scale,
                    "param {} analytic {} fd {} at {:?} d={}", idx, gi, fd, p, d);
            }
        }

        #[test]
        fn monotone_in_dose_for_positive_emax(
            emax in 0.01..3.0f64, ed50 in 0.5..100.0f64, h in 0.2..5.0f64,
            a in 0.0..200.0f64, b in 0.0..200.0f64,
        ) {
            let p = EmaxParams::new(0.0, emax, ed50, h).unwrap();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(p.value(lo) <= p.value(hi));
        }
    }
}
