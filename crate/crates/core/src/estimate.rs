//! Maximum-likelihood fits per subgroup and the fit constrained to the
//! boundary `d(beta) = delta`.
//!
//! Errors are Gaussian and independent across subgroups, so the likelihood
//! factorizes and each subgroup is fitted separately by least squares on its
//! dose-group means. Variances use the MLE divisor `n_l`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{Dataset, GroupSummary, StudyDesign};
use crate::distance::{self, DistanceOptions, DistanceResult, DistanceTarget, PopulationCurve};
use crate::error::{Error, Result};
use crate::model::{DoseResponseModel, ModelFamily, ModelSpec};
use crate::optim::{levenberg_marquardt, projected_bfgs, BfgsOptions, LeastSquares, LmOptions};

/// Lower limit applied to fitted variances.
pub const SIGMA2_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub models: Vec<DoseResponseModel>,
    pub sigma2: Vec<f64>,
    pub loglik: f64,
    pub converged: Vec<bool>,
    pub iterations: Vec<usize>,
}

impl FitResult {
    /// Free parameter vectors, one per subgroup.
    pub fn betas(&self) -> Vec<Vec<f64>> {
        self.models.iter().map(|m| m.free_params()).collect()
    }

    pub fn all_converged(&self) -> bool {
        self.converged.iter().all(|&c| c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstrainedFitResult {
    /// Unconstrained statistic the case split was made on.
    pub statistic: f64,
    pub delta: f64,
    /// Constrained estimate; absent when the constraint was not applied.
    pub beta_tilde: Option<Vec<DoseResponseModel>>,
    /// Parameters the bootstrap samples from.
    pub beta_hathat: Vec<DoseResponseModel>,
    /// `|d(beta_tilde) - delta|` for the exact distance.
    pub constraint_residual: Option<f64>,
    pub active: bool,
    /// Variances re-profiled at `beta_hathat`.
    pub sigma2_profiled: Vec<f64>,
    pub loglik: f64,
}

/// Gaussian log-likelihood of all subgroups.
pub fn loglik(
    doses: &[f64],
    summaries: &[GroupSummary],
    models: &[DoseResponseModel],
    sigma2: &[f64],
) -> f64 {
    summaries
        .iter()
        .zip(models)
        .zip(sigma2)
        .map(|((s, m), &v)| {
            let n = s.n() as f64;
            -0.5 * n * (2.0 * std::f64::consts::PI * v).ln() - s.rss(doses, m) / (2.0 * v)
        })
        .sum()
}

fn profile_sigma2(doses: &[f64], summary: &GroupSummary, model: &DoseResponseModel) -> f64 {
    (summary.rss(doses, model) / summary.n() as f64).max(SIGMA2_FLOOR)
}

struct MeansProblem<'a> {
    doses: &'a [f64],
    summary: &'a GroupSummary,
    spec: ModelSpec,
}

impl LeastSquares for MeansProblem<'_> {
    fn dims(&self) -> (usize, usize) {
        (self.doses.len(), self.spec.n_params())
    }

    fn eval(&self, x: &[f64], r: &mut [f64], jac: &mut [f64]) -> bool {
        let p = x.len();
        let model = self.spec.model(x);
        let mut g = [0.0; 4];
        for (j, &d) in self.doses.iter().enumerate() {
            let w = (self.summary.counts[j] as f64).sqrt();
            r[j] = w * (self.summary.means[j] - model.value(d));
            model.gradient_into(d, &mut g[..p]);
            for c in 0..p {
                jac[j * p + c] = -w * g[c];
            }
        }
        r.iter().chain(jac.iter()).all(|v| v.is_finite())
    }

    fn scale(&self) -> f64 {
        self.summary
            .counts
            .iter()
            .zip(&self.summary.means)
            .map(|(&n, m)| n as f64 * m * m)
            .sum::<f64>()
            .sqrt()
    }
}

/// Deterministic start grid: placebo mean, signed range of the dose-group
/// means, ed50 at 10/25/50 % of the top dose and, with free Hill, h in
/// {0.5, 1, 2}.
pub fn start_grid(doses: &[f64], summary: &GroupSummary, spec: &ModelSpec) -> Vec<Vec<f64>> {
    let means = &summary.means;
    let lo = means.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let last = means[means.len() - 1];
    let e0 = means[0];
    let emax = if last >= e0 { hi - lo } else { lo - hi };
    let top = doses[doses.len() - 1];
    let hills: &[f64] = match spec.family {
        ModelFamily::EmaxFull => &[0.5, 1.0, 2.0],
        ModelFamily::EmaxFixedHill { .. } => &[f64::NAN],
    };
    let mut starts = Vec::new();
    for frac in [0.1, 0.25, 0.5] {
        for &h in hills {
            let mut x = vec![e0, emax, frac * top];
            if !h.is_nan() {
                x.push(h);
            }
            spec.clamp(&mut x);
            starts.push(x);
        }
    }
    starts
}

#[derive(Debug, Clone)]
pub(crate) struct SubgroupFit {
    pub model: DoseResponseModel,
    pub converged: bool,
    pub iterations: usize,
    pub starts: usize,
    pub rss: f64,
}

/// Fit one subgroup. A converged warm start is returned directly; otherwise
/// every grid start is run and the converged candidate with the smallest
/// residual wins (first index on ties). Without any converged candidate the
/// best one is returned with `converged == false`.
pub(crate) fn fit_subgroup(
    subgroup: usize,
    doses: &[f64],
    summary: &GroupSummary,
    spec: &ModelSpec,
    warm: Option<&[f64]>,
    opts: &LmOptions,
) -> Result<SubgroupFit> {
    if summary.counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::DegenerateDesign {
            subgroup: subgroup + 1,
        });
    }
    let problem = MeansProblem {
        doses,
        summary,
        spec: *spec,
    };
    let mut iterations = 0;
    let mut starts = 0;
    let mut best: Option<(bool, f64, Vec<f64>)> = None;
    let mut consider = |x0: &[f64], best: &mut Option<(bool, f64, Vec<f64>)>| {
        let res = levenberg_marquardt(&problem, x0, spec.lower(), spec.upper(), opts);
        iterations += res.iterations;
        starts += 1;
        let better = match best {
            None => true,
            Some((conv, ssr, _)) => {
                (res.converged && !*conv) || (res.converged == *conv && res.ssr < *ssr)
            }
        };
        if better && res.ssr.is_finite() {
            *best = Some((res.converged, res.ssr, res.x));
        }
    };
    if let Some(w) = warm {
        consider(w, &mut best);
        if matches!(best, Some((true, _, _))) {
            return Ok(finish(
                subgroup,
                doses,
                summary,
                spec,
                best.unwrap(),
                iterations,
                starts,
            ));
        }
        best = None;
    }
    for x0 in start_grid(doses, summary, spec) {
        consider(&x0, &mut best);
    }
    match best {
        Some(b) => Ok(finish(
            subgroup, doses, summary, spec, b, iterations, starts,
        )),
        None => Err(Error::NonConvergence {
            subgroup: subgroup + 1,
            starts,
            best: Vec::new(),
            rss: f64::INFINITY,
        }),
    }
}

fn finish(
    _subgroup: usize,
    doses: &[f64],
    summary: &GroupSummary,
    spec: &ModelSpec,
    best: (bool, f64, Vec<f64>),
    iterations: usize,
    starts: usize,
) -> SubgroupFit {
    let model = spec.model(&best.2);
    SubgroupFit {
        rss: summary.rss(doses, &model),
        model,
        converged: best.0,
        iterations,
        starts,
    }
}

/// Fit all subgroups from sufficient statistics. Non-converged subgroups are
/// flagged, not rejected.
pub(crate) fn fit_summaries(
    design: &StudyDesign,
    summaries: &[GroupSummary],
    specs: &[ModelSpec],
    warm: Option<&[DoseResponseModel]>,
    opts: &LmOptions,
) -> Result<(FitResult, Vec<SubgroupFit>)> {
    let doses = design.doses();
    let mut fits = Vec::with_capacity(summaries.len());
    for (l, (s, spec)) in summaries.iter().zip(specs).enumerate() {
        let w = warm.map(|w| w[l].free_params());
        fits.push(fit_subgroup(l, doses, s, spec, w.as_deref(), opts)?);
    }
    let models: Vec<_> = fits.iter().map(|f| f.model).collect();
    let sigma2: Vec<f64> = fits
        .iter()
        .zip(summaries)
        .map(|(f, s)| (f.rss / s.n() as f64).max(SIGMA2_FLOOR))
        .collect();
    let result = FitResult {
        loglik: loglik(doses, summaries, &models, &sigma2),
        converged: fits.iter().map(|f| f.converged).collect(),
        iterations: fits.iter().map(|f| f.iterations).collect(),
        models,
        sigma2,
    };
    Ok((result, fits))
}

fn check_specs(design: &StudyDesign, specs: &[ModelSpec]) -> Result<()> {
    if specs.len() != design.k() {
        return Err(Error::InvalidArgument(format!(
            "{} model families for {} subgroups",
            specs.len(),
            design.k()
        )));
    }
    for (l, spec) in specs.iter().enumerate() {
        if design.group_size(l) < spec.n_params() + 1 {
            return Err(Error::DegenerateDesign { subgroup: l + 1 });
        }
    }
    Ok(())
}

/// Fit from already validated sufficient statistics, failing on
/// non-convergence.
pub fn fit_mle_summaries(
    design: &StudyDesign,
    summaries: &[GroupSummary],
    specs: &[ModelSpec],
) -> Result<FitResult> {
    check_specs(design, specs)?;
    let (result, fits) = fit_summaries(design, summaries, specs, None, &LmOptions::default())?;
    if let Some((l, f)) = fits.iter().enumerate().find(|(_, f)| !f.converged) {
        return Err(Error::NonConvergence {
            subgroup: l + 1,
            starts: f.starts,
            best: f.model.free_params(),
            rss: f.rss,
        });
    }
    Ok(result)
}

/// Maximum-likelihood fit of every subgroup.
pub fn fit_mle(dataset: &Dataset, design: &StudyDesign, specs: &[ModelSpec]) -> Result<FitResult> {
    dataset.validate(design)?;
    fit_mle_summaries(design, &dataset.summarize(design), specs)
}

#[derive(Debug, Clone, Copy)]
pub struct ConstraintOptions {
    /// Largest accepted `|d(beta_tilde) - delta|`.
    pub tolerance: f64,
    /// Initial smoothing temperature relative to delta.
    pub tau_start: f64,
    /// Final smoothing temperature relative to delta.
    pub tau_min: f64,
    pub max_outer: usize,
    /// Iteration cap of each inner quasi-Newton solve.
    pub max_inner: usize,
    /// Outer and inner caps of the short runs that rank the starting points.
    pub screen_outer: usize,
    pub screen_inner: usize,
}

impl Default for ConstraintOptions {
    fn default() -> Self {
        ConstraintOptions {
            tolerance: 1e-4,
            tau_start: 0.05,
            tau_min: 1e-5,
            max_outer: 40,
            max_inner: 300,
            screen_outer: 3,
            screen_inner: 60,
        }
    }
}

/// The constrained problem in the concatenated free parameter vector.
struct Boundary<'a> {
    doses: &'a [f64],
    summaries: &'a [GroupSummary],
    specs: &'a [ModelSpec],
    weights: &'a [f64],
    subgroups: &'a [usize],
    range: (f64, f64),
    grid: Vec<f64>,
    precision: Vec<f64>,
    offsets: Vec<usize>,
    dim: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl<'a> Boundary<'a> {
    fn new(
        design: &'a StudyDesign,
        summaries: &'a [GroupSummary],
        specs: &'a [ModelSpec],
        sigma2: &[f64],
        subgroups: &'a [usize],
    ) -> Self {
        let mut offsets = Vec::with_capacity(specs.len() + 1);
        let mut lower = Vec::new();
        let mut upper = Vec::new();
        offsets.push(0);
        for s in specs {
            lower.extend_from_slice(s.lower());
            upper.extend_from_slice(s.upper());
            offsets.push(offsets.last().unwrap() + s.n_params());
        }
        let range = design.dose_range();
        Boundary {
            doses: design.doses(),
            summaries,
            specs,
            weights: design.weights(),
            subgroups,
            range,
            grid: distance::grid(range, DistanceOptions::default().grid_points),
            precision: sigma2.iter().map(|v| 1.0 / v).collect(),
            dim: *offsets.last().unwrap(),
            offsets,
            lower,
            upper,
        }
    }

    fn models(&self, theta: &[f64]) -> Vec<DoseResponseModel> {
        self.specs
            .iter()
            .enumerate()
            .map(|(l, s)| s.model(&theta[self.offsets[l]..self.offsets[l + 1]]))
            .collect()
    }

    fn pack(&self, models: &[DoseResponseModel]) -> Vec<f64> {
        models.iter().flat_map(|m| m.free_params()).collect()
    }

    /// Precision-weighted half residual sum of squares and its gradient.
    fn objective(&self, models: &[DoseResponseModel], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut value = 0.0;
        let mut g = [0.0; 4];
        for (l, m) in models.iter().enumerate() {
            let s = &self.summaries[l];
            let p = m.n_params();
            let off = self.offsets[l];
            for (j, &d) in self.doses.iter().enumerate() {
                let w = s.counts[j] as f64 * self.precision[l];
                let r = s.means[j] - m.value(d);
                value += 0.5 * w * r * r;
                m.gradient_into(d, &mut g[..p]);
                for c in 0..p {
                    grad[off + c] -= w * r * g[c];
                }
            }
        }
        value
    }

    /// Gauss-Newton Hessian of the objective (block diagonal).
    fn gn_hessian(&self, models: &[DoseResponseModel]) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.dim, self.dim);
        let mut g = [0.0; 4];
        for (l, m) in models.iter().enumerate() {
            let p = m.n_params();
            let off = self.offsets[l];
            for (j, &d) in self.doses.iter().enumerate() {
                let w = self.summaries[l].counts[j] as f64 * self.precision[l];
                m.gradient_into(d, &mut g[..p]);
                for a in 0..p {
                    for b in 0..p {
                        h[(off + a, off + b)] += w * g[a] * g[b];
                    }
                }
            }
        }
        h
    }

    /// Add `coef * grad_theta (mu_i - mu_bar)(d)` to `out`.
    fn add_difference_gradient(
        &self,
        models: &[DoseResponseModel],
        i: usize,
        d: f64,
        coef: f64,
        out: &mut [f64],
    ) {
        let mut g = [0.0; 4];
        for (l, m) in models.iter().enumerate() {
            let a = coef * (if l == i { 1.0 } else { 0.0 } - self.weights[l]);
            if a == 0.0 {
                continue;
            }
            let p = m.n_params();
            m.gradient_into(d, &mut g[..p]);
            for c in 0..p {
                out[self.offsets[l] + c] += a * g[c];
            }
        }
    }

    /// Log-sum-exp surrogate of the distance over the scan grid, minus delta.
    fn smooth_constraint(
        &self,
        models: &[DoseResponseModel],
        tau: f64,
        delta: f64,
        grad: &mut [f64],
    ) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let g = self.grid.len();
        let k = models.len();
        let mut mu = vec![0.0; k * g];
        let mut bar = vec![0.0; g];
        for (l, m) in models.iter().enumerate() {
            for (t, &x) in self.grid.iter().enumerate() {
                let v = m.value(x);
                mu[l * g + t] = v;
                bar[t] += self.weights[l] * v;
            }
        }
        let mut fmax: f64 = 0.0;
        for &i in self.subgroups {
            for t in 0..g {
                fmax = fmax.max((mu[i * g + t] - bar[t]).abs());
            }
        }
        let cut = fmax - 40.0 * tau;
        let mut total = 0.0;
        // per grid point: coefficient on each subgroup's difference gradient
        let mut terms: Vec<(usize, usize, f64)> = Vec::new();
        for &i in self.subgroups {
            for t in 0..g {
                let f = mu[i * g + t] - bar[t];
                for sign in [1.0, -1.0] {
                    if sign * f >= cut {
                        let w = ((sign * f - fmax) / tau).exp();
                        total += w;
                        terms.push((i, t, sign * w));
                    }
                }
            }
        }
        for (i, t, sw) in terms {
            self.add_difference_gradient(models, i, self.grid[t], sw / total, grad);
        }
        fmax + tau * total.ln() - delta
    }

    fn exact(&self, models: &[DoseResponseModel]) -> DistanceResult {
        let curve = PopulationCurve::new_unchecked(models, self.weights);
        distance::max_deviation(
            &curve,
            self.subgroups,
            self.range,
            &DistanceOptions::default(),
        )
    }

    fn clamp(&self, theta: &mut [f64]) {
        for (t, (lo, hi)) in theta.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *t = t.clamp(*lo, *hi);
        }
    }
}

/// Regularized inverse of the sub-block selected by `mask`, embedded in a
/// zero matrix.
fn masked_inverse(m: &DMatrix<f64>, mask: &[bool]) -> DMatrix<f64> {
    let n = m.nrows();
    let idx: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    let q = idx.len();
    let mut out = DMatrix::zeros(n, n);
    if q == 0 {
        return out;
    }
    let mut sub = DMatrix::from_fn(q, q, |a, b| m[(idx[a], idx[b])]);
    let scale = (0..q)
        .map(|i| sub[(i, i)].abs())
        .fold(0.0, f64::max)
        .max(1e-300);
    for i in 0..q {
        sub[(i, i)] += 1e-10 * scale;
    }
    let inv = match sub.clone().cholesky() {
        Some(ch) => ch.inverse(),
        None => DMatrix::identity(q, q) / scale,
    };
    for a in 0..q {
        for b in 0..q {
            out[(idx[a], idx[b])] = inv[(a, b)];
        }
    }
    out
}

/// Starting points for the constrained search: the unconstrained estimate
/// and, for every target subgroup and sign, a linearized step that puts the
/// signed difference at its current maximizer on `delta`.
fn constraint_starts(
    boundary: &Boundary,
    models: &[DoseResponseModel],
    delta: f64,
) -> Vec<Vec<f64>> {
    let theta = boundary.pack(models);
    let mut starts = vec![theta.clone()];
    let movable: Vec<bool> = (0..boundary.dim)
        .map(|i| boundary.lower[i] < boundary.upper[i])
        .collect();
    let metric = masked_inverse(&boundary.gn_hessian(models), &movable);
    let curve = PopulationCurve::new_unchecked(models, boundary.weights);
    for &i in boundary.subgroups {
        for sign in [1.0, -1.0] {
            let (x, f) = boundary
                .grid
                .iter()
                .map(|&x| (x, sign * curve.difference(i, x)))
                .fold((boundary.range.0, f64::NEG_INFINITY), |acc, v| {
                    if v.1 > acc.1 {
                        v
                    } else {
                        acc
                    }
                });
            let mut a = vec![0.0; boundary.dim];
            boundary.add_difference_gradient(models, i, x, sign, &mut a);
            let v = &metric * DVector::from_column_slice(&a);
            let denom: f64 = a.iter().zip(v.iter()).map(|(p, q)| p * q).sum();
            if !(denom > 0.0) {
                continue;
            }
            let mut start: Vec<f64> = theta
                .iter()
                .zip(v.iter())
                .map(|(t, vi)| t + vi * (delta - f) / denom)
                .collect();
            boundary.clamp(&mut start);
            if !starts.contains(&start) {
                starts.push(start);
            }
        }
    }
    starts
}

/// Augmented Lagrangian on the smoothed constraint followed by a Newton
/// projection onto the exact boundary. Returns the iterate and `|d - delta|`.
fn solve_boundary(
    boundary: &Boundary,
    summaries: &[GroupSummary],
    sigma2: &[f64],
    mut theta: Vec<f64>,
    delta: f64,
    opts: &ConstraintOptions,
) -> (Vec<f64>, f64) {
    let n = boundary.dim;
    let rho0: f64 = summaries
        .iter()
        .zip(sigma2)
        .map(|(s, v)| s.n() as f64 / v)
        .sum::<f64>()
        .min(1e12);
    let mut rho = rho0;
    let mut lambda = 0.0;
    let mut tau = opts.tau_start * delta;
    let tau_min = opts.tau_min * delta;
    let mut gc = vec![0.0; n];
    let mut c_prev = f64::INFINITY;
    let movable: Vec<bool> = (0..n)
        .map(|i| boundary.lower[i] < boundary.upper[i])
        .collect();

    for _ in 0..opts.max_outer {
        let models = boundary.models(&theta);
        let c0 = boundary.smooth_constraint(&models, tau, delta, &mut gc);
        let gcv = DVector::from_column_slice(&gc);
        let h = boundary.gn_hessian(&models) + (&gcv * gcv.transpose()) * rho;
        let h0 = masked_inverse(&h, &movable);
        let _ = c0;
        let (lam, r, t) = (lambda, rho, tau);
        let mut gf = vec![0.0; n];
        let mut gcc = vec![0.0; n];
        let lagrangian = |x: &[f64], grad: &mut [f64]| -> f64 {
            let ms = boundary.models(x);
            let f = boundary.objective(&ms, &mut gf);
            let c = boundary.smooth_constraint(&ms, t, delta, &mut gcc);
            let mult = lam + r * c;
            for i in 0..grad.len() {
                grad[i] = gf[i] + mult * gcc[i];
            }
            let v = f + lam * c + 0.5 * r * c * c;
            if v.is_finite() {
                v
            } else {
                f64::INFINITY
            }
        };
        let bopts = BfgsOptions {
            max_iter: opts.max_inner,
            gtol: 1e-6 * (rho * delta + 1.0),
            ftol: 1e-15,
        };
        let res = projected_bfgs(
            lagrangian,
            &theta,
            &boundary.lower,
            &boundary.upper,
            h0,
            &bopts,
        );
        theta = res.x;
        let models = boundary.models(&theta);
        let c = boundary.smooth_constraint(&models, tau, delta, &mut gc);
        let done = tau <= tau_min && c.abs() <= 1e-10 * delta.max(1.0);
        if done {
            break;
        }
        lambda += rho * c;
        if c.abs() > 0.25 * c_prev.abs() {
            rho = (rho * 10.0).min(1e6 * rho0);
        }
        c_prev = c;
        tau = (tau * 0.1).max(tau_min);
    }

    // Newton projection onto the exact boundary along the envelope gradient,
    // holding variables whose step would leave the box.
    let metric = boundary.gn_hessian(&boundary.models(&theta));
    let mut residual = f64::INFINITY;
    for _ in 0..100 {
        let models = boundary.models(&theta);
        let exact = boundary.exact(&models);
        let gap = delta - exact.value;
        residual = gap.abs();
        if residual <= 1e-13 * delta.max(1.0) {
            break;
        }
        let top = exact
            .argmax_points
            .iter()
            .max_by(|a, b| a.difference.abs().total_cmp(&b.difference.abs()))
            .copied()
            .expect("argmax set is never empty");
        let mut a = vec![0.0; n];
        boundary.add_difference_gradient(&models, top.subgroup, top.dose, top.sign as f64, &mut a);
        let av = DVector::from_column_slice(&a);
        let mut mask = movable.clone();
        let mut step = None;
        for _ in 0..=n {
            let v = masked_inverse(&metric, &mask) * &av;
            let denom = av.dot(&v);
            if !(denom > 0.0) {
                break;
            }
            let s: Vec<f64> = v.iter().map(|vi| vi * gap / denom).collect();
            let mut changed = false;
            for i in 0..n {
                let out = (theta[i] <= boundary.lower[i] && s[i] < 0.0)
                    || (theta[i] >= boundary.upper[i] && s[i] > 0.0);
                if mask[i] && out {
                    mask[i] = false;
                    changed = true;
                }
            }
            if !changed {
                step = Some(s);
                break;
            }
        }
        let Some(s) = step else {
            break;
        };
        for i in 0..n {
            theta[i] += s[i];
        }
        boundary.clamp(&mut theta);
    }

    (theta, residual)
}

/// Constrained estimate from an unconstrained fit. When the fitted statistic
/// is at least `delta` the unconstrained parameters are returned unchanged.
pub fn constrain(
    design: &StudyDesign,
    summaries: &[GroupSummary],
    specs: &[ModelSpec],
    fit: &FitResult,
    target: &DistanceTarget,
    delta: f64,
    opts: &ConstraintOptions,
) -> Result<ConstrainedFitResult> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "delta must be > 0, got {delta}"
        )));
    }
    target.validate(design.k())?;
    let subgroups = target.subgroups();
    let boundary = Boundary::new(design, summaries, specs, &fit.sigma2, subgroups);
    let statistic = boundary.exact(&fit.models).value;
    if statistic >= delta {
        return Ok(ConstrainedFitResult {
            statistic,
            delta,
            beta_tilde: None,
            beta_hathat: fit.models.clone(),
            constraint_residual: None,
            active: false,
            sigma2_profiled: fit.sigma2.clone(),
            loglik: fit.loglik,
        });
    }

    let theta_hat = boundary.pack(&fit.models);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut worst_residual = 0.0_f64;
    let mut last = theta_hat.clone();
    let mut scratch = vec![0.0; boundary.dim];
    let mut consider = |theta: Vec<f64>, residual: f64, best: &mut Option<(f64, Vec<f64>)>| {
        if residual <= opts.tolerance {
            let value = boundary.objective(&boundary.models(&theta), &mut scratch);
            if best.as_ref().is_none_or(|(v, _)| value < *v) {
                *best = Some((value, theta));
            }
        } else {
            worst_residual = worst_residual.max(residual);
            last = theta;
        }
    };
    let screen = ConstraintOptions {
        max_outer: opts.screen_outer,
        max_inner: opts.screen_inner,
        ..*opts
    };
    for start in constraint_starts(&boundary, &fit.models, delta) {
        let (theta, residual) =
            solve_boundary(&boundary, summaries, &fit.sigma2, start, delta, &screen);
        consider(theta, residual, &mut best);
    }
    if let Some((_, seed)) = best.clone() {
        let (theta, residual) =
            solve_boundary(&boundary, summaries, &fit.sigma2, seed, delta, opts);
        consider(theta, residual, &mut best);
    }
    let Some((_, theta)) = best else {
        return Err(Error::ConstraintInfeasible {
            delta,
            residual: worst_residual,
            last,
        });
    };
    let models = boundary.models(&theta);
    let residual = (delta - boundary.exact(&models).value).abs();
    let doses = design.doses();
    let sigma2: Vec<f64> = summaries
        .iter()
        .zip(&models)
        .map(|(s, m)| profile_sigma2(doses, s, m))
        .collect();
    Ok(ConstrainedFitResult {
        statistic,
        delta,
        beta_tilde: Some(models.clone()),
        beta_hathat: models.clone(),
        constraint_residual: Some(residual),
        active: true,
        loglik: loglik(doses, summaries, &models, &sigma2),
        sigma2_profiled: sigma2,
    })
}

/// Unconstrained fit followed by the constrained estimate on `d = delta`.
pub fn fit_constrained(
    dataset: &Dataset,
    design: &StudyDesign,
    specs: &[ModelSpec],
    target: &DistanceTarget,
    delta: f64,
) -> Result<ConstrainedFitResult> {
    dataset.validate(design)?;
    let summaries = dataset.summarize(design);
    let fit = fit_mle_summaries(design, &summaries, specs)?;
    constrain(
        design,
        &summaries,
        specs,
        &fit,
        target,
        delta,
        &ConstraintOptions::default(),
    )
}
