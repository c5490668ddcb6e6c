//! Small dense optimizers: bounded Levenberg-Marquardt for the per-subgroup
//! least-squares fits and a box-projected BFGS used inside the augmented
//! Lagrangian of the constrained fit.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iter: usize,
    /// Scaled-gradient (cosine) level at which the result counts as converged.
    pub gtol: f64,
    /// Iteration stops once the cosine falls below this.
    pub stop_gtol: f64,
    pub xtol: f64,
    pub ftol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            max_iter: 200,
            gtol: 1e-6,
            stop_gtol: 1e-12,
            xtol: 1e-12,
            ftol: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmResult {
    pub x: Vec<f64>,
    /// Sum of squared residuals.
    pub ssr: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// A least-squares problem with an analytic Jacobian (row-major, `m x n`).
pub trait LeastSquares {
    fn dims(&self) -> (usize, usize);
    /// Fill residuals and Jacobian. Returns `false` on non-finite output.
    fn eval(&self, x: &[f64], r: &mut [f64], jac: &mut [f64]) -> bool;
    /// Magnitude of the data; residual norms below `1e-13` of it count as zero.
    fn scale(&self) -> f64 {
        0.0
    }
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lower[i], upper[i]);
    }
}

/// Gradient with components removed where a bound blocks descent.
fn projected_gradient(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            if (x[i] <= lower[i] && g[i] > 0.0) || (x[i] >= upper[i] && g[i] < 0.0) {
                0.0
            } else {
                g[i]
            }
        })
        .collect()
}

/// Largest cosine between a Jacobian column and the residual vector, over
/// columns not blocked by a bound.
fn scaled_gradient(
    x: &[f64],
    r: &[f64],
    jac: &[f64],
    lower: &[f64],
    upper: &[f64],
    scale: f64,
) -> f64 {
    let n = x.len();
    let m = r.len();
    let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    if rnorm <= (1e-13 * scale).max(1e-150) {
        return 0.0;
    }
    let mut g = vec![0.0; n];
    let mut cn = vec![0.0; n];
    for i in 0..m {
        for j in 0..n {
            g[j] += jac[i * n + j] * r[i];
            cn[j] += jac[i * n + j] * jac[i * n + j];
        }
    }
    let pg = projected_gradient(x, &g, lower, upper);
    (0..n)
        .map(|j| {
            if cn[j] > 0.0 {
                pg[j].abs() / (cn[j].sqrt() * rnorm)
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max)
}

/// Bounded Levenberg-Marquardt. Steps are projected onto the box; the
/// stationarity test uses the projected gradient.
pub fn levenberg_marquardt<P: LeastSquares>(
    problem: &P,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &LmOptions,
) -> LmResult {
    let (m, n) = problem.dims();
    let mut x = x0.to_vec();
    project(&mut x, lower, upper);
    let mut r = vec![0.0; m];
    let mut jac = vec![0.0; m * n];
    let mut r_new = vec![0.0; m];
    let mut jac_new = vec![0.0; m * n];
    if !problem.eval(&x, &mut r, &mut jac) {
        return LmResult {
            x,
            ssr: f64::INFINITY,
            converged: false,
            iterations: 0,
        };
    }
    let mut ssr: f64 = r.iter().map(|v| v * v).sum();
    let mut lambda = -1.0;
    let mut nu = 2.0;
    let mut stop = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let jm = DMatrix::from_row_slice(m, n, &jac);
        let a = jm.transpose() * &jm;
        let g: Vec<f64> = (jm.transpose() * DVector::from_column_slice(&r))
            .iter()
            .copied()
            .collect();
        if scaled_gradient(&x, &r, &jac, lower, upper, problem.scale()) <= opts.stop_gtol {
            break;
        }
        let blocked: Vec<bool> = (0..n)
            .map(|j| (x[j] <= lower[j] && g[j] > 0.0) || (x[j] >= upper[j] && g[j] < 0.0))
            .collect();
        let diag_max = (0..n).map(|j| a[(j, j)]).fold(0.0, f64::max).max(1e-300);
        if lambda < 0.0 {
            lambda = 1e-3 * diag_max;
        }

        let mut accepted = false;
        while !accepted {
            // variables held at a bound by the gradient stay fixed this step
            let mut damped = a.clone();
            let mut rhs = -DVector::from_column_slice(&g);
            for j in 0..n {
                damped[(j, j)] += lambda * a[(j, j)].max(1e-12 * diag_max);
                if blocked[j] {
                    for c in 0..n {
                        damped[(j, c)] = 0.0;
                        damped[(c, j)] = 0.0;
                    }
                    damped[(j, j)] = 1.0;
                    rhs[j] = 0.0;
                }
            }
            let step = match damped.cholesky() {
                Some(ch) => ch.solve(&rhs),
                None => {
                    lambda *= nu;
                    nu *= 2.0;
                    if lambda > 1e20 * diag_max {
                        break;
                    }
                    continue;
                }
            };
            let mut x_new: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            project(&mut x_new, lower, upper);
            let s = DVector::from_iterator(n, x_new.iter().zip(&x).map(|(a, b)| a - b));
            let snorm = s.norm();
            let xnorm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if snorm <= opts.xtol * (xnorm + opts.xtol) {
                stop = true;
                break;
            }
            let ok = problem.eval(&x_new, &mut r_new, &mut jac_new);
            let ssr_new: f64 = if ok {
                r_new.iter().map(|v| v * v).sum()
            } else {
                f64::INFINITY
            };
            // predicted reduction of the linear model, in ssr units
            let js = &jm * &s;
            let predicted = -(2.0 * DVector::from_column_slice(&g).dot(&s) + js.norm_squared());
            if ssr_new < ssr {
                let actual = ssr - ssr_new;
                let rho = if predicted > 0.0 {
                    actual / predicted
                } else {
                    1.0
                };
                lambda *= (1.0 / 3.0f64).max(1.0 - (2.0 * rho - 1.0).powi(3));
                nu = 2.0;
                std::mem::swap(&mut x, &mut x_new);
                std::mem::swap(&mut r, &mut r_new);
                std::mem::swap(&mut jac, &mut jac_new);
                let small = actual <= opts.ftol * ssr && predicted <= opts.ftol * ssr;
                ssr = ssr_new;
                accepted = true;
                if small || snorm <= opts.xtol * (xnorm + opts.xtol) {
                    stop = true;
                }
            } else {
                lambda *= nu;
                nu *= 2.0;
                if lambda > 1e20 * diag_max {
                    break;
                }
            }
        }
        if stop || !accepted {
            break;
        }
    }
    // Near the optimum the objective stops resolving weak directions in
    // floating point; Gauss-Newton steps judged by the gradient finish them.
    let mut cos = scaled_gradient(&x, &r, &jac, lower, upper, problem.scale());
    for _ in 0..8 {
        if !cos.is_finite() || cos <= 1e-15 {
            break;
        }
        let jm = DMatrix::from_row_slice(m, n, &jac);
        let mut a = jm.transpose() * &jm;
        let mut rhs = -(jm.transpose() * DVector::from_column_slice(&r));
        for j in 0..n {
            if (x[j] <= lower[j] && rhs[j] < 0.0) || (x[j] >= upper[j] && rhs[j] > 0.0) {
                for c in 0..n {
                    a[(j, c)] = 0.0;
                    a[(c, j)] = 0.0;
                }
                a[(j, j)] = 1.0;
                rhs[j] = 0.0;
            }
        }
        let Some(step) = a.cholesky().map(|ch| ch.solve(&rhs)) else {
            break;
        };
        let mut x_new: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
        project(&mut x_new, lower, upper);
        if !problem.eval(&x_new, &mut r_new, &mut jac_new) {
            break;
        }
        let ssr_new: f64 = r_new.iter().map(|v| v * v).sum();
        let cos_new = scaled_gradient(&x_new, &r_new, &jac_new, lower, upper, problem.scale());
        if !(cos_new < cos && ssr_new <= ssr * (1.0 + 1e-12)) {
            break;
        }
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut r, &mut r_new);
        std::mem::swap(&mut jac, &mut jac_new);
        ssr = ssr_new;
        cos = cos_new;
        iterations += 1;
    }
    LmResult {
        converged: cos <= opts.gtol,
        x,
        ssr,
        iterations,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Tolerance on the infinity norm of the projected gradient.
    pub gtol: f64,
    /// Relative objective change treated as stagnation.
    pub ftol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iter: 500,
            gtol: 1e-9,
            ftol: 1e-15,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Box-projected BFGS. `f` returns the objective and writes the gradient;
/// a non-finite value marks an infeasible point. `h0` is the initial
/// inverse Hessian.
pub fn projected_bfgs<F>(
    mut f: F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    h0: DMatrix<f64>,
    opts: &BfgsOptions,
) -> BfgsResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    project(&mut x, lower, upper);
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    if !fx.is_finite() {
        return BfgsResult {
            x,
            value: fx,
            converged: false,
            iterations: 0,
        };
    }
    let mut h = h0.clone();
    let mut g_new = vec![0.0; n];
    let mut stalls = 0;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iter {
        iterations += 1;
        let pg = projected_gradient(&x, &g, lower, upper);
        if pg.iter().fold(0.0f64, |a, v| a.max(v.abs())) <= opts.gtol {
            converged = true;
            break;
        }
        let free: Vec<bool> = pg
            .iter()
            .zip(&g)
            .map(|(p, q)| *p != 0.0 || *q == 0.0)
            .collect();
        let mut dir = vec![0.0; n];
        for i in 0..n {
            if !free[i] {
                continue;
            }
            for j in 0..n {
                if free[j] {
                    dir[i] -= h[(i, j)] * g[j];
                }
            }
        }
        let mut slope: f64 = dir.iter().zip(&g).map(|(d, g)| d * g).sum();
        if !(slope < 0.0) {
            h = h0.clone();
            for i in 0..n {
                dir[i] = if free[i] { -g[i] * h0[(i, i)] } else { 0.0 };
            }
            slope = dir.iter().zip(&g).map(|(d, g)| d * g).sum();
            if !(slope < 0.0) {
                converged = true;
                break;
            }
        }

        let mut alpha = 1.0;
        let mut x_new = vec![0.0; n];
        let mut f_new = f64::INFINITY;
        let mut found = false;
        for _ in 0..60 {
            for i in 0..n {
                x_new[i] = (x[i] + alpha * dir[i]).clamp(lower[i], upper[i]);
            }
            f_new = f(&x_new, &mut g_new);
            let decrease: f64 = g
                .iter()
                .zip(x_new.iter().zip(&x))
                .map(|(g, (a, b))| g * (a - b))
                .sum();
            if f_new.is_finite() && f_new <= fx + 1e-4 * decrease {
                found = true;
                break;
            }
            alpha *= 0.5;
        }
        if !found {
            // the line search cannot improve: accept current point when its
            // projected gradient is small relative to the objective scale
            converged = pg.iter().fold(0.0f64, |a, v| a.max(v.abs())) <= 1e-6 * fx.abs().max(1.0);
            break;
        }

        let s = DVector::from_iterator(n, x_new.iter().zip(&x).map(|(a, b)| a - b));
        let y = DVector::from_iterator(n, g_new.iter().zip(&g).map(|(a, b)| a - b));
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            h += (s.clone() * s.transpose()) * (rho + rho * rho * yhy)
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        let change = fx - f_new;
        x.copy_from_slice(&x_new);
        g.copy_from_slice(&g_new);
        fx = f_new;
        if change <= opts.ftol * fx.abs().max(1.0) {
            stalls += 1;
            if stalls >= 3 {
                converged = true;
                break;
            }
        } else {
            stalls = 0;
        }
    }
    BfgsResult {
        x,
        value: fx,
        converged,
        iterations,
    }
}
