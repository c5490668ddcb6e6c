//! Large-sample limits of the distance estimators.
//!
//! With `n_l / n -> kappa_l` and `n_lj / n_l -> kappa_lj`, the scaled
//! estimation error `sqrt(n) (beta_hat - beta)` tends to `Z ~ N(0, Sigma)`
//! with `Sigma = blockdiag(Sigma_l^-1 / kappa_l)` and
//! `Sigma_l = sum_j kappa_lj grad mu_l grad mu_l^T / sigma_l^2`.
//! `sqrt(n) (d_hat - d)` then tends to the maximum of `sign * G(i, d)` over
//! the extremal points, where `G(i, d) = g(i, d)^T Z` and block `l` of
//! `g(i, d)` is `(1{l = i} - p_l) grad mu_l(d)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::StudyDesign;
use crate::distance::{self, ArgmaxPoint, DistanceOptions, PopulationCurve};
use crate::error::{Error, Result};
use crate::model::DoseResponseModel;
use crate::rng;

const CHUNK: usize = 4096;
const EIGEN_FLOOR: f64 = 1e-12;

/// `(1 / sigma2) sum_j kappa_j g_j g_j^T` from per-dose gradient vectors.
pub fn information_block(gradients: &[Vec<f64>], cell_kappas: &[f64], sigma2: f64) -> DMatrix<f64> {
    let p = gradients.first().map_or(0, |g| g.len());
    let mut m = DMatrix::zeros(p, p);
    for (g, &k) in gradients.iter().zip(cell_kappas) {
        let v = DVector::from_column_slice(g);
        m += (&v * v.transpose()) * (k / sigma2);
    }
    m
}

/// Information blocks `Sigma_l` for E-max subgroups.
pub fn information_blocks(
    doses: &[f64],
    cell_kappas: &[Vec<f64>],
    models: &[DoseResponseModel],
    sigma2: &[f64],
) -> Vec<DMatrix<f64>> {
    models
        .iter()
        .enumerate()
        .map(|(l, m)| {
            let grads: Vec<Vec<f64>> = doses
                .iter()
                .map(|&d| {
                    let mut g = vec![0.0; m.n_params()];
                    m.gradient_into(d, &mut g);
                    g
                })
                .collect();
            information_block(&grads, &cell_kappas[l], sigma2[l])
        })
        .collect()
}

/// `Sigma = blockdiag(Sigma_l^-1 / kappa_l)`.
pub fn covariance(blocks: &[DMatrix<f64>], kappas: &[f64]) -> Result<DMatrix<f64>> {
    let dim: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut sigma = DMatrix::zeros(dim, dim);
    let mut off = 0;
    for (l, b) in blocks.iter().enumerate() {
        let p = b.nrows();
        let scale = (0..p).map(|i| b[(i, i)].abs()).fold(0.0, f64::max);
        let inv = b
            .clone()
            .cholesky()
            .filter(|ch| {
                let diag = ch.l_dirty().diagonal();
                let min = diag.iter().map(|v| v * v).fold(f64::INFINITY, f64::min);
                min > 1e-14 * scale
            })
            .ok_or(Error::SingularInformation(l + 1))?
            .inverse();
        sigma
            .view_mut((off, off), (p, p))
            .copy_from(&(inv / kappas[l]));
        off += p;
    }
    Ok(sigma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitSample {
    pub values: Vec<f64>,
    pub extremal: Vec<ArgmaxPoint>,
    /// More than one extremal point: the limit law need not be continuous.
    pub multiple_extremal: bool,
}

impl LimitSample {
    /// Lower order statistic at rank `ceil(alpha * N)`.
    pub fn quantile(&self, alpha: f64) -> f64 {
        let mut v = self.values.clone();
        v.sort_by(f64::total_cmp);
        v[crate::bootstrap::quantile_rank(alpha, v.len()) - 1]
    }
}

#[derive(Debug, Clone)]
pub struct AsymptoticModel {
    pub kappas: Vec<f64>,
    pub cell_kappas: Vec<Vec<f64>>,
    pub sigma2: Vec<f64>,
    pub models: Vec<DoseResponseModel>,
    pub weights: Vec<f64>,
    pub range: (f64, f64),
    pub blocks: Vec<DMatrix<f64>>,
    pub sigma_matrix: DMatrix<f64>,
    offsets: Vec<usize>,
    /// `L` with `L L^T = Sigma` after flooring eigenvalues.
    root: DMatrix<f64>,
}

impl AsymptoticModel {
    /// Limit objects for the allocation proportions of `design`.
    pub fn new(design: &StudyDesign, models: &[DoseResponseModel], sigma2: &[f64]) -> Result<Self> {
        if models.len() != design.k() || sigma2.len() != design.k() {
            return Err(Error::InvalidArgument(format!(
                "{} models and {} variances for {} subgroups",
                models.len(),
                sigma2.len(),
                design.k()
            )));
        }
        if sigma2.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "variances must be positive: {sigma2:?}"
            )));
        }
        let n = design.total_size() as f64;
        let kappas: Vec<f64> = (0..design.k())
            .map(|l| design.group_size(l) as f64 / n)
            .collect();
        let cell_kappas: Vec<Vec<f64>> = (0..design.k())
            .map(|l| {
                let nl = design.group_size(l) as f64;
                design
                    .allocation(l)
                    .iter()
                    .map(|&c| c as f64 / nl)
                    .collect()
            })
            .collect();
        let blocks = information_blocks(design.doses(), &cell_kappas, models, sigma2);
        let sigma_matrix = covariance(&blocks, &kappas)?;
        let root = factor(&sigma_matrix)?;
        let mut offsets = vec![0];
        for m in models {
            offsets.push(offsets.last().unwrap() + m.n_params());
        }
        Ok(AsymptoticModel {
            kappas,
            cell_kappas,
            sigma2: sigma2.to_vec(),
            models: models.to_vec(),
            weights: design.weights().to_vec(),
            range: design.dose_range(),
            blocks,
            sigma_matrix,
            offsets,
            root,
        })
    }

    pub fn dim(&self) -> usize {
        self.sigma_matrix.nrows()
    }

    /// `g(i, d)`: gradient of `mu_i(d) - mu_bar(d)` in all parameters.
    pub fn difference_gradient(&self, subgroup: usize, dose: f64) -> DVector<f64> {
        let mut g = DVector::zeros(self.dim());
        let mut tmp = [0.0; 4];
        for (l, m) in self.models.iter().enumerate() {
            let c = if l == subgroup { 1.0 } else { 0.0 } - self.weights[l];
            let p = m.n_params();
            m.gradient_into(dose, &mut tmp[..p]);
            for a in 0..p {
                g[self.offsets[l] + a] = c * tmp[a];
            }
        }
        g
    }

    /// Extremal points of the maximum deviation over `subgroups`.
    pub fn extremal_points(&self, subgroups: &[usize]) -> Result<Vec<ArgmaxPoint>> {
        crate::distance::DistanceTarget::Many(subgroups.to_vec()).validate(self.models.len())?;
        let curve = PopulationCurve::new(&self.models, &self.weights)?;
        Ok(
            distance::max_deviation(&curve, subgroups, self.range, &DistanceOptions::default())
                .argmax_points,
        )
    }

    /// Draws of `max_e sign_e g_e^T Z` for the given `(sign, g)` pairs.
    pub fn sample_max(&self, points: &[(f64, DVector<f64>)], n: usize, seed: u64) -> Vec<f64> {
        let dim = self.dim();
        let loads: Vec<DVector<f64>> = points
            .iter()
            .map(|(s, g)| self.root.transpose() * g * *s)
            .collect();
        let chunks = n.div_ceil(CHUNK);
        let parts: Vec<Vec<f64>> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut r = rng::stream(seed, c as u64);
                let len = CHUNK.min(n - c * CHUNK);
                let mut eps = vec![0.0; dim];
                (0..len)
                    .map(|_| {
                        eps.iter_mut().for_each(|e| *e = r.sample(StandardNormal));
                        loads
                            .iter()
                            .map(|u| u.iter().zip(&eps).map(|(a, b)| a * b).sum::<f64>())
                            .fold(f64::NEG_INFINITY, f64::max)
                    })
                    .collect()
            })
            .collect();
        parts.concat()
    }

    fn sample_points(&self, subgroups: &[usize], n: usize, seed: u64) -> Result<LimitSample> {
        let extremal = self.extremal_points(subgroups)?;
        let points: Vec<(f64, DVector<f64>)> = extremal
            .iter()
            .map(|p| (p.sign as f64, self.difference_gradient(p.subgroup, p.dose)))
            .collect();
        Ok(LimitSample {
            values: self.sample_max(&points, n, seed),
            multiple_extremal: extremal.len() > 1,
            extremal,
        })
    }

    /// Draws of the limit `T` of `sqrt(n) (d_inf_hat - d_inf)` for one subgroup.
    pub fn sample_t(&self, subgroup: usize, n: usize, seed: u64) -> Result<LimitSample> {
        self.sample_points(&[subgroup], n, seed)
    }

    /// Draws of the limit `S` of `sqrt(n) (d_inf_inf_hat - d_inf_inf)`.
    pub fn sample_s(&self, subgroups: &[usize], n: usize, seed: u64) -> Result<LimitSample> {
        self.sample_points(subgroups, n, seed)
    }
}

/// Symmetric square root factor with eigenvalues floored at `1e-12`.
fn factor(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = sigma.clone().symmetric_eigen();
    let trace: f64 = eig.eigenvalues.iter().map(|v| v.abs()).sum();
    let floored: f64 = eig
        .eigenvalues
        .iter()
        .filter(|&&v| v < EIGEN_FLOOR)
        .map(|&v| EIGEN_FLOOR - v)
        .sum();
    if floored > 1e-8 * trace {
        return Err(Error::DegenerateCovariance(format!(
            "eigenvalues {:?} below floor exceed 1e-8 of the trace",
            eig.eigenvalues.as_slice()
        )));
    }
    let sqrt = eig.eigenvalues.map(|v| v.max(EIGEN_FLOOR).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt))
}
