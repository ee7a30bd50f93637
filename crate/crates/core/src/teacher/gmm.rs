//! Diagonal-covariance Gaussian mixtures fitted by EM.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{self, pairwise_mean};
use crate::rng::{stream, SplitMix};

pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Components with less total responsibility than this are re-seeded.
const EMPTY_COMPONENT_MASS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmOptions {
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once the per-sample log-likelihood gain drops below this.
    pub tol: f64,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            max_iters: 200,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    pub feature_dim: usize,
    /// Mean per-sample log-likelihood on the fitting data.
    pub fit_log_likelihood: f64,
    /// Mean per-sample log-likelihood before each M-step.
    pub log_likelihood_trace: Vec<f64>,
    pub reseeded_components: usize,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl GmmModel {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    fn component_log_density(&self, k: usize, u: &[f64]) -> f64 {
        let mut acc = self.weights[k].ln();
        for ((x, m), v) in u.iter().zip(&self.means[k]).zip(&self.variances[k]) {
            acc -= 0.5 * ((std::f64::consts::TAU * v).ln() + (x - m) * (x - m) / v);
        }
        acc
    }

    /// Joint log terms `log π_k + log N(u; m_k, Σ_k)` for one point.
    fn joint_log(&self, u: &[f64]) -> Vec<f64> {
        (0..self.k()).map(|k| self.component_log_density(k, u)).collect()
    }

    fn check_dim(&self, features: &DMatrix<f64>) -> Result<()> {
        if features.ncols() != self.feature_dim {
            return Err(Error::Shape(format!(
                "GMM expects {} features, got {}",
                self.feature_dim,
                features.ncols()
            )));
        }
        Ok(())
    }

    /// `γ(k|x)` computed in log space.
    pub fn responsibilities(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(features)?;
        let n = features.nrows();
        let mut out = DMatrix::zeros(n, self.k());
        for (i, u) in rows_of(features).iter().enumerate() {
            for (k, p) in numeric::softmax(&self.joint_log(u)).into_iter().enumerate() {
                out[(i, k)] = p;
            }
        }
        Ok(out)
    }

    pub fn log_likelihoods(&self, features: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.check_dim(features)?;
        Ok(rows_of(features)
            .iter()
            .map(|u| numeric::log_sum_exp(&self.joint_log(u)))
            .collect())
    }

    pub fn mean_log_likelihood(&self, features: &DMatrix<f64>) -> Result<f64> {
        Ok(pairwise_mean(&self.log_likelihoods(features)?))
    }
}

/// Free-function form of [`GmmModel::responsibilities`].
pub fn responsibilities(model: &GmmModel, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    model.responsibilities(features)
}

fn kmeans_plus_plus(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = SplitMix::keyed(seed, stream::KMEANS, 0);
    let mut centers = vec![points[rng.below(points.len())].clone()];
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut nearest: Vec<f64> = points.iter().map(|p| sq(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.uniform() * total;
            let mut chosen = points.len() - 1;
            for (i, d) in nearest.iter().enumerate() {
                if target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.below(points.len())
        };
        let c = points[idx].clone();
        for (d, p) in nearest.iter_mut().zip(points) {
            *d = d.min(sq(p, &c));
        }
        centers.push(c);
    }
    centers
}

/// Fits a `k`-component diagonal GMM by EM, initialized with k-means++
/// seeding from `opts.seed`.
pub fn fit_gmm_em(features: &DMatrix<f64>, k: usize, opts: &GmmOptions) -> Result<GmmModel> {
    let (n, m) = features.shape();
    if k == 0 {
        return Err(Error::Domain("GMM needs at least one component".into()));
    }
    if n < k {
        return Err(Error::Dimension(format!("{n} samples cannot support {k} components")));
    }
    if !numeric::all_finite(features.as_slice()) {
        return Err(Error::Numeric("non-finite GMM features".into()));
    }
    let points = rows_of(features);
    let global_mean: Vec<f64> = features.column_iter().map(|c| pairwise_mean(c.as_slice())).collect();
    let global_var: Vec<f64> = features
        .column_iter()
        .zip(&global_mean)
        .map(|(c, mu)| {
            let sq: Vec<f64> = c.iter().map(|x| (x - mu) * (x - mu)).collect();
            pairwise_mean(&sq).max(VARIANCE_FLOOR)
        })
        .collect();

    let mut model = GmmModel {
        weights: vec![1.0 / k as f64; k],
        means: kmeans_plus_plus(&points, k, opts.seed),
        variances: vec![global_var.clone(); k],
        feature_dim: m,
        fit_log_likelihood: f64::NEG_INFINITY,
        log_likelihood_trace: Vec::new(),
        reseeded_components: 0,
    };

    let mut resp = vec![vec![0.0; k]; n];
    let mut point_ll = vec![0.0; n];
    let mut previous = f64::NEG_INFINITY;
    for _ in 0..opts.max_iters {
        // E-step
        for (i, u) in points.iter().enumerate() {
            let joint = model.joint_log(u);
            let lse = numeric::log_sum_exp(&joint);
            point_ll[i] = lse;
            for (r, j) in resp[i].iter_mut().zip(&joint) {
                *r = (j - lse).exp();
            }
        }
        let ll = pairwise_mean(&point_ll);
        if !ll.is_finite() {
            return Err(Error::Numeric("GMM log-likelihood is not finite".into()));
        }
        model.log_likelihood_trace.push(ll);
        if ll - previous < opts.tol {
            break;
        }
        previous = ll;

        // M-step
        for c in 0..k {
            let col: Vec<f64> = resp.iter().map(|r| r[c]).collect();
            let mass = numeric::pairwise_sum(&col);
            if mass < EMPTY_COMPONENT_MASS {
                let worst = point_ll
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                model.means[c] = points[worst].clone();
                model.variances[c] = global_var.clone();
                model.weights[c] = 1.0 / n as f64;
                model.reseeded_components += 1;
                continue;
            }
            model.weights[c] = mass / n as f64;
            for d in 0..m {
                let weighted: Vec<f64> = points.iter().zip(&col).map(|(p, r)| r * p[d]).collect();
                let mu = numeric::pairwise_sum(&weighted) / mass;
                let sq: Vec<f64> = points
                    .iter()
                    .zip(&col)
                    .map(|(p, r)| r * (p[d] - mu) * (p[d] - mu))
                    .collect();
                model.means[c][d] = mu;
                model.variances[c][d] = (numeric::pairwise_sum(&sq) / mass).max(VARIANCE_FLOOR);
            }
        }
        let total: f64 = model.weights.iter().sum();
        model.weights.iter_mut().for_each(|w| *w /= total);
    }
    model.fit_log_likelihood = model.mean_log_likelihood(features)?;
    Ok(model)
}
