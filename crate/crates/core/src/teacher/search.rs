//! Grid search over PCA-GMM teachers.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fit_gmm_em, fit_pca, make_teacher, teacher_score, GmmModel, GmmOptions, PcaModel, ScoreWeights, TeacherPosterior};
use crate::error::{Error, Result};
use crate::numeric::std_dev;
use crate::rng::{stream, SplitMix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchGrid {
    pub pca_dims: Vec<usize>,
    pub components: Vec<usize>,
    pub temperatures: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Held-out share used to score GMM fit.
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
}

fn default_max_iters() -> usize {
    200
}
fn default_tol() -> f64 {
    1e-6
}
fn default_validation_fraction() -> f64 {
    0.1
}

impl SearchGrid {
    pub fn is_empty(&self) -> bool {
        self.pca_dims.is_empty()
            || self.components.is_empty()
            || self.temperatures.is_empty()
            || self.epsilons.is_empty()
            || self.seeds.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateParams {
    pub pca_dim: usize,
    pub k: usize,
    pub temperature: f64,
    pub epsilon: f64,
    pub seed: u64,
}

/// One evaluated grid point. Failed fits carry `score = -inf` and an error.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub params: CandidateParams,
    pub teacher: Option<TeacherPosterior>,
    pub gmm: Option<GmmModel>,
    pub pca: Option<Arc<PcaModel>>,
    pub fit: f64,
    pub instability: f64,
    pub score: f64,
    pub error: Option<String>,
}

impl Candidate {
    fn failed(params: CandidateParams, err: &Error) -> Self {
        Self {
            params,
            teacher: None,
            gmm: None,
            pca: None,
            fit: f64::NAN,
            instability: f64::NAN,
            score: f64::NEG_INFINITY,
            error: Some(err.to_string()),
        }
    }
}

struct SeedFit {
    pca: Arc<PcaModel>,
    gmm: GmmModel,
    fit: f64,
    raw: DMatrix<f64>,
}

fn fit_one(
    features: &DMatrix<f64>,
    pca: &Arc<PcaModel>,
    k: usize,
    seed: u64,
    grid: &SearchGrid,
) -> Result<SeedFit> {
    let n = features.nrows();
    let mut idx: Vec<usize> = (0..n).collect();
    SplitMix::keyed(seed, stream::SPLIT, 0).shuffle(&mut idx);
    let n_val = ((n as f64) * grid.validation_fraction).round() as usize;
    let (val, train) = idx.split_at(n_val.min(n.saturating_sub(k)));
    let train_feats = features.select_rows(train);
    let gmm = fit_gmm_em(
        &train_feats,
        k,
        &GmmOptions {
            seed,
            max_iters: grid.max_iters,
            tol: grid.tol,
        },
    )?;
    let fit = if val.is_empty() {
        gmm.fit_log_likelihood
    } else {
        gmm.mean_log_likelihood(&features.select_rows(val))?
    };
    let raw = gmm.responsibilities(features)?;
    Ok(SeedFit {
        pca: Arc::clone(pca),
        gmm,
        fit,
        raw,
    })
}

/// Evaluates every `(pca_dim, K, τ, ε, seed)` point and returns candidates
/// sorted by score, best first. `Instab` is the standard deviation of `I_T`
/// across the seeds sharing `(pca_dim, K, τ, ε)`.
pub fn search_teachers(data: &DMatrix<f64>, grid: &SearchGrid, weights: &ScoreWeights) -> Result<Vec<Candidate>> {
    if grid.is_empty() {
        return Err(Error::Domain("teacher search grid is empty".into()));
    }
    let mut out = Vec::new();
    for &pca_dim in &grid.pca_dims {
        let projected = fit_pca(data, pca_dim).and_then(|p| {
            let feats = p.transform(data)?;
            Ok((Arc::new(p), feats))
        });
        for &k in &grid.components {
            let fits: Vec<Result<SeedFit>> = match &projected {
                Ok((pca, feats)) => grid
                    .seeds
                    .par_iter()
                    .map(|&seed| fit_one(feats, pca, k, seed, grid))
                    .collect(),
                Err(e) => grid.seeds.iter().map(|_| Err(clone_err(e))).collect(),
            };
            for &temperature in &grid.temperatures {
                for &epsilon in &grid.epsilons {
                    let teachers: Vec<Result<TeacherPosterior>> = fits
                        .iter()
                        .map(|f| match f {
                            Ok(f) => make_teacher(&f.raw, temperature, epsilon),
                            Err(e) => Err(clone_err(e)),
                        })
                        .collect();
                    let infos: Vec<f64> = teachers.iter().flatten().map(|t| t.info()).collect();
                    let instability = std_dev(&infos);
                    for ((seed, fit), teacher) in grid.seeds.iter().zip(&fits).zip(teachers) {
                        let params = CandidateParams {
                            pca_dim,
                            k,
                            temperature,
                            epsilon,
                            seed: *seed,
                        };
                        let cand = match (fit, teacher) {
                            (Ok(f), Ok(t)) => Candidate {
                                params,
                                score: teacher_score(t.info(), t.energy(), t.bar_t(), weights, f.fit, instability),
                                teacher: Some(t),
                                gmm: Some(f.gmm.clone()),
                                pca: Some(Arc::clone(&f.pca)),
                                fit: f.fit,
                                instability,
                                error: None,
                            },
                            (Err(e), _) => Candidate::failed(params, e),
                            (Ok(_), Err(e)) => Candidate::failed(params, &e),
                        };
                        out.push(cand);
                    }
                }
            }
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(out)
}

fn clone_err(e: &Error) -> Error {
    match e {
        Error::Dimension(s) => Error::Dimension(s.clone()),
        Error::Domain(s) => Error::Domain(s.clone()),
        Error::Numeric(s) => Error::Numeric(s.clone()),
        other => Error::Consistency(other.to_string()),
    }
}
