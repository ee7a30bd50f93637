//! Fixed teacher posteriors and their statistics.
//!
//! A teacher is an `N × K` row-stochastic matrix `T_x` with full support.
//! Everything downstream (certificates, analytic codes, training) reads the
//! cached mean `T̄`, information `I_T = E_x KL(T_x ‖ T̄)`, centered log-odds
//! `r_k(x)` and log-odds energy `E_T = E_x Σ_k r_k(x)²`.

mod gmm;
mod pca;
mod search;
mod snapshot;

pub use gmm::{fit_gmm_em, responsibilities, GmmModel, GmmOptions, VARIANCE_FLOOR};
pub use pca::{fit_pca, PcaModel};
pub use search::{search_teachers, Candidate, CandidateParams, SearchGrid};
pub use snapshot::{TeacherKind, TeacherSnapshot, PROBS_FILE, SNAPSHOT_FILE};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{self, pairwise_mean};

/// Immutable teacher posterior with cached statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherPosterior {
    probs: DMatrix<f64>,
    stats: TeacherStats,
}

/// Statistics derived from a full-support teacher matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherStats {
    pub bar_t: Vec<f64>,
    /// `I_T` in nats.
    pub info: f64,
    /// Centered log-odds `r_k(x)`, one row per sample.
    pub log_odds: DMatrix<f64>,
    /// `E_T`.
    pub energy: f64,
}

impl TeacherPosterior {
    pub fn from_probs(probs: DMatrix<f64>) -> Result<Self> {
        let stats = teacher_stats(&probs)?;
        Ok(Self { probs, stats })
    }

    pub fn probs(&self) -> &DMatrix<f64> {
        &self.probs
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.probs.row(i).iter().copied().collect()
    }

    pub fn n(&self) -> usize {
        self.probs.nrows()
    }

    pub fn k(&self) -> usize {
        self.probs.ncols()
    }

    pub fn bar_t(&self) -> &[f64] {
        &self.stats.bar_t
    }

    pub fn info(&self) -> f64 {
        self.stats.info
    }

    pub fn log_odds(&self) -> &DMatrix<f64> {
        &self.stats.log_odds
    }

    pub fn energy(&self) -> f64 {
        self.stats.energy
    }

    pub fn stats(&self) -> &TeacherStats {
        &self.stats
    }

    /// Sub-teacher on the given rows, with statistics recomputed for that
    /// subset.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&i| i >= self.n()) {
            return Err(Error::Shape(format!("row {bad} out of range for {} samples", self.n())));
        }
        Self::from_probs(self.probs.select_rows(rows))
    }
}

/// Computes `(T̄, I_T, r, E_T)`. Every entry must be strictly positive.
pub fn teacher_stats(probs: &DMatrix<f64>) -> Result<TeacherStats> {
    let (n, k) = probs.shape();
    if n == 0 || k == 0 {
        return Err(Error::Shape("teacher matrix is empty".into()));
    }
    if let Some(bad) = probs.iter().find(|&&p| !(p > 0.0) || !p.is_finite()) {
        return Err(Error::Domain(format!(
            "teacher entries must be strictly positive (full support), found {bad}"
        )));
    }
    for (i, row) in probs.row_iter().enumerate() {
        let s = row.sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("teacher row {i} sums to {s}")));
        }
    }
    // Columns are contiguous in nalgebra's column-major storage.
    let bar_t: Vec<f64> = probs.column_iter().map(|c| pairwise_mean(c.as_slice())).collect();
    let log_bar: Vec<f64> = bar_t.iter().map(|p| p.ln()).collect();

    let mut log_odds = DMatrix::zeros(n, k);
    let mut kls = Vec::with_capacity(n);
    let mut sq = Vec::with_capacity(n);
    let mut clamps = 0;
    for i in 0..n {
        let row: Vec<f64> = probs.row(i).iter().copied().collect();
        kls.push(numeric::kl_with_log_q(&row, &log_bar, &mut clamps));
        let ratios: Vec<f64> = row.iter().zip(&log_bar).map(|(p, lb)| p.ln() - lb).collect();
        let centre = ratios.iter().sum::<f64>() / k as f64;
        let mut ss = 0.0;
        for (j, l) in ratios.iter().enumerate() {
            let r = l - centre;
            log_odds[(i, j)] = r;
            ss += r * r;
        }
        sq.push(ss);
    }
    Ok(TeacherStats {
        bar_t,
        info: pairwise_mean(&kls).max(0.0),
        log_odds,
        energy: pairwise_mean(&sq),
    })
}

/// Tempering `p ∝ p^{1/τ}` followed by `(1-ε) p + ε/K`, row by row.
pub fn temper_and_smooth(raw: &DMatrix<f64>, temperature: f64, epsilon: f64) -> Result<DMatrix<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Domain(format!("temperature must be > 0, got {temperature}")));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::Domain(format!("smoothing must lie in [0, 1), got {epsilon}")));
    }
    let (n, k) = raw.shape();
    let mut out = DMatrix::zeros(n, k);
    for i in 0..n {
        let row = raw.row(i);
        if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::Domain(format!("row {i} has negative or non-finite entries")));
        }
        if row.iter().all(|&p| p == 0.0) {
            return Err(Error::Domain(format!("row {i} is all zero")));
        }
        let scaled: Vec<f64> = row
            .iter()
            .map(|&p| if p > 0.0 { p.ln() / temperature } else { f64::NEG_INFINITY })
            .collect();
        let tempered = numeric::softmax(&scaled);
        for (j, p) in tempered.iter().enumerate() {
            out[(i, j)] = (1.0 - epsilon) * p + epsilon / k as f64;
        }
    }
    Ok(out)
}

/// Builds a teacher from raw nonnegative scores (e.g. GMM responsibilities).
pub fn make_teacher(raw: &DMatrix<f64>, temperature: f64, epsilon: f64) -> Result<TeacherPosterior> {
    TeacherPosterior::from_probs(temper_and_smooth(raw, temperature, epsilon)?)
}

/// `T_{x,k} = (1-ε) 1[y=k] + ε/K`.
pub fn label_smoothed_teacher(labels: &[usize], k: usize, epsilon: f64) -> Result<TeacherPosterior> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Domain(format!(
            "label smoothing needs 0 < ε < 1 for full support, got {epsilon}"
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Domain(format!("label {bad} outside 0..{k}")));
    }
    let probs = DMatrix::from_fn(labels.len(), k, |i, j| {
        (if labels[i] == j { 1.0 - epsilon } else { 0.0 }) + epsilon / k as f64
    });
    TeacherPosterior::from_probs(probs)
}

/// Weights of the teacher search score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreWeights {
    pub lambda_ts: f64,
    pub alpha_kl: f64,
    /// Witness gain the teacher will be used with.
    pub beta: f64,
    pub rho: f64,
    pub eta: f64,
    pub xi: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            lambda_ts: 1.0,
            alpha_kl: 1.0,
            beta: crate::geometry::DEFAULT_BETA,
            rho: 0.0,
            eta: 0.0,
            xi: 1.0,
        }
    }
}

/// Normalized entropy `H(T̄)/ln K`; a single component counts as balanced.
pub fn balance(bar_t: &[f64]) -> f64 {
    if bar_t.len() < 2 {
        return 1.0;
    }
    numeric::entropy(bar_t) / (bar_t.len() as f64).ln()
}

/// `λ I_T − α (K−1)/(2Kβ²) E_T + ρ Bal + η Fit − ξ Instab`.
pub fn teacher_score(
    info: f64,
    energy: f64,
    bar_t: &[f64],
    weights: &ScoreWeights,
    fit: f64,
    instability: f64,
) -> f64 {
    let k = bar_t.len() as f64;
    let energy_cost = (k - 1.0) / (2.0 * k * weights.beta * weights.beta) * energy;
    weights.lambda_ts * info - weights.alpha_kl * energy_cost + weights.rho * balance(bar_t)
        + weights.eta * fit
        - weights.xi * instability
}
