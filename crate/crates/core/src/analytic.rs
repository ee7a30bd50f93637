//! Closed-form teacher codes and the scaled-target path.
//!
//! With centered log-odds `r` taken against the witness prior, the code
//! `z_T(x) = (K−1)/(Kβ) Σ_k r_k(x) v_k` makes the witness reproduce `T_x`
//! exactly. Scaling the code by `α ∈ [0, 1]` gives `S ∝ T^α T̄^{1−α}` with
//! quadratic latent energy, so the margin/energy trade-off is explicit.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::certificate::{self, GroupView};
use crate::error::{Error, Result};
use crate::geometry::WitnessSpec;
use crate::numeric::{self, pairwise_mean};
use crate::teacher::TeacherPosterior;

pub const DEFAULT_ALPHA_TOL: f64 = 1e-5;
const BISECTION_CAP: usize = 60;
const CROSS_CHECK_TOL: f64 = 1e-8;
const IDENTITY_TOL: f64 = 1e-9;
/// Information below this is rounding noise from rows that merge to one.
const UNINFORMATIVE: f64 = 1e-12;

fn check_k(t: &TeacherPosterior, w: &WitnessSpec) -> Result<()> {
    if t.k() != w.k() {
        return Err(Error::Shape(format!("teacher has K = {}, witness K = {}", t.k(), w.k())));
    }
    Ok(())
}

/// Centered `log(T_x,k / T̄_k)` with `T̄` taken from the witness offsets.
fn witness_log_odds(t: &TeacherPosterior, w: &WitnessSpec) -> DMatrix<f64> {
    let k = t.k();
    let lp = w.log_prior();
    let mut r = DMatrix::zeros(t.n(), k);
    for i in 0..t.n() {
        let ratios: Vec<f64> = (0..k).map(|j| t.probs()[(i, j)].ln() - lp[j]).collect();
        let centre = ratios.iter().sum::<f64>() / k as f64;
        for j in 0..k {
            r[(i, j)] = ratios[j] - centre;
        }
    }
    r
}

/// `N × d_z` matrix of analytic codes `z_T(x)`.
pub fn teacher_code(t: &TeacherPosterior, w: &WitnessSpec) -> Result<DMatrix<f64>> {
    check_k(t, w)?;
    let k = w.k() as f64;
    Ok(witness_log_odds(t, w) * w.vertices() * ((k - 1.0) / (k * w.beta())))
}

fn energy_factor(w: &WitnessSpec) -> f64 {
    let k = w.k() as f64;
    (k - 1.0) / (2.0 * k * w.beta() * w.beta())
}

/// `½ E‖z_T‖²`, verified against `(K−1)/(2Kβ²) E_T`.
pub fn latent_energy(t: &TeacherPosterior, w: &WitnessSpec) -> Result<f64> {
    let codes = teacher_code(t, w)?;
    let sq: Vec<f64> = codes.row_iter().map(|r| r.norm_squared()).collect();
    let empirical = 0.5 * pairwise_mean(&sq);

    let r = witness_log_odds(t, w);
    let rs: Vec<f64> = r.row_iter().map(|row| row.norm_squared()).collect();
    let formula = energy_factor(w) * pairwise_mean(&rs);
    if (empirical - formula).abs() > IDENTITY_TOL * formula.max(1.0) {
        return Err(Error::Consistency(format!(
            "code energy {empirical} disagrees with log-odds energy {formula}"
        )));
    }
    Ok(empirical)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaPathPoint {
    pub alpha: f64,
    pub l_ts: f64,
    /// `½ E‖α z_T‖²`.
    pub mean_kl_cost: f64,
}

/// Cached per-sample quantities for evaluating `L_TS(α)` in closed form.
pub struct AlphaPath {
    log_t: Vec<Vec<f64>>,
    log_prior: Vec<f64>,
    kl_to_prior: Vec<f64>,
    energy_at_one: f64,
    info: f64,
}

impl AlphaPath {
    pub fn new(t: &TeacherPosterior, w: &WitnessSpec) -> Result<Self> {
        check_k(t, w)?;
        let log_prior = w.log_prior().to_vec();
        let log_t: Vec<Vec<f64>> = t
            .probs()
            .row_iter()
            .map(|r| r.iter().map(|p| p.ln()).collect())
            .collect();
        let kl_to_prior = log_t
            .iter()
            .map(|lt| lt.iter().zip(&log_prior).map(|(a, b)| a.exp() * (a - b)).sum())
            .collect();
        Ok(Self {
            log_t,
            log_prior,
            kl_to_prior,
            energy_at_one: latent_energy(t, w)?,
            info: t.info(),
        })
    }

    /// Per-sample `(1−α) KL(T_x ‖ T̄) + log Z_α(x)`.
    pub fn terms(&self, alpha: f64) -> Vec<f64> {
        self.log_t
            .iter()
            .zip(&self.kl_to_prior)
            .map(|(lt, kl)| {
                let mixed: Vec<f64> = lt
                    .iter()
                    .zip(&self.log_prior)
                    .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
                    .collect();
                ((1.0 - alpha) * kl + numeric::log_sum_exp(&mixed)).max(0.0)
            })
            .collect()
    }

    pub fn loss(&self, alpha: f64) -> f64 {
        pairwise_mean(&self.terms(alpha))
    }

    pub fn cost(&self, alpha: f64) -> f64 {
        alpha * alpha * self.energy_at_one
    }

    pub fn info(&self) -> f64 {
        self.info
    }

    /// Smallest `α` in `[0, 1]` (to `tol`) satisfying `feasible`, assuming
    /// feasibility is monotone along the path. Ties go to the smaller `α`.
    fn bisect(&self, tol: f64, feasible: impl Fn(f64) -> bool) -> Result<f64> {
        if feasible(0.0) {
            return Ok(0.0);
        }
        if !feasible(1.0) {
            return Err(Error::Domain("no point on the α-path meets the target".into()));
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..BISECTION_CAP {
            if hi - lo <= tol {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if feasible(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(hi)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("α = {alpha} lies outside [0, 1]")));
    }
    Ok(())
}

/// `L_TS` and latent cost along `α z_T`, cross-checked against direct
/// evaluation of the witness at the scaled codes.
pub fn alpha_path(t: &TeacherPosterior, w: &WitnessSpec, alphas: &[f64]) -> Result<Vec<AlphaPathPoint>> {
    for a in alphas {
        check_alpha(*a)?;
    }
    if alphas.windows(2).any(|p| p[1] < p[0]) {
        return Err(Error::Domain("α grid must be sorted ascending".into()));
    }
    let path = AlphaPath::new(t, w)?;
    let codes = teacher_code(t, w)?;
    alphas
        .iter()
        .map(|&alpha| {
            let l_ts = path.loss(alpha);
            let direct = certificate::alignment_loss(t, w, &(&codes * alpha))?;
            if (l_ts - direct).abs() > CROSS_CHECK_TOL {
                return Err(Error::Consistency(format!(
                    "closed-form L_TS({alpha}) = {l_ts} but direct evaluation gives {direct}"
                )));
            }
            Ok(AlphaPathPoint {
                alpha,
                l_ts,
                mean_kl_cost: path.cost(alpha),
            })
        })
        .collect()
}

/// Evenly spaced grid `0, 1/(n−1), …, 1`.
pub fn uniform_grid(points: usize) -> Vec<f64> {
    match points {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..points).map(|i| i as f64 / (points - 1) as f64).collect(),
    }
}

/// Smallest `α` with `L_TS(α) ≤ I_T − τ`.
pub fn alpha_star(t: &TeacherPosterior, w: &WitnessSpec, tau: f64, tol: f64) -> Result<f64> {
    let path = AlphaPath::new(t, w)?;
    alpha_star_on(&path, tau, tol)
}

pub fn alpha_star_on(path: &AlphaPath, tau: f64, tol: f64) -> Result<f64> {
    let info = path.info();
    if !(info > UNINFORMATIVE) {
        return Err(Error::Domain("teacher carries no information; no margin is attainable".into()));
    }
    if !(tau > 0.0 && tau < info) {
        return Err(Error::Domain(format!("margin τ = {tau} must satisfy 0 < τ < I_T = {info}")));
    }
    path.bisect(tol, |a| path.loss(a) <= info - tau)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupThreshold {
    pub groups: usize,
    pub assignment: Vec<usize>,
    pub i_a: f64,
    /// `inf{α : L_TS(α) < I_A}`, absent when the view is excluded.
    pub alpha_a_star: Option<f64>,
    pub excluded: Option<String>,
}

pub fn group_alpha_thresholds(
    t: &TeacherPosterior,
    w: &WitnessSpec,
    views: &[GroupView],
) -> Result<Vec<GroupThreshold>> {
    let path = AlphaPath::new(t, w)?;
    views
        .iter()
        .map(|view| {
            let i_a = view.i_a();
            let mut out = GroupThreshold {
                groups: view.grouping.groups(),
                assignment: view.grouping.assignment().to_vec(),
                i_a,
                alpha_a_star: None,
                excluded: None,
            };
            if !(i_a > UNINFORMATIVE) {
                out.excluded = Some("view carries no information (I_A = 0)".into());
            } else {
                out.alpha_a_star = Some(path.bisect(DEFAULT_ALPHA_TOL, |a| path.loss(a) < i_a)?);
            }
            Ok(out)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyComparison {
    pub j_collapse: f64,
    pub j_teacher: f64,
    pub teacher_preferred: bool,
}

/// Mean-only objective at the collapsed code versus the analytic code.
pub fn energy_comparison(i_t: f64, e_t: f64, k: usize, beta: f64, alpha_kl: f64, lambda_ts: f64) -> EnergyComparison {
    let kf = k as f64;
    let j_collapse = lambda_ts * i_t;
    let j_teacher = alpha_kl * (kf - 1.0) / (2.0 * kf * beta * beta) * e_t;
    EnergyComparison {
        j_collapse,
        j_teacher,
        teacher_preferred: j_teacher < j_collapse,
    }
}

/// Feasibility summary for one teacher view at margin `τ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    #[serde(rename = "K")]
    pub k: usize,
    pub i_t: f64,
    pub tau: f64,
    pub alpha_star: f64,
    pub g_t_at_alpha_star: f64,
    pub mean_kl_cost: f64,
}

pub fn feasibility(t: &TeacherPosterior, w: &WitnessSpec, tau: f64, tol: f64) -> Result<FeasibilityReport> {
    let path = AlphaPath::new(t, w)?;
    let alpha = alpha_star_on(&path, tau, tol)?;
    let l = path.loss(alpha);
    if l > t.info() - tau {
        return Err(Error::Consistency(format!("α★ = {alpha} fails its own margin check")));
    }
    Ok(FeasibilityReport {
        k: t.k(),
        i_t: t.info(),
        tau,
        alpha_star: alpha,
        g_t_at_alpha_star: t.info() - l,
        mean_kl_cost: path.cost(alpha),
    })
}

pub const PATH_CSV_HEADER: &str = "alpha,l_ts,g_t,mean_kl_cost";

pub fn path_csv(points: &[AlphaPathPoint], i_t: f64) -> String {
    let mut s = String::from(PATH_CSV_HEADER);
    s.push('\n');
    for p in points {
        s.push_str(&format!("{},{},{},{}\n", p.alpha, p.l_ts, i_t - p.l_ts, p.mean_kl_cost));
    }
    s
}
