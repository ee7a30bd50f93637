//! Alignment loss, certificate margin, constant baseline, and coarse views.
//!
//! A constant encoder mean yields a constant witness prediction, and no
//! constant predictor can beat `I_T` on average. So `G_T = I_T − L_TS > 0`
//! rules out an input-independent constant mean; `G_T ≤ 0` proves nothing.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::WitnessSpec;
use crate::numeric::{self, pairwise_mean};
use crate::teacher::TeacherPosterior;

/// Slack for the data-processing and contraction inequalities.
pub const INEQUALITY_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub i_t: f64,
    pub l_ts: f64,
    pub g_t: f64,
    pub n: usize,
    pub pass: bool,
    /// Probabilities that had to be floored before a logarithm.
    pub clamp_count: usize,
}

impl CertificateReport {
    pub fn new(i_t: f64, l_ts: f64, n: usize, clamp_count: usize) -> Self {
        let g_t = i_t - l_ts;
        Self {
            i_t,
            l_ts,
            g_t,
            n,
            pass: g_t > 0.0,
            clamp_count,
        }
    }

    pub const CSV_HEADER: &'static str = "seed,i_t,l_ts,g_t,pass";

    pub fn csv_row(&self, seed: u64) -> String {
        format!("{seed},{},{},{},{}", self.i_t, self.l_ts, self.g_t, self.pass)
    }
}

fn check_rows(t: &TeacherPosterior, w: &WitnessSpec, mus: &DMatrix<f64>) -> Result<()> {
    if t.k() != w.k() {
        return Err(Error::Shape(format!("teacher has K = {}, witness K = {}", t.k(), w.k())));
    }
    if mus.nrows() != t.n() {
        return Err(Error::Shape(format!("{} means for {} teacher rows", mus.nrows(), t.n())));
    }
    Ok(())
}

/// Per-sample `KL(T_x ‖ S(μ(x)))` plus the number of clamped probabilities.
pub fn alignment_terms(t: &TeacherPosterior, w: &WitnessSpec, mus: &DMatrix<f64>) -> Result<(Vec<f64>, usize)> {
    check_rows(t, w, mus)?;
    let logits = w.logits_batch(mus)?;
    let terms: Vec<(f64, usize)> = (0..t.n())
        .into_par_iter()
        .map(|i| {
            let a: Vec<f64> = logits.row(i).iter().copied().collect();
            let mut clamps = 0;
            let kl = numeric::kl_with_log_q(&t.row(i), &numeric::log_softmax(&a), &mut clamps);
            (kl, clamps)
        })
        .collect();
    let clamps = terms.iter().map(|(_, c)| c).sum();
    Ok((terms.into_iter().map(|(kl, _)| kl).collect(), clamps))
}

/// `L_TS = E_x KL(T_x ‖ S(μ(x)))` in nats.
pub fn alignment_loss(t: &TeacherPosterior, w: &WitnessSpec, mus: &DMatrix<f64>) -> Result<f64> {
    let (terms, _) = alignment_terms(t, w, mus)?;
    Ok(pairwise_mean(&terms))
}

pub fn certify(t: &TeacherPosterior, w: &WitnessSpec, mus: &DMatrix<f64>) -> Result<CertificateReport> {
    let (terms, clamps) = alignment_terms(t, w, mus)?;
    Ok(CertificateReport::new(t.info(), pairwise_mean(&terms), t.n(), clamps))
}

/// `E_x KL(T_x ‖ α)` for a constant predictor `α`.
pub fn constant_baseline(t: &TeacherPosterior, alpha: &[f64]) -> Result<f64> {
    if alpha.len() != t.k() {
        return Err(Error::Shape(format!("predictor has {} entries, teacher K = {}", alpha.len(), t.k())));
    }
    if alpha.iter().any(|&a| !(a > 0.0)) {
        return Err(Error::Domain("constant predictor must have full support".into()));
    }
    let log_alpha: Vec<f64> = alpha.iter().map(|a| a.ln()).collect();
    let mut clamps = 0;
    let terms: Vec<f64> = (0..t.n())
        .map(|i| numeric::kl_with_log_q(&t.row(i), &log_alpha, &mut clamps))
        .collect();
    Ok(pairwise_mean(&terms))
}

/// Partition of `K` teacher components into `K_A` groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grouping {
    /// `assignment[k]` is the group of component `k`.
    assignment: Vec<usize>,
    groups: usize,
}

impl Grouping {
    pub fn from_assignment(assignment: Vec<usize>) -> Result<Self> {
        let groups = assignment.iter().max().map_or(0, |m| m + 1);
        for g in 0..groups {
            if !assignment.contains(&g) {
                return Err(Error::Domain(format!("group {g} is empty")));
            }
        }
        if assignment.is_empty() {
            return Err(Error::Domain("grouping covers no components".into()));
        }
        Ok(Self { assignment, groups })
    }

    /// From a `K_A × K` zero/one matrix with exactly one 1 per column.
    pub fn from_matrix(a: &DMatrix<f64>) -> Result<Self> {
        let mut assignment = Vec::with_capacity(a.ncols());
        for (k, col) in a.column_iter().enumerate() {
            if col.iter().any(|&x| x != 0.0 && x != 1.0) {
                return Err(Error::Domain(format!("grouping column {k} is not zero/one")));
            }
            let ones: Vec<usize> = col.iter().enumerate().filter(|(_, &x)| x == 1.0).map(|(g, _)| g).collect();
            if ones.len() != 1 {
                return Err(Error::Domain(format!(
                    "component {k} belongs to {} groups, expected exactly one",
                    ones.len()
                )));
            }
            assignment.push(ones[0]);
        }
        let g = Self::from_assignment(assignment)?;
        if g.groups != a.nrows() {
            return Err(Error::Domain(format!("grouping has {} rows but only {} are used", a.nrows(), g.groups)));
        }
        Ok(g)
    }

    pub fn identity(k: usize) -> Self {
        Self {
            assignment: (0..k).collect(),
            groups: k,
        }
    }

    pub fn k(&self) -> usize {
        self.assignment.len()
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.groups, self.k(), |g, k| if self.assignment[k] == g { 1.0 } else { 0.0 })
    }

    /// Row-wise `A p`.
    pub fn apply(&self, probs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if probs.ncols() != self.k() {
            return Err(Error::Shape(format!(
                "grouping covers {} components, matrix has {}",
                self.k(),
                probs.ncols()
            )));
        }
        let mut out = DMatrix::zeros(probs.nrows(), self.groups);
        for (k, &g) in self.assignment.iter().enumerate() {
            let mut dst = out.column_mut(g);
            dst += probs.column(k);
        }
        Ok(out)
    }
}

/// Coarse teacher view `T^A = A T`.
#[derive(Debug, Clone)]
pub struct GroupView {
    pub grouping: Grouping,
    pub teacher: TeacherPosterior,
    fine_probs: DMatrix<f64>,
}

impl GroupView {
    pub fn i_a(&self) -> f64 {
        self.teacher.info()
    }
}

pub fn coarsen(t: &TeacherPosterior, grouping: &Grouping) -> Result<GroupView> {
    let grouped = TeacherPosterior::from_probs(grouping.apply(t.probs())?)?;
    if grouped.info() > t.info() + INEQUALITY_SLACK {
        return Err(Error::Consistency(format!(
            "grouped information {} exceeds teacher information {}",
            grouped.info(),
            t.info()
        )));
    }
    Ok(GroupView {
        grouping: grouping.clone(),
        teacher: grouped,
        fine_probs: t.probs().clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupCertificate {
    /// `i_t` holds `I_A`, `l_ts` holds `L_A`.
    pub report: CertificateReport,
    /// Ungrouped `L_TS` of the same student.
    pub l_ts_full: f64,
}

fn mean_kl_rows(p: &DMatrix<f64>, q: &DMatrix<f64>, clamps: &mut usize) -> f64 {
    let terms: Vec<f64> = (0..p.nrows())
        .map(|i| {
            let pr: Vec<f64> = p.row(i).iter().copied().collect();
            let qr: Vec<f64> = q.row(i).iter().copied().collect();
            numeric::kl(&pr, &qr, clamps)
        })
        .collect();
    pairwise_mean(&terms)
}

/// Certificate for a coarse view with merged student `S^A = A S`. Also
/// verifies the contraction `L_A ≤ L_TS`.
pub fn group_certify(view: &GroupView, student_probs: &DMatrix<f64>) -> Result<GroupCertificate> {
    if student_probs.shape() != view.fine_probs.shape() {
        return Err(Error::Shape(format!(
            "student matrix is {:?}, teacher is {:?}",
            student_probs.shape(),
            view.fine_probs.shape()
        )));
    }
    for (i, row) in student_probs.row_iter().enumerate() {
        if (row.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("student row {i} is not normalized")));
        }
    }
    let grouped_student = view.grouping.apply(student_probs)?;
    let mut clamps = 0;
    let l_a = mean_kl_rows(view.teacher.probs(), &grouped_student, &mut clamps);
    let l_ts_full = mean_kl_rows(&view.fine_probs, student_probs, &mut clamps);
    if l_a > l_ts_full + INEQUALITY_SLACK {
        return Err(Error::Consistency(format!(
            "grouped loss {l_a} exceeds ungrouped loss {l_ts_full}"
        )));
    }
    Ok(GroupCertificate {
        report: CertificateReport::new(view.i_a(), l_a, view.teacher.n(), clamps),
        l_ts_full,
    })
}

/// Witness predictions `S(μ(x))` as an `N × K` matrix.
pub fn student_probs(w: &WitnessSpec, mus: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let logits = w.logits_batch(mus)?;
    let mut out = DMatrix::zeros(mus.nrows(), w.k());
    for i in 0..mus.nrows() {
        let a: Vec<f64> = logits.row(i).iter().copied().collect();
        for (k, p) in numeric::softmax(&a).into_iter().enumerate() {
            out[(i, k)] = p;
        }
    }
    Ok(out)
}

/// `([L_TS − (I_T − τ)]₊)²`.
pub fn hinge_margin_loss(l_ts: f64, i_t: f64, tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau < i_t) {
        return Err(Error::Domain(format!("hinge margin needs 0 < τ < I_T, got τ = {tau}, I_T = {i_t}")));
    }
    Ok((l_ts - (i_t - tau)).max(0.0).powi(2))
}

/// Upper bound `β²K/(2(K−1)) · E‖μ − z_T‖²` on `L_TS`.
pub fn distance_bound(w: &WitnessSpec, mus: &DMatrix<f64>, codes: &DMatrix<f64>) -> Result<f64> {
    if mus.shape() != codes.shape() {
        return Err(Error::Shape("means and codes differ in shape".into()));
    }
    let k = w.k() as f64;
    let sq: Vec<f64> = (0..mus.nrows()).map(|i| (mus.row(i) - codes.row(i)).norm_squared()).collect();
    Ok(w.beta() * w.beta() * k / (2.0 * (k - 1.0)) * pairwise_mean(&sq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::teacher::label_smoothed_teacher;

    fn pm_teacher() -> TeacherPosterior {
        TeacherPosterior::from_probs(DMatrix::from_row_slice(2, 2, &[0.8, 0.2, 0.2, 0.8])).unwrap()
    }

    #[test]
    fn zero_means_give_the_teacher_information() {
        let t = pm_teacher();
        let w = WitnessSpec::new(3, 5.0, t.bar_t()).unwrap();
        let l = alignment_loss(&t, &w, &DMatrix::zeros(2, 3)).unwrap();
        assert!((l - t.info()).abs() < 1e-10);
        let report = certify(&t, &w, &DMatrix::zeros(2, 3)).unwrap();
        assert!(!report.pass && report.g_t.abs() < 1e-10);
    }

    #[test]
    fn half_scaled_code_on_single_row() {
        // Teacher (0.8, 0.2) with prior (0.5, 0.5): code ln(4)/(2·β) along v_1.
        let t = TeacherPosterior::from_probs(DMatrix::from_row_slice(1, 2, &[0.8, 0.2])).unwrap();
        let w = WitnessSpec::new(1, 5.0, &[0.5, 0.5]).unwrap();
        let code = 4f64.ln() / 10.0;
        let l = alignment_loss(&t, &w, &DMatrix::from_element(1, 1, 0.5 * code)).unwrap();
        // Oracle: 0.5·KL(T‖T̄) + ln Z_0.5, Z_0.5 = Σ sqrt(T_k · 0.5).
        let z: f64 = [0.8f64, 0.2].iter().map(|p| (p * 0.5).sqrt()).sum();
        assert!((z - 0.948_683).abs() < 1e-6);
        let expected = 0.5 * 0.192_744_8 + z.ln();
        assert!((l - expected).abs() < 1e-7);
        assert!((l - 0.04369).abs() < 1e-5);
        let exact = alignment_loss(&t, &w, &DMatrix::from_element(1, 1, code)).unwrap();
        assert!(exact.abs() < 1e-12);
    }

    #[test]
    fn constant_baseline_cases() {
        let t = pm_teacher();
        assert!((constant_baseline(&t, &[0.5, 0.5]).unwrap() - t.info()).abs() < 1e-15);
        let v = constant_baseline(&t, &[0.9, 0.1]).unwrap();
        let kl_bar = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((kl_bar - 0.510_826).abs() < 1e-6);
        assert!((v - (t.info() + kl_bar)).abs() < 1e-12);
        assert!((v - 0.70357).abs() < 1e-5);
        assert!(matches!(constant_baseline(&t, &[1.0, 0.0]), Err(Error::Domain(_))));

        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let ls = label_smoothed_teacher(&labels, 10, 0.05).unwrap();
        assert!((constant_baseline(&ls, &[0.1; 10]).unwrap() - 2.02019).abs() < 1e-5);
    }

    #[test]
    fn coarsening_limits() {
        let t = TeacherPosterior::from_probs(DMatrix::from_row_slice(
            3,
            3,
            &[0.7, 0.2, 0.1, 0.1, 0.8, 0.1, 0.2, 0.2, 0.6],
        ))
        .unwrap();
        let id = coarsen(&t, &Grouping::identity(3)).unwrap();
        assert!((id.i_a() - t.info()).abs() < 1e-15);
        let all = coarsen(&t, &Grouping::from_assignment(vec![0, 0, 0]).unwrap()).unwrap();
        assert!(all.i_a().abs() < 1e-15);
        let pair = coarsen(&t, &Grouping::from_assignment(vec![0, 0, 1]).unwrap()).unwrap();
        assert!(pair.i_a() >= 0.0 && pair.i_a() <= t.info());
    }

    #[test]
    fn invalid_partitions_are_rejected() {
        let overlap = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        assert!(matches!(Grouping::from_matrix(&overlap), Err(Error::Domain(_))));
        let uncovered = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!(Grouping::from_matrix(&uncovered).is_err());
        let ok = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let g = Grouping::from_matrix(&ok).unwrap();
        assert_eq!(g.assignment(), &[0, 1, 0]);
        assert_eq!(g.to_matrix(), ok);
        assert!(Grouping::from_assignment(vec![0, 2]).is_err());
    }

    #[test]
    fn group_certificate_extremes() {
        let t = TeacherPosterior::from_probs(DMatrix::from_row_slice(
            2,
            3,
            &[0.7, 0.2, 0.1, 0.1, 0.3, 0.6],
        ))
        .unwrap();
        let view = coarsen(&t, &Grouping::from_assignment(vec![0, 0, 1]).unwrap()).unwrap();
        let exact = group_certify(&view, t.probs()).unwrap();
        assert!(exact.report.l_ts.abs() < 1e-15 && exact.report.pass);
        let constant = DMatrix::from_fn(2, 3, |_, k| t.bar_t()[k]);
        let c = group_certify(&view, &constant).unwrap();
        assert!((c.report.l_ts - view.i_a()).abs() < 1e-12);
        assert!(!c.report.pass);
    }

    #[test]
    fn hinge_cases() {
        assert_eq!(hinge_margin_loss(0.9, 1.0, 0.1).unwrap(), 0.0);
        assert!((hinge_margin_loss(1.0, 1.0, 0.1).unwrap() - 0.01).abs() < 1e-15);
        assert_eq!(hinge_margin_loss(0.2, 1.0, 0.1).unwrap(), 0.0);
        assert!(hinge_margin_loss(0.2, 1.0, 1.0).is_err());
        assert!(hinge_margin_loss(0.2, 1.0, 0.0).is_err());
    }

    #[test]
    fn report_serialization() {
        let r = CertificateReport::new(1.0, 0.25, 10, 0);
        let v = serde_json::to_value(r).unwrap();
        for key in ["i_t", "l_ts", "g_t", "n", "pass", "clamp_count"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(r.csv_row(3), "3,1,0.25,0.75,true");
    }
}
