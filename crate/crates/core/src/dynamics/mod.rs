//! Encoder/decoder training against a fixed teacher and witness.

mod grad;
mod model;
mod train;

pub use grad::{
    alignment_mean_grad, backward, finite_difference_check, gradient_stats, losses, prefit_backward, r_grad,
    relative_error, BlockCheck, GradientStats, Gradients, Losses, R_GRAD_GUARD,
};
pub use model::{step_noise, Affine, Decoder, Encoder, ForwardPass, Vae, BLOCK_NAMES, ENCODER_BLOCKS, LOGVAR_MAX, LOGVAR_MIN};
pub use train::{
    escape_run, reconstruction_diagnostics, reconstruction_kl, train, EpochRecord, EscapeOutcome, EscapeSummary, Phase,
    ReconDiagnostics, TrainData, TrainOutcome,
};

use serde::{Deserialize, Serialize};

use crate::certificate::CertificateReport;
use crate::error::{Error, Result};
use crate::numeric::{pairwise_mean, std_dev};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Vae,
    Rst,
    RstPrefit,
    RstAlphaPrefit,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Vae => "vae",
            Variant::Rst => "rst",
            Variant::RstPrefit => "rst-prefit",
            Variant::RstAlphaPrefit => "rst-alpha-prefit",
        }
    }

    pub fn prefits(self) -> bool {
        matches!(self, Variant::RstPrefit | Variant::RstAlphaPrefit)
    }
}

fn default_one() -> f64 {
    1.0
}
fn default_lr() -> f64 {
    1e-2
}
fn default_epochs() -> usize {
    20
}
fn default_batch() -> usize {
    64
}
fn default_hidden() -> usize {
    64
}
fn default_prefit_epochs() -> usize {
    5
}
fn default_prefit_tau_fraction() -> f64 {
    0.1
}
fn default_variant() -> Variant {
    Variant::Rst
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_one")]
    pub lambda_ts: f64,
    #[serde(default = "default_one")]
    pub alpha_kl: f64,
    /// Stress multiplier on `alpha_kl`.
    #[serde(default = "default_one")]
    pub beta_kl: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_prefit_epochs")]
    pub prefit_epochs: usize,
    /// Defaults to `lr`.
    #[serde(default)]
    pub prefit_lr: Option<f64>,
    /// Margin of the scaled prefit target as a fraction of `I_T`.
    #[serde(default = "default_prefit_tau_fraction")]
    pub prefit_tau_fraction: f64,
    /// Replaces `L_TS` by `([L_TS − (I_T − τ)]₊)²` when set.
    #[serde(default)]
    pub hinge_tau: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl TrainConfig {
    pub fn with_variant(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    /// Effective alignment weight; zero for the plain VAE.
    pub fn lambda(&self) -> f64 {
        match self.variant {
            Variant::Vae => 0.0,
            _ => self.lambda_ts,
        }
    }

    pub fn kl_weight(&self) -> f64 {
        self.alpha_kl * self.beta_kl
    }

    /// Range violations, each prefixed with `prefix`.
    pub fn violations(&self, prefix: &str) -> Vec<String> {
        let mut v = Vec::new();
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                v.push(format!("{prefix}{msg}"));
            }
        };
        need(self.lr > 0.0 && self.lr.is_finite(), "lr must be > 0");
        need(self.lambda_ts >= 0.0 && self.lambda_ts.is_finite(), "lambda_ts must be >= 0");
        need(self.alpha_kl >= 0.0 && self.alpha_kl.is_finite(), "alpha_kl must be >= 0");
        need(self.beta_kl > 0.0 && self.beta_kl.is_finite(), "beta_kl must be > 0");
        need(self.batch_size > 0, "batch_size must be > 0");
        need(self.hidden > 0, "hidden must be > 0");
        need(self.prefit_lr.is_none_or(|l| l > 0.0 && l.is_finite()), "prefit_lr must be > 0");
        need(
            self.prefit_tau_fraction > 0.0 && self.prefit_tau_fraction < 1.0,
            "prefit_tau_fraction must lie in (0, 1)",
        );
        need(self.hinge_tau.is_none_or(|t| t > 0.0), "hinge_tau must be > 0");
        need(!self.variant.prefits() || self.prefit_epochs > 0, "prefit_epochs must be > 0 for prefit variants");
        need(self.variant != Variant::Rst || self.lambda_ts > 0.0, "lambda_ts must be > 0 for rst");
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations("train.");
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Schema(v))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub l_rec: f64,
    pub l_kl: f64,
    pub l_ts: f64,
    /// Batch `I_T − L_TS`.
    pub g_t: f64,
    pub g_ts_norm: f64,
    pub g_vae_norm: f64,
    pub r_grad: f64,
    pub cos: f64,
}

pub const TRACE_CSV_HEADER: &str = "step,l_rec,l_kl,l_ts,g_t,g_ts_norm,g_vae_norm,r_grad,cos";

pub fn trace_csv(records: &[TraceRecord]) -> String {
    let mut s = String::from(TRACE_CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.step, r.l_rec, r.l_kl, r.l_ts, r.g_t, r.g_ts_norm, r.g_vae_norm, r.r_grad, r.cos
        ));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DominanceSummary {
    pub mean_r_grad: f64,
    pub mean_cos: f64,
    /// Near-exact opposition of the two gradient sets.
    pub cancellation: bool,
}

/// `None` for an empty window.
pub fn dominance_diagnostics(window: &[TraceRecord]) -> Option<DominanceSummary> {
    if window.is_empty() {
        return None;
    }
    let r: Vec<f64> = window.iter().map(|w| w.r_grad).collect();
    let c: Vec<f64> = window.iter().map(|w| w.cos).collect();
    let mean_r_grad = pairwise_mean(&r);
    let mean_cos = pairwise_mean(&c);
    Some(DominanceSummary {
        mean_r_grad,
        mean_cos,
        cancellation: mean_cos < -0.95 && (0.9..=1.1).contains(&mean_r_grad),
    })
}

/// Per-variant aggregate over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub g_t_mean: f64,
    pub g_t_std: f64,
    pub l_ts_mean: f64,
    pub pass_count: usize,
}

impl RunSummary {
    pub fn from_reports(variant: &str, runs: &[(u64, CertificateReport)]) -> Self {
        let g: Vec<f64> = runs.iter().map(|(_, r)| r.g_t).collect();
        let l: Vec<f64> = runs.iter().map(|(_, r)| r.l_ts).collect();
        Self {
            variant: variant.to_string(),
            seeds: runs.iter().map(|(s, _)| *s).collect(),
            g_t_mean: pairwise_mean(&g),
            g_t_std: std_dev(&g),
            l_ts_mean: pairwise_mean(&l),
            pass_count: runs.iter().filter(|(_, r)| r.pass).count(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(r_grad: f64, cos: f64) -> TraceRecord {
        TraceRecord {
            step: 0,
            l_rec: 0.0,
            l_kl: 0.0,
            l_ts: 0.0,
            g_t: 0.0,
            g_ts_norm: 1.0,
            g_vae_norm: 1.0,
            r_grad,
            cos,
        }
    }

    #[test]
    fn dominance_flags() {
        assert!(dominance_diagnostics(&[]).is_none());
        let d = dominance_diagnostics(&[record(1.0, -1.0), record(1.02, -0.99)]).unwrap();
        assert!(d.cancellation);
        let d = dominance_diagnostics(&[record(3.0, -1.0)]).unwrap();
        assert!(!d.cancellation);
        let d = dominance_diagnostics(&[record(1.0, 0.2)]).unwrap();
        assert!(!d.cancellation);
    }

    #[test]
    fn config_defaults_and_violations() {
        let c = TrainConfig::default();
        assert_eq!(c.variant, Variant::Rst);
        assert_eq!((c.lr, c.epochs, c.batch_size, c.hidden), (1e-2, 20, 64, 64));
        assert!(c.violations("").is_empty());
        let bad = TrainConfig {
            lr: 0.0,
            hinge_tau: Some(-1.0),
            ..c.clone()
        };
        let v = bad.violations("train.");
        assert!(v.contains(&"train.lr must be > 0".to_string()));
        assert_eq!(v.len(), 2);
        assert_eq!(TrainConfig::with_variant(Variant::Vae).lambda(), 0.0);
        let parsed: TrainConfig = serde_json::from_str(r#"{"variant":"rst-alpha-prefit","beta_kl":4}"#).unwrap();
        assert_eq!(parsed.kl_weight(), 4.0);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lrr":1}"#).is_err());
    }

    #[test]
    fn summary_counts_passes() {
        let runs = vec![
            (0, CertificateReport::new(1.0, 0.5, 10, 0)),
            (1, CertificateReport::new(1.0, 1.5, 10, 0)),
        ];
        let s = RunSummary::from_reports("rst", &runs);
        assert_eq!(s.pass_count, 1);
        assert!((s.g_t_mean - 0.0).abs() < 1e-12);
        assert!(trace_csv(&[record(1.0, 0.0)]).starts_with(TRACE_CSV_HEADER));
    }
}
