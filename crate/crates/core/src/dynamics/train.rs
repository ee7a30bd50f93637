//! Training loops: joint objective, prefit variants, escape runs.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::grad::{backward, gradient_stats, prefit_backward};
use super::model::{step_noise, Vae};
use super::{TraceRecord, TrainConfig, Variant};
use crate::analytic::{alpha_star, teacher_code, DEFAULT_ALPHA_TOL};
use crate::certificate::{certify, student_probs, CertificateReport};
use crate::error::{Error, Result};
use crate::geometry::WitnessSpec;
use crate::numeric::{self, pairwise_mean};
use crate::rng::{stream, SplitMix};
use crate::teacher::{TeacherPosterior, TeacherSnapshot};

/// Training rows with their frozen teacher rows, plus a held-out set for
/// the final certificate.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub x_train: DMatrix<f64>,
    pub t_train: TeacherPosterior,
    pub x_eval: DMatrix<f64>,
    pub t_eval: TeacherPosterior,
}

impl TrainData {
    fn check(&self, w: &WitnessSpec) -> Result<()> {
        if self.x_train.nrows() != self.t_train.n() || self.x_eval.nrows() != self.t_eval.n() {
            return Err(Error::Shape("inputs and teacher rows differ in count".into()));
        }
        if self.x_train.ncols() != self.x_eval.ncols() {
            return Err(Error::Shape("train and eval inputs differ in width".into()));
        }
        if self.t_train.k() != w.k() || self.t_eval.k() != w.k() {
            return Err(Error::Shape(format!("teacher K differs from witness K = {}", w.k())));
        }
        if self.x_train.nrows() == 0 || self.x_eval.nrows() == 0 {
            return Err(Error::Shape("empty train or eval set".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prefit,
    Joint,
}

/// Full training-set certificate at the end of an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub l_ts: f64,
    pub g_t: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub variant: Variant,
    pub seed: u64,
    pub trace: Vec<TraceRecord>,
    pub epochs: Vec<EpochRecord>,
    pub model: Vae,
    pub alpha_star: Option<f64>,
    /// Training-set `G_T` right after prefitting.
    pub prefit_g_t: Option<f64>,
    /// Held-out certificate; absent when training diverged.
    pub report: Option<CertificateReport>,
    pub divergence: Option<String>,
}

fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix::keyed(seed, stream::SHUFFLE, epoch).shuffle(&mut order);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn train_certificate(model: &Vae, data: &TrainData, w: &WitnessSpec) -> Result<CertificateReport> {
    certify(&data.t_train, w, &model.encode_mean(&data.x_train))
}

/// One SGD step on the joint objective; returns the trace record.
fn joint_step(
    model: &mut Vae,
    cfg: &TrainConfig,
    w: &WitnessSpec,
    data: &TrainData,
    idx: &[usize],
    seed: u64,
    step: usize,
) -> Result<TraceRecord> {
    let x = data.x_train.select_rows(idx);
    let t = data.t_train.select(idx)?;
    let noise = step_noise(seed, step as u64, idx.len(), w.d_z());
    let g = backward(model, w, &t, &x, &noise, cfg.kl_weight())?;
    let lambda = cfg.lambda();
    let stats = gradient_stats(&g.g_ts, &g.g_vae, lambda);

    let ts_scale = match cfg.hinge_tau {
        Some(tau) => 2.0 * (g.losses.l_ts - (data.t_train.info() - tau)).max(0.0),
        None => 1.0,
    };
    model.axpy(-cfg.lr, &g.g_vae);
    model.axpy(-cfg.lr * lambda * ts_scale, &g.g_ts);
    if let Some(block) = model.first_non_finite() {
        return Err(Error::Numeric(format!("parameters in {block} became non-finite at step {step}")));
    }
    Ok(TraceRecord {
        step,
        l_rec: g.losses.l_rec,
        l_kl: g.losses.l_kl,
        l_ts: g.losses.l_ts,
        g_t: t.info() - g.losses.l_ts,
        g_ts_norm: stats.g_ts_norm,
        g_vae_norm: stats.g_vae_norm,
        r_grad: stats.r_grad,
        cos: stats.cos,
    })
}

fn prefit(
    model: &mut Vae,
    cfg: &TrainConfig,
    w: &WitnessSpec,
    data: &TrainData,
    seed: u64,
    epochs: &mut Vec<EpochRecord>,
) -> Result<(Option<f64>, f64)> {
    let codes = teacher_code(&data.t_train, w)?;
    let (alpha, target) = match cfg.variant {
        Variant::RstAlphaPrefit => {
            let tau = cfg.prefit_tau_fraction * data.t_train.info();
            let a = alpha_star(&data.t_train, w, tau, DEFAULT_ALPHA_TOL)?;
            (Some(a), codes * a)
        }
        _ => (None, codes),
    };
    let lr = cfg.prefit_lr.unwrap_or(cfg.lr);
    for epoch in 0..cfg.prefit_epochs {
        for idx in epoch_batches(data.x_train.nrows(), cfg.batch_size, seed, epoch as u64) {
            let x = data.x_train.select_rows(&idx);
            let (_, g) = prefit_backward(model, &x, &target.select_rows(&idx))?;
            model.axpy(-lr, &g);
        }
        let r = train_certificate(model, data, w)?;
        epochs.push(EpochRecord {
            epoch,
            phase: Phase::Prefit,
            l_ts: r.l_ts,
            g_t: r.g_t,
        });
    }
    Ok((alpha, epochs.last().map_or(f64::NAN, |e| e.g_t)))
}

/// Runs one variant for one seed. Divergence stops training and is reported
/// in the outcome together with the partial trace.
pub fn train(cfg: &TrainConfig, data: &TrainData, w: &WitnessSpec, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.check(w)?;
    let mut model = Vae::new(data.x_train.ncols(), cfg.hidden, w.d_z(), seed)?;
    let mut out = TrainOutcome {
        variant: cfg.variant,
        seed,
        trace: Vec::new(),
        epochs: Vec::new(),
        model: model.clone(),
        alpha_star: None,
        prefit_g_t: None,
        report: None,
        divergence: None,
    };

    if cfg.variant.prefits() {
        match prefit(&mut model, cfg, w, data, seed, &mut out.epochs) {
            Ok((alpha, g_t)) => {
                out.alpha_star = alpha;
                out.prefit_g_t = Some(g_t);
            }
            Err(Error::Numeric(msg)) => {
                out.divergence = Some(msg);
                out.model = model;
                return Ok(out);
            }
            Err(e) => return Err(e),
        }
    }

    let offset = cfg.prefit_epochs as u64 * u64::from(cfg.variant.prefits());
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for idx in epoch_batches(data.x_train.nrows(), cfg.batch_size, seed, offset + epoch as u64) {
            match joint_step(&mut model, cfg, w, data, &idx, seed, step) {
                Ok(rec) => out.trace.push(rec),
                Err(Error::Numeric(msg)) => {
                    out.divergence = Some(msg);
                    out.model = model;
                    return Ok(out);
                }
                Err(e) => return Err(e),
            }
            step += 1;
        }
        let r = train_certificate(&model, data, w)?;
        out.epochs.push(EpochRecord {
            epoch,
            phase: Phase::Joint,
            l_ts: r.l_ts,
            g_t: r.g_t,
        });
    }
    out.report = Some(certify(&data.t_eval, w, &model.encode_mean(&data.x_eval))?);
    out.model = model;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EscapeSummary {
    pub seed: u64,
    pub i_t: f64,
    pub g_t_start: f64,
    pub g_t_end: f64,
    pub g_t_max: f64,
    pub mean_g_ts_norm: f64,
}

#[derive(Debug, Clone)]
pub struct EscapeOutcome {
    pub trace: Vec<TraceRecord>,
    /// Training-set `G_T` before the first step and after every step.
    pub g_t_path: Vec<f64>,
    pub summary: EscapeSummary,
    pub model: Vae,
}

/// Joint-objective steps from an encoder whose mean head is scaled by
/// `init_scale`, so that `μ ≈ 0` at the start.
pub fn escape_run(
    cfg: &TrainConfig,
    data: &TrainData,
    w: &WitnessSpec,
    seed: u64,
    steps: usize,
    init_scale: f64,
) -> Result<EscapeOutcome> {
    cfg.validate()?;
    data.check(w)?;
    if steps == 0 {
        return Err(Error::Domain("escape run needs at least one step".into()));
    }
    let mut model = Vae::new(data.x_train.ncols(), cfg.hidden, w.d_z(), seed)?;
    model.enc.mean.w *= init_scale;
    model.enc.mean.b *= init_scale;

    let mut trace = Vec::with_capacity(steps);
    let mut g_t_path = vec![train_certificate(&model, data, w)?.g_t];
    let mut epoch = 0;
    'outer: loop {
        for idx in epoch_batches(data.x_train.nrows(), cfg.batch_size, seed, epoch) {
            if trace.len() == steps {
                break 'outer;
            }
            let rec = joint_step(&mut model, cfg, w, data, &idx, seed, trace.len())?;
            trace.push(rec);
            g_t_path.push(train_certificate(&model, data, w)?.g_t);
        }
        epoch += 1;
    }
    let norms: Vec<f64> = trace.iter().map(|r| r.g_ts_norm).collect();
    let summary = EscapeSummary {
        seed,
        i_t: data.t_train.info(),
        g_t_start: g_t_path[0],
        g_t_end: *g_t_path.last().expect("nonempty"),
        g_t_max: g_t_path.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean_g_ts_norm: pairwise_mean(&norms),
    };
    Ok(EscapeOutcome {
        trace,
        g_t_path,
        summary,
        model,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconDiagnostics {
    pub l_tr: f64,
    pub l_sr: f64,
}

/// `mean KL(T_x ‖ R_x̂)` and `mean KL(S(μ(x)) ‖ R_x̂)` from precomputed rows.
pub fn reconstruction_kl(t: &DMatrix<f64>, s: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<ReconDiagnostics> {
    if t.shape() != r.shape() || s.shape() != r.shape() {
        return Err(Error::Shape("teacher, student and reconstruction rows differ in shape".into()));
    }
    let mut clamps = 0;
    let row = |m: &DMatrix<f64>, i: usize| -> Vec<f64> { m.row(i).iter().copied().collect() };
    let mut tr = Vec::with_capacity(t.nrows());
    let mut sr = Vec::with_capacity(t.nrows());
    for i in 0..t.nrows() {
        let ri = row(r, i);
        tr.push(numeric::kl(&row(t, i), &ri, &mut clamps));
        sr.push(numeric::kl(&row(s, i), &ri, &mut clamps));
    }
    Ok(ReconDiagnostics {
        l_tr: pairwise_mean(&tr),
        l_sr: pairwise_mean(&sr),
    })
}

/// Teacher read of the reconstruction `x̂ = dec(μ(x))`. Diagnostic only.
pub fn reconstruction_diagnostics(
    t: &TeacherPosterior,
    w: &WitnessSpec,
    model: &Vae,
    snapshot: &TeacherSnapshot,
    x: &DMatrix<f64>,
) -> Result<ReconDiagnostics> {
    if !snapshot.has_feature_pipeline() {
        return Err(Error::UnsupportedTeacher(
            "label-smoothed teachers cannot score reconstructions".into(),
        ));
    }
    if t.n() != x.nrows() {
        return Err(Error::Shape(format!("{} teacher rows for {} inputs", t.n(), x.nrows())));
    }
    let mu = model.encode_mean(x);
    let r = snapshot.score_inputs(&model.decode(&mu))?;
    reconstruction_kl(t.probs(), &student_probs(w, &mu)?, &r)
}
