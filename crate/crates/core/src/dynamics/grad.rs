//! Losses and manual backpropagation.

use nalgebra::{DMatrix, RowDVector};
use serde::{Deserialize, Serialize};

use super::model::{Affine, Vae, BLOCK_NAMES, LOGVAR_MAX, LOGVAR_MIN};
use crate::certificate::{self, student_probs};
use crate::error::{Error, Result};
use crate::geometry::WitnessSpec;
use crate::numeric::pairwise_mean;
use crate::teacher::TeacherPosterior;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub l_rec: f64,
    pub l_kl: f64,
    pub l_ts: f64,
}

fn check_finite(l: &Losses) -> Result<()> {
    for (name, v) in [("l_rec", l.l_rec), ("l_kl", l.l_kl), ("l_ts", l.l_ts)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} is {v}")));
        }
    }
    Ok(())
}

fn losses_from(t: &TeacherPosterior, w: &WitnessSpec, x: &DMatrix<f64>, f: &super::model::ForwardPass) -> Result<Losses> {
    let rec: Vec<f64> = (0..x.nrows())
        .map(|i| 0.5 * (x.row(i) - f.x_hat.row(i)).norm_squared())
        .collect();
    let kl: Vec<f64> = (0..x.nrows())
        .map(|i| {
            0.5 * f
                .mu
                .row(i)
                .iter()
                .zip(f.logvar.row(i).iter())
                .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
                .sum::<f64>()
        })
        .collect();
    let l = Losses {
        l_rec: pairwise_mean(&rec),
        l_kl: pairwise_mean(&kl),
        l_ts: certificate::alignment_loss(t, w, &f.mu)?,
    };
    check_finite(&l)?;
    Ok(l)
}

/// Batch losses. `l_rec` is the per-sample unit-variance Gaussian negative
/// log-likelihood `½‖x − x̂‖²` (without the constant), averaged over rows;
/// `l_ts` reads the deterministic means only.
pub fn losses(model: &Vae, w: &WitnessSpec, t: &TeacherPosterior, x: &DMatrix<f64>, noise: &DMatrix<f64>) -> Result<Losses> {
    check_batch(model, w, t, x)?;
    losses_from(t, w, x, &model.forward(x, noise)?)
}

fn check_batch(model: &Vae, w: &WitnessSpec, t: &TeacherPosterior, x: &DMatrix<f64>) -> Result<()> {
    if t.n() != x.nrows() {
        return Err(Error::Shape(format!("{} teacher rows for a batch of {}", t.n(), x.nrows())));
    }
    if w.d_z() != model.latent_dim() {
        return Err(Error::Shape(format!(
            "witness latent dimension {} but encoder outputs {}",
            w.d_z(),
            model.latent_dim()
        )));
    }
    if x.nrows() == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    Ok(())
}

/// Separately held gradients of one batch.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// `∇_φ L_TS`; only the encoder hidden and mean blocks are nonzero.
    pub g_ts: Vae,
    /// `∇ (L_rec + kl_weight · L_KL)` over encoder and decoder.
    pub g_vae: Vae,
    pub losses: Losses,
}

fn col_sum(m: &DMatrix<f64>) -> RowDVector<f64> {
    RowDVector::from_fn(m.ncols(), |_, j| m.column(j).sum())
}

fn affine_grad(input: &DMatrix<f64>, d_out: &DMatrix<f64>) -> Affine {
    Affine {
        w: input.transpose() * d_out,
        b: col_sum(d_out),
    }
}

fn tanh_back(d_act: &DMatrix<f64>, act: &DMatrix<f64>) -> DMatrix<f64> {
    d_act.zip_map(act, |d, a| d * (1.0 - a * a))
}

/// Backpropagates `dμ` through the mean head and shared hidden layer into
/// `grad`, optionally adding a logvar-head contribution.
fn encoder_back(model: &Vae, x: &DMatrix<f64>, h: &DMatrix<f64>, d_mu: &DMatrix<f64>, d_lv: Option<&DMatrix<f64>>, grad: &mut Vae) {
    grad.enc.mean = affine_grad(h, d_mu);
    let mut d_h = d_mu * model.enc.mean.w.transpose();
    if let Some(d_lv) = d_lv {
        grad.enc.logvar = affine_grad(h, d_lv);
        d_h += d_lv * model.enc.logvar.w.transpose();
    }
    grad.enc.hidden = affine_grad(x, &tanh_back(&d_h, h));
}

fn check_grad(g: &Vae, label: &str) -> Result<()> {
    match g.first_non_finite() {
        Some(block) => Err(Error::Numeric(format!("non-finite {label} gradient in block {block}"))),
        None => Ok(()),
    }
}

/// `dL_TS/dμ = β (S − T) V / B`.
pub fn alignment_mean_grad(w: &WitnessSpec, t: &TeacherPosterior, mu: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let s = student_probs(w, mu)?;
    Ok((s - t.probs()) * w.vertices() * (w.beta() / mu.nrows() as f64))
}

pub fn backward(
    model: &Vae,
    w: &WitnessSpec,
    t: &TeacherPosterior,
    x: &DMatrix<f64>,
    noise: &DMatrix<f64>,
    kl_weight: f64,
) -> Result<Gradients> {
    check_batch(model, w, t, x)?;
    let f = model.forward(x, noise)?;
    let losses = losses_from(t, w, x, &f)?;
    let b = x.nrows() as f64;

    let mut g_vae = model.zeros_like();
    let d_xhat = (&f.x_hat - x) / b;
    g_vae.dec.out = affine_grad(&f.h2, &d_xhat);
    let d_a2 = tanh_back(&(&d_xhat * model.dec.out.w.transpose()), &f.h2);
    g_vae.dec.hidden = affine_grad(&f.z, &d_a2);
    let d_z = &d_a2 * model.dec.hidden.w.transpose();

    let d_mu = &d_z + &f.mu * (kl_weight / b);
    let mut d_lv = DMatrix::zeros(f.mu.nrows(), f.mu.ncols());
    for i in 0..d_lv.nrows() {
        for j in 0..d_lv.ncols() {
            let raw = f.logvar_raw[(i, j)];
            if !(LOGVAR_MIN..=LOGVAR_MAX).contains(&raw) {
                continue;
            }
            let reparam = d_z[(i, j)] * noise[(i, j)] * f.sigma[(i, j)] * 0.5;
            let kl = kl_weight * 0.5 * (f.logvar[(i, j)].exp() - 1.0) / b;
            d_lv[(i, j)] = reparam + kl;
        }
    }
    encoder_back(model, x, &f.h, &d_mu, Some(&d_lv), &mut g_vae);

    let mut g_ts = model.zeros_like();
    let d_mu_ts = alignment_mean_grad(w, t, &f.mu)?;
    encoder_back(model, x, &f.h, &d_mu_ts, None, &mut g_ts);

    check_grad(&g_vae, "VAE")?;
    check_grad(&g_ts, "alignment")?;
    Ok(Gradients { g_ts, g_vae, losses })
}

/// `mean ‖μ_φ(x) − target‖²` and its gradient over the encoder mean path.
pub fn prefit_backward(model: &Vae, x: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<(f64, Vae)> {
    let h = model.hidden_features(x);
    let mu = model.enc.mean.forward(&h);
    if mu.shape() != target.shape() {
        return Err(Error::Shape(format!("prefit target {:?} vs means {:?}", target.shape(), mu.shape())));
    }
    let diff = &mu - target;
    let sq: Vec<f64> = diff.row_iter().map(|r| r.norm_squared()).collect();
    let loss = pairwise_mean(&sq);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("prefit loss is {loss}")));
    }
    let mut g = model.zeros_like();
    encoder_back(model, x, &h, &(diff * (2.0 / x.nrows() as f64)), None, &mut g);
    check_grad(&g, "prefit")?;
    Ok((loss, g))
}

/// Norms and alignment of the two gradient sets over encoder parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientStats {
    pub g_ts_norm: f64,
    pub g_vae_norm: f64,
    pub r_grad: f64,
    pub cos: f64,
}

pub const R_GRAD_GUARD: f64 = 1e-12;

pub fn r_grad(lambda_ts: f64, g_ts_norm: f64, g_vae_norm: f64) -> f64 {
    lambda_ts * g_ts_norm / (g_vae_norm + R_GRAD_GUARD)
}

pub fn gradient_stats(g_ts: &Vae, g_vae: &Vae, lambda_ts: f64) -> GradientStats {
    let a = g_ts.encoder_norm();
    let b = g_vae.encoder_norm();
    let cos = if a > 0.0 && b > 0.0 {
        g_ts.encoder_dot(g_vae) / (a * b)
    } else {
        0.0
    };
    GradientStats {
        g_ts_norm: a,
        g_vae_norm: b,
        r_grad: r_grad(lambda_ts, a, b),
        cos,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    pub block: String,
    /// `"ts"` or `"vae"`.
    pub gradient: String,
    pub rel_error: f64,
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, 1e-8)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = crate::numeric::norm(analytic).max(crate::numeric::norm(numeric)).max(1e-8);
    diff / scale
}

/// Central differences of `L_TS` and `L_rec + kl_weight·L_KL` for every
/// parameter, compared blockwise against `backward`.
pub fn finite_difference_check(
    model: &Vae,
    w: &WitnessSpec,
    t: &TeacherPosterior,
    x: &DMatrix<f64>,
    noise: &DMatrix<f64>,
    kl_weight: f64,
    h: f64,
) -> Result<Vec<BlockCheck>> {
    let grads = backward(model, w, t, x, noise, kl_weight)?;
    let eval = |m: &Vae| -> Result<(f64, f64)> {
        let l = losses(m, w, t, x, noise)?;
        Ok((l.l_ts, l.l_rec + kl_weight * l.l_kl))
    };
    let mut probe = model.clone();
    let mut out = Vec::new();
    for (b, name) in BLOCK_NAMES.iter().enumerate() {
        let len = model.blocks()[b].len();
        let mut num_ts = vec![0.0; len];
        let mut num_vae = vec![0.0; len];
        for j in 0..len {
            let orig = probe.blocks()[b][j];
            probe.blocks_mut()[b][j] = orig + h;
            let (ts_p, vae_p) = eval(&probe)?;
            probe.blocks_mut()[b][j] = orig - h;
            let (ts_m, vae_m) = eval(&probe)?;
            probe.blocks_mut()[b][j] = orig;
            num_ts[j] = (ts_p - ts_m) / (2.0 * h);
            num_vae[j] = (vae_p - vae_m) / (2.0 * h);
        }
        out.push(BlockCheck {
            block: name.to_string(),
            gradient: "ts".into(),
            rel_error: relative_error(grads.g_ts.blocks()[b], &num_ts),
        });
        out.push(BlockCheck {
            block: name.to_string(),
            gradient: "vae".into(),
            rel_error: relative_error(grads.g_vae.blocks()[b], &num_vae),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::model::step_noise;
    use super::*;
    use crate::teacher::label_smoothed_teacher;

    fn setup() -> (Vae, WitnessSpec, TeacherPosterior, DMatrix<f64>, DMatrix<f64>) {
        let model = Vae::new(3, 6, 4, 11).unwrap();
        let t = label_smoothed_teacher(&[0, 1, 2, 1, 0], 3, 0.1).unwrap();
        let w = WitnessSpec::new(4, 2.0, t.bar_t()).unwrap();
        let x = DMatrix::from_fn(5, 3, |i, j| ((i * 3 + j) as f64 * 0.7).sin());
        let noise = step_noise(0, 0, 5, 4);
        (model, w, t, x, noise)
    }

    #[test]
    fn zero_posterior_has_zero_kl_and_constant_mean_gives_information() {
        let (mut model, w, t, x, noise) = setup();
        for a in [&mut model.enc.mean, &mut model.enc.logvar] {
            a.w.fill(0.0);
            a.b.fill(0.0);
        }
        let l = losses(&model, &w, &t, &x, &noise).unwrap();
        assert!(l.l_kl.abs() < 1e-12);
        assert!((l.l_ts - t.info()).abs() < 1e-10);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (model, w, t, x, noise) = setup();
        for c in finite_difference_check(&model, &w, &t, &x, &noise, 0.7, 1e-5).unwrap() {
            assert!(c.rel_error <= 1e-4, "{c:?}");
        }
    }

    #[test]
    fn prefit_gradient_matches_finite_differences() {
        let (model, _, _, x, _) = setup();
        let target = DMatrix::from_fn(5, 4, |i, j| (i as f64 - j as f64) * 0.1);
        let (_, g) = prefit_backward(&model, &x, &target).unwrap();
        let mut probe = model.clone();
        let h = 1e-5;
        for b in [0, 1, 2, 3] {
            let len = model.blocks()[b].len();
            let mut num = vec![0.0; len];
            for j in 0..len {
                let orig = probe.blocks()[b][j];
                probe.blocks_mut()[b][j] = orig + h;
                let lp = prefit_backward(&probe, &x, &target).unwrap().0;
                probe.blocks_mut()[b][j] = orig - h;
                let lm = prefit_backward(&probe, &x, &target).unwrap().0;
                probe.blocks_mut()[b][j] = orig;
                num[j] = (lp - lm) / (2.0 * h);
            }
            assert!(relative_error(g.blocks()[b], &num) < 1e-6);
        }
        assert!(g.blocks()[4].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn alignment_gradient_touches_only_the_mean_path() {
        let (model, w, t, x, noise) = setup();
        let g = backward(&model, &w, &t, &x, &noise, 1.0).unwrap();
        for (b, block) in g.g_ts.blocks().iter().enumerate().skip(4) {
            assert!(block.iter().all(|v| *v == 0.0), "{}", BLOCK_NAMES[b]);
        }
        let stats = gradient_stats(&g.g_ts, &g.g_vae, 0.0);
        assert_eq!(stats.r_grad, 0.0);
        let stats = gradient_stats(&g.g_ts, &g.g_vae, 2.0);
        assert!((stats.r_grad - 2.0 * stats.g_ts_norm / (stats.g_vae_norm + 1e-12)).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let (model, w, t, x, noise) = setup();
        let short = x.rows(0, 3).into_owned();
        assert!(matches!(losses(&model, &w, &t, &short, &noise), Err(Error::Shape(_))));
        let w2 = WitnessSpec::new(2, 2.0, t.bar_t()).unwrap();
        assert!(matches!(backward(&model, &w2, &t, &x, &noise, 1.0), Err(Error::Shape(_))));
    }
}
