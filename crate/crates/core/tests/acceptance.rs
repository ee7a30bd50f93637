//! Acceptance run. One line per criterion, nonzero exit if any fails.
//!
//! Criteria 8 to 10 drive the full command pipeline on `configs/synthetic.json`.
//! Set `COLLAPSE_CERT_MNIST_LABELS` to an IDX label file to check the
//! label-smoothed statistics against real label frequencies as well.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use collapse_cert::analytic::{alpha_star, latent_energy, teacher_code, uniform_grid, AlphaPath, DEFAULT_ALPHA_TOL};
use collapse_cert::certificate::{
    alignment_loss, coarsen, constant_baseline, distance_bound, group_certify, student_probs, Grouping,
};
use collapse_cert::cli::{run, Command, RunOptions};
use collapse_cert::data::load_idx_labels;
use collapse_cert::dynamics::{finite_difference_check, step_noise, Vae};
use collapse_cert::geometry::WitnessSpec;
use collapse_cert::numeric;
use collapse_cert::rng::SplitMix;
use collapse_cert::teacher::label_smoothed_teacher;
use common::*;
use serde_json::Value;

type Outcome = Result<String, String>;
type Check<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn constant_predictor_identity() -> Outcome {
    let mut rng = SplitMix::new(1);
    let mut worst = 0.0f64;
    for i in 0..50 {
        let k = [2, 5, 10][i % 3];
        let t = random_teacher(500, k, 2.0, &mut rng);
        for _ in 0..20 {
            let alpha = random_simplex_point(k, &mut rng);
            // Direct mean of per-row KL(T_x ‖ α).
            let mut direct = 0.0;
            for r in 0..t.n() {
                let row = t.row(r);
                direct += row.iter().zip(&alpha).map(|(p, q)| p * (p / q).ln()).sum::<f64>();
            }
            direct /= t.n() as f64;
            let kl_bar: f64 = t.bar_t().iter().zip(&alpha).map(|(p, q)| p * (p / q).ln()).sum();
            let lib = constant_baseline(&t, &alpha).map_err(|e| e.to_string())?;
            worst = worst.max((direct - t.info() - kl_bar).abs()).max((lib - direct).abs());
        }
    }
    ensure(worst < 1e-8, || format!("max deviation {worst:e}"))?;
    Ok(format!("1000 constants, max deviation {worst:.2e}"))
}

/// Inverse code and energy identity over the shared grid.
fn code_grid(check_energy: bool) -> Outcome {
    let mut rng = SplitMix::new(2);
    let (mut worst_code, mut worst_energy) = (0.0f64, 0.0f64);
    let mut cases = 0;
    for k in [2usize, 3, 10, 50] {
        for beta in [1.0, 5.0, 20.0] {
            for d_z in [k - 1, 128] {
                let t = random_teacher(100, k, 2.0, &mut rng);
                let w = WitnessSpec::new(d_z, beta, t.bar_t()).map_err(|e| e.to_string())?;
                let codes = teacher_code(&t, &w).map_err(|e| e.to_string())?;
                let s = student_probs(&w, &codes).map_err(|e| e.to_string())?;
                worst_code = worst_code.max((s - t.probs()).amax());
                let half_mean_sq = 0.5 * codes.row_iter().map(|r| r.norm_squared()).sum::<f64>() / t.n() as f64;
                let closed = (k as f64 - 1.0) / (2.0 * k as f64 * beta * beta) * t.energy();
                let lib = latent_energy(&t, &w).map_err(|e| e.to_string())?;
                worst_energy = worst_energy.max((half_mean_sq - closed).abs()).max((lib - closed).abs());
                cases += 1;
            }
        }
    }
    if !check_energy {
        ensure(worst_code < 1e-9, || format!("max row deviation {worst_code:e}"))?;
        return Ok(format!("{cases} grid cases, max row deviation {worst_code:.2e}"));
    }
    ensure(worst_energy < 1e-9, || format!("max energy deviation {worst_energy:e}"))?;
    let t = label_smoothed_teacher(&(0..1000).map(|i| i % 10).collect::<Vec<_>>(), 10, 0.05).map_err(|e| e.to_string())?;
    let w = WitnessSpec::new(9, 5.0, t.bar_t()).map_err(|e| e.to_string())?;
    let e = latent_energy(&t, &w).map_err(|e| e.to_string())?;
    ensure((e - 0.446898).abs() < 1e-4, || format!("balanced latent energy {e}"))?;
    Ok(format!("{cases} grid cases, max deviation {worst_energy:.2e}; balanced K=10 latent energy {e:.6}"))
}

const MNIST_TRAIN_COUNTS: [usize; 10] = [5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949];

fn label_smoothed_stats() -> Outcome {
    let balanced: Vec<usize> = (0..60_000).map(|i| i % 10).collect();
    let t = label_smoothed_teacher(&balanced, 10, 0.05).map_err(|e| e.to_string())?;
    ensure((t.info() - 2.02019).abs() < 1e-4, || format!("balanced I_T {}", t.info()))?;
    ensure((t.energy() - 24.8277).abs() < 1e-3, || format!("balanced E_T {}", t.energy()))?;

    let (labels, source) = match std::env::var_os("COLLAPSE_CERT_MNIST_LABELS") {
        Some(p) => (load_idx_labels(Path::new(&p)).map_err(|e| e.to_string())?, "IDX labels"),
        None => (
            MNIST_TRAIN_COUNTS.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect(),
            "published train counts",
        ),
    };
    let m = label_smoothed_teacher(&labels, 10, 0.05).map_err(|e| e.to_string())?;
    ensure((m.info() - 2.0189).abs() < 0.02, || format!("MNIST I_T {}", m.info()))?;
    Ok(format!(
        "balanced I_T {:.5} E_T {:.4}; MNIST ({source}) I_T {:.4}",
        t.info(),
        t.energy(),
        m.info()
    ))
}

fn alpha_path_suite() -> Outcome {
    let mut rng = SplitMix::new(5);
    let mut worst = 0.0f64;
    for case in 0..30 {
        let k = [2, 3, 5, 10, 50][case % 5];
        let t = random_teacher(200, k, 2.0, &mut rng);
        let w = WitnessSpec::new(k + 1, 5.0, t.bar_t()).map_err(|e| e.to_string())?;
        let path = AlphaPath::new(&t, &w).map_err(|e| e.to_string())?;
        let codes = teacher_code(&t, &w).map_err(|e| e.to_string())?;
        ensure((path.loss(0.0) - t.info()).abs() < 1e-9, || format!("L(0) = {}", path.loss(0.0)))?;
        ensure(path.loss(1.0).abs() < 1e-9, || format!("L(1) = {}", path.loss(1.0)))?;
        let grid = uniform_grid(101);
        let c1 = path.cost(1.0);
        let mut prev = f64::INFINITY;
        for &a in &grid {
            let l = path.loss(a);
            ensure(l <= prev + 1e-9, || format!("increase at α = {a}"))?;
            prev = l;
            let direct = alignment_loss(&t, &w, &(&codes * a)).map_err(|e| e.to_string())?;
            worst = worst.max((direct - l).abs());
            ensure((path.cost(a) - a * a * c1).abs() < 1e-9, || format!("cost not quadratic at α = {a}"))?;
        }
        let tau = (0.05 + 0.9 * rng.uniform()) * t.info();
        let a_star = alpha_star(&t, &w, tau, DEFAULT_ALPHA_TOL).map_err(|e| e.to_string())?;
        let bound = t.info() - tau;
        ensure(path.loss(a_star) <= bound + 1e-12, || format!("L(α★) above I_T − τ for case {case}"))?;
        let before = a_star - 1e-4;
        let flat = (path.loss(before) - path.loss(a_star)).abs() < 1e-12;
        ensure(before < 0.0 || flat || path.loss(before) > bound, || format!("α★ − 1e-4 also feasible, case {case}"))?;
    }
    ensure(worst < 1e-8, || format!("closed form vs direct {worst:e}"))?;
    Ok(format!("30 teachers, closed form vs direct {worst:.2e}"))
}

fn group_suite() -> Outcome {
    let mut rng = SplitMix::new(6);
    for case in 0..100 {
        let k = 2 + rng.below(11);
        let t = random_teacher(60, k, 2.0, &mut rng);
        let groups = 1 + rng.below(k);
        let g = Grouping::from_assignment(random_partition(k, groups, &mut rng)).map_err(|e| e.to_string())?;
        let view = coarsen(&t, &g).map_err(|e| e.to_string())?;
        ensure(view.i_a() <= t.info() + 1e-9, || format!("i_a > i_t in case {case}"))?;
        let students = random_teacher(60, k, 1.0, &mut rng);
        let gc = group_certify(&view, students.probs()).map_err(|e| e.to_string())?;
        ensure(gc.report.l_ts <= gc.l_ts_full + 1e-9, || format!("L_A > L_TS in case {case}"))?;
    }
    let mut worst_ratio = 0.0f64;
    for case in 0..100 {
        let k = [2, 5, 10][case % 3];
        let t = random_teacher(40, k, 2.0, &mut rng);
        let w = WitnessSpec::new(k + 2, 5.0, t.bar_t()).map_err(|e| e.to_string())?;
        let codes = teacher_code(&t, &w).map_err(|e| e.to_string())?;
        let mus = &codes + random_matrix(40, k + 2, 2.0 * rng.uniform(), &mut rng);
        let l = alignment_loss(&t, &w, &mus).map_err(|e| e.to_string())?;
        let mean_sq = (&mus - &codes).row_iter().map(|r| r.norm_squared()).sum::<f64>() / 40.0;
        let bound = 25.0 * k as f64 / (2.0 * (k as f64 - 1.0)) * mean_sq;
        let lib = distance_bound(&w, &mus, &codes).map_err(|e| e.to_string())?;
        ensure((lib - bound).abs() <= 1e-9 * bound.max(1.0), || format!("library bound differs in case {case}"))?;
        ensure(l <= bound + 1e-8, || format!("distance bound fails in case {case}: {l} > {bound}"))?;
        if bound > 0.0 {
            worst_ratio = worst_ratio.max(l / bound);
        }
    }
    Ok(format!("100 partitions, 100 perturbations, max L_TS / bound {worst_ratio:.3}"))
}

fn gradient_check() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = SplitMix::keyed(seed, 7, 0);
        let input = 2 + rng.below(7);
        let hidden = 2 + rng.below(15);
        let k = 2 + rng.below(3);
        let d_z = (k - 1) + rng.below(7 - k);
        let batch = 1 + rng.below(8);
        let t = random_teacher(batch, k, 1.5, &mut rng);
        let w = WitnessSpec::new(d_z, 0.5 + 3.0 * rng.uniform(), t.bar_t()).map_err(|e| e.to_string())?;
        let model = Vae::new(input, hidden, d_z, seed).map_err(|e| e.to_string())?;
        let x = random_matrix(batch, input, 1.0, &mut rng);
        let noise = step_noise(seed, 0, batch, d_z);
        let kl_weight = 0.5 + 2.0 * rng.uniform();
        for c in finite_difference_check(&model, &w, &t, &x, &noise, kl_weight, 1e-5).map_err(|e| e.to_string())? {
            worst = worst.max(c.rel_error);
            ensure(c.rel_error <= 1e-4, || format!("seed {seed}: {c:?}"))?;
        }
    }
    Ok(format!("20 configurations, max relative error {worst:.2e}"))
}

fn config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.json")
}

fn read_json(p: &Path) -> Result<Value, String> {
    let bytes = fs::read(p).map_err(|e| format!("{}: {e}", p.display()))?;
    serde_json::from_slice(&bytes).map_err(|e| e.to_string())
}

fn num(v: &Value, key: &str) -> Result<f64, String> {
    v[key].as_f64().ok_or_else(|| format!("missing number {key}"))
}

/// Searches the synthetic teacher once; later criteria reuse it.
fn prepare_teacher(out: &Path) -> Result<f64, String> {
    let opts = RunOptions {
        out: Some(out.to_path_buf()),
        seeds: None,
    };
    run(Command::SearchTeacher, &config_path(), &opts).map_err(|e| e.to_string())?;
    num(&read_json(&out.join("teacher/teacher_stats.json"))?, "i_t")
}

fn end_to_end(out: &Path) -> Outcome {
    let start = Instant::now();
    let i_t = prepare_teacher(out)?;
    ensure(i_t >= 1.0, || format!("searched teacher I_T {i_t}"))?;
    let opts = RunOptions {
        out: Some(out.to_path_buf()),
        seeds: None,
    };
    run(Command::Train, &config_path(), &opts).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let summary = read_json(&out.join("train/summary.json"))?;
    let mut parts = vec![format!("I_T {i_t:.4}")];
    for r in summary["runs"].as_array().ok_or("no runs")? {
        let name = r["variant"].as_str().unwrap_or("?");
        let pass = r["pass_count"].as_u64().unwrap_or(0);
        let seeds = r["seeds"].as_array().map_or(0, Vec::len);
        ensure(pass == 5 && seeds == 5, || format!("{name}: {pass}/{seeds} seeds pass"))?;
        parts.push(format!("{name} 5/5 G_T {:.3}", num(r, "g_t_mean")?));
    }
    ensure(parts.len() == 4, || "expected three variants".into())?;
    ensure(secs < 300.0, || format!("took {secs:.0}s"))?;
    parts.push(format!("{secs:.1}s"));
    Ok(parts.join(", "))
}

fn escape(out: &Path) -> Outcome {
    let start = Instant::now();
    let opts = RunOptions {
        out: Some(out.to_path_buf()),
        seeds: None,
    };
    run(Command::Escape, &config_path(), &opts).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let summary = read_json(&out.join("escape/summary.json"))?;
    let runs = summary["runs"].as_array().ok_or("no runs")?;
    ensure(runs.len() == 5, || format!("{} seeds", runs.len()))?;
    for r in runs {
        let (i_t, s, e, g) = (num(r, "i_t")?, num(r, "g_t_start")?, num(r, "g_t_end")?, num(r, "mean_g_ts_norm")?);
        ensure(e >= 0.5 * i_t && e > s && g > 0.0, || format!("seed {}: start {s}, end {e}, grad {g}", r["seed"]))?;
    }
    ensure(secs < 60.0, || format!("took {secs:.0}s"))?;
    Ok(format!(
        "5/5, G_T {:.4} -> {:.4}, mean grad norm {:.3}, {secs:.1}s",
        num(&summary, "g_t_start")?,
        num(&summary, "g_t_end")?,
        num(&summary, "mean_g_ts_norm")?
    ))
}

fn stress(out: &Path) -> Outcome {
    let opts = RunOptions {
        out: Some(out.to_path_buf()),
        seeds: None,
    };
    run(Command::Stress, &config_path(), &opts).map_err(|e| e.to_string())?;
    let summary = read_json(&out.join("stress/summary.json"))?;
    let mut rst = Vec::new();
    let mut vae = Vec::new();
    for r in summary["runs"].as_array().ok_or("no runs")? {
        let b = num(r, "beta_kl")?;
        let s = &r["summary"];
        let (mean, pass) = (num(s, "g_t_mean")?, s["pass_count"].as_u64().unwrap_or(0));
        match s["variant"].as_str() {
            Some("rst-alpha-prefit") => {
                ensure(pass == 5, || format!("β_kl {b}: {pass}/5 pass"))?;
                rst.push((b, mean));
            }
            Some("vae") => vae.push(format!("{b}:{mean:.3}({pass}/5)")),
            _ => {}
        }
    }
    ensure(rst.len() == 3, || format!("{} β_kl rows", rst.len()))?;
    for p in rst.windows(2) {
        ensure(p[1].1 <= p[0].1 + 0.05, || format!("G_T rises from β_kl {} to {}", p[0].0, p[1].0))?;
    }
    let means: Vec<String> = rst.iter().map(|(b, m)| format!("{b}:{m:.3}")).collect();
    Ok(format!("rst-alpha-prefit 5/5 G_T {}; vae recorded {}", means.join(" "), vae.join(" ")))
}

fn gmm_equivalence() -> Outcome {
    let mut rng = SplitMix::new(11);
    let mut worst = 0.0f64;
    let (k, d_z, a, sigma2) = (6usize, 8usize, 1.3, 0.4);
    let prior = random_simplex_point(k, &mut rng);
    let w = WitnessSpec::new(d_z, a / sigma2, &prior).map_err(|e| e.to_string())?;
    for _ in 0..1000 {
        let z: Vec<f64> = (0..d_z).map(|_| 2.0 * rng.normal()).collect();
        let log_joint: Vec<f64> = (0..k)
            .map(|c| {
                let d2: f64 = (0..d_z).map(|j| (z[j] - a * w.vertices()[(c, j)]).powi(2)).sum();
                prior[c].ln() - d2 / (2.0 * sigma2)
            })
            .collect();
        let resp = numeric::softmax(&log_joint);
        let s = w.probs(&z).map_err(|e| e.to_string())?;
        for c in 0..k {
            worst = worst.max((resp[c] - s[c]).abs());
        }
    }
    ensure(worst < 1e-10, || format!("max deviation {worst:e}"))?;
    Ok(format!("1000 points, max deviation {worst:.2e}"))
}

fn main() {
    let out = tempfile::tempdir().expect("temp dir");
    let root = out.path().to_path_buf();
    let checks: Vec<Check> = vec![
        ("constant-predictor identity", Box::new(constant_predictor_identity)),
        ("inverse code", Box::new(|| code_grid(false))),
        ("latent energy identity", Box::new(|| code_grid(true))),
        ("label-smoothed statistics", Box::new(label_smoothed_stats)),
        ("alpha path", Box::new(alpha_path_suite)),
        ("groups and distance bound", Box::new(group_suite)),
        ("gradient check", Box::new(gradient_check)),
        ("end-to-end certificate", Box::new(|| end_to_end(&root))),
        ("escape", Box::new(|| escape(&root))),
        ("stress", Box::new(|| stress(&root))),
        ("GMM responsibility witness", Box::new(gmm_equivalence)),
    ];
    let mut failed = 0;
    for (i, (name, f)) in checks.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(d) => println!("PASS {}. {name}: {d} [{secs:.1}s]", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL {}. {name}: {d} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
