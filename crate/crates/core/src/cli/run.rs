//! Command implementations. Each writes its artifacts and a manifest under
//! `<out>/<command>/`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use super::config::{self, LoadedConfig, TeacherSpec};
use super::pipeline;
use crate::analytic::{self, alpha_path, group_alpha_thresholds, latent_energy, path_csv, uniform_grid};
use crate::certificate::{certify, coarsen, CertificateReport, Grouping};
use crate::dynamics::{
    dominance_diagnostics, escape_run, reconstruction_diagnostics, trace_csv, train, RunSummary, TrainConfig,
    TrainData, TrainOutcome, Vae,
};
use crate::error::{Error, Result};
use crate::geometry::WitnessSpec;
use crate::matrix_io;
use crate::numeric::pairwise_mean;
use crate::teacher::{TeacherPosterior, TeacherSnapshot};

pub const OUT_ENV: &str = "COLLAPSE_CERT_OUT";
pub const DEFAULT_OUT: &str = "collapse-cert-runs";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    SearchTeacher,
    Certify,
    Feasibility,
    Train,
    Stress,
    Escape,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::SearchTeacher => "search-teacher",
            Command::Certify => "certify",
            Command::Feasibility => "feasibility",
            Command::Train => "train",
            Command::Stress => "stress",
            Command::Escape => "escape",
            Command::Report => "report",
        }
    }

    fn dir(self) -> &'static str {
        match self {
            Command::SearchTeacher => "teacher",
            other => other.name(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
}

/// Output root: `--out`, then the config's `output_dir`, then the
/// environment, then a directory under the working directory.
pub fn output_root(loaded: &LoadedConfig, opts: &RunOptions) -> PathBuf {
    if let Some(o) = &opts.out {
        return o.clone();
    }
    if let Some(o) = &loaded.config.output_dir {
        return loaded.resolve(o);
    }
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT), PathBuf::from)
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config: String,
    config_sha256: String,
    seeds: &'a [u64],
    version: &'a str,
    teacher_sha256: Option<String>,
    outputs: Vec<String>,
}

struct Writer {
    dir: PathBuf,
    outputs: Vec<String>,
}

impl Writer {
    fn new(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir, outputs: Vec::new() })
    }

    fn text(&mut self, rel: &str, body: &str) -> Result<PathBuf> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        self.outputs.push(rel.to_string());
        Ok(path)
    }

    fn json<T: Serialize + ?Sized>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.text(rel, &s)
    }

    fn finish(mut self, cmd: Command, loaded: &LoadedConfig, seeds: &[u64], teacher_sha256: Option<String>) -> Result<PathBuf> {
        self.outputs.sort();
        let m = Manifest {
            command: cmd.name(),
            config: loaded.path.display().to_string(),
            config_sha256: loaded.sha256(),
            seeds,
            version: env!("CARGO_PKG_VERSION"),
            teacher_sha256,
            outputs: std::mem::take(&mut self.outputs),
        };
        self.json("manifest.json", &m)?;
        Ok(self.dir)
    }
}

/// Validates, runs, and returns the command's output directory.
pub fn run(cmd: Command, config_path: &Path, opts: &RunOptions) -> Result<PathBuf> {
    let loaded = config::load_valid(config_path)?;
    let seeds = opts.seeds.clone().unwrap_or_else(|| loaded.config.seeds.clone());
    if seeds.is_empty() {
        return Err(Error::Schema(vec!["seeds must be nonempty".into()]));
    }
    let root = output_root(&loaded, opts);
    let w = Writer::new(root.join(cmd.dir()))?;
    match cmd {
        Command::SearchTeacher => search_teacher_cmd(&loaded, w, &seeds),
        Command::Certify => certify_cmd(&loaded, &root, w, &seeds),
        Command::Feasibility => feasibility_cmd(&loaded, &root, w, &seeds),
        Command::Train => train_cmd(&loaded, &root, w, &seeds),
        Command::Stress => stress_cmd(&loaded, &root, w, &seeds),
        Command::Escape => escape_cmd(&loaded, &root, w, &seeds),
        Command::Report => report_cmd(&loaded, &root, w, &seeds),
    }
}

fn teacher_stats_json(t: &TeacherPosterior, t_train: &TeacherPosterior) -> Value {
    json!({
        "K": t.k(),
        "n": t.n(),
        "i_t": t.info(),
        "e_t": t.energy(),
        "bar_t": t.bar_t(),
        "i_t_train": t_train.info(),
        "e_t_train": t_train.energy(),
    })
}

fn search_teacher_cmd(loaded: &LoadedConfig, mut w: Writer, seeds: &[u64]) -> Result<PathBuf> {
    let c = &loaded.config;
    let p = pipeline::prepare_from_config(loaded)?;
    let (mut snap, teacher) = match &c.teacher {
        TeacherSpec::Search(s) => {
            let st = pipeline::search_teacher(&p, &s.grid, &s.weights)?;
            let mut csv = String::from("rank,pca_dim,K,temperature,epsilon,seed,i_t,e_t,fit,instab,score,error\n");
            let mut rows = Vec::new();
            for (rank, cand) in st.candidates.iter().enumerate() {
                let (i_t, e_t) = cand.teacher.as_ref().map_or((f64::NAN, f64::NAN), |t| (t.info(), t.energy()));
                let pr = &cand.params;
                let err = cand.error.clone().unwrap_or_default();
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                    rank + 1,
                    pr.pca_dim,
                    pr.k,
                    pr.temperature,
                    pr.epsilon,
                    pr.seed,
                    i_t,
                    e_t,
                    cand.fit,
                    cand.instability,
                    cand.score,
                    err.replace(',', ";")
                ));
                rows.push(json!({
                    "rank": rank + 1, "params": pr, "i_t": finite_or_null(i_t), "e_t": finite_or_null(e_t),
                    "fit": finite_or_null(cand.fit), "instab": finite_or_null(cand.instability),
                    "score": finite_or_null(cand.score), "error": cand.error,
                }));
            }
            w.text("candidates.csv", &csv)?;
            w.json("candidates.json", &rows)?;
            (st.snapshot, st.teacher)
        }
        TeacherSpec::LabelSmoothed(s) => pipeline::label_smoothed(&p, s.epsilon, c.witness.k)?,
        TeacherSpec::Snapshot(_) => {
            return Err(Error::Schema(vec![
                "teacher: search-teacher needs a search or label_smoothed teacher".into(),
            ]))
        }
    };
    snap.save(&teacher, &w.dir)?;
    w.outputs.push(crate::teacher::SNAPSHOT_FILE.into());
    w.outputs.push(crate::teacher::PROBS_FILE.into());
    let t_train = teacher.select(&p.train_idx)?;
    w.json("teacher_stats.json", &teacher_stats_json(&teacher, &t_train))?;
    let hash = snap.probs_sha256.clone();
    w.finish(Command::SearchTeacher, loaded, seeds, Some(hash))
}

fn finite_or_null(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

/// Prepared data, frozen teacher, train/eval split and witness.
struct Context {
    snapshot: TeacherSnapshot,
    teacher: TeacherPosterior,
    data: TrainData,
    witness: WitnessSpec,
}

fn context(loaded: &LoadedConfig, root: &Path) -> Result<Context> {
    let prepared = pipeline::prepare_from_config(loaded)?;
    let (snapshot, teacher, _) = pipeline::load_teacher(loaded, root, prepared.dataset.n())?;
    let data = pipeline::train_data(&prepared, &teacher)?;
    let witness = pipeline::witness_for(&loaded.config.witness, &data.t_train)?;
    Ok(Context {
        snapshot,
        teacher,
        data,
        witness,
    })
}

fn certify_cmd(loaded: &LoadedConfig, root: &Path, mut w: Writer, seeds: &[u64]) -> Result<PathBuf> {
    let ctx = context(loaded, root)?;
    let cc = &loaded.config.certify;
    let report = if let Some(p) = &cc.means {
        let mus = matrix_io::read_matrix(&loaded.resolve(p))?;
        if mus.nrows() == ctx.teacher.n() {
            certify(&ctx.teacher, &ctx.witness, &mus)?
        } else if mus.nrows() == ctx.data.t_eval.n() {
            certify(&ctx.data.t_eval, &ctx.witness, &mus)?
        } else {
            return Err(Error::Shape(format!(
                "means file has {} rows; expected {} (all rows) or {} (test rows)",
                mus.nrows(),
                ctx.teacher.n(),
                ctx.data.t_eval.n()
            )));
        }
    } else if let Some(p) = &cc.model {
        let path = loaded.resolve(p);
        let model: Vae = serde_json::from_slice(&fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
        certify(&ctx.data.t_eval, &ctx.witness, &model.encode_mean(&ctx.data.x_eval))?
    } else {
        return Err(Error::Schema(vec!["certify: give certify.means or certify.model".into()]));
    };
    w.json("certificate.json", &report)?;
    w.finish(Command::Certify, loaded, seeds, Some(ctx.snapshot.probs_sha256))
}

fn feasibility_cmd(loaded: &LoadedConfig, root: &Path, mut w: Writer, seeds: &[u64]) -> Result<PathBuf> {
    let ctx = context(loaded, root)?;
    let fc = &loaded.config.feasibility;
    let t = &ctx.teacher;
    // The path is taken on all rows, with offsets equal to their own mean.
    let wit = WitnessSpec::new(ctx.witness.d_z(), ctx.witness.beta(), t.bar_t())?;
    let tau = fc.tau.unwrap_or(fc.tau_fraction * t.info());
    if !(tau < t.info()) {
        return Err(Error::Schema(vec![format!(
            "feasibility.tau = {tau} must be < I_T = {}",
            t.info()
        )]));
    }
    let points = alpha_path(t, &wit, &uniform_grid(fc.grid_points))?;
    w.text("alpha_path.csv", &path_csv(&points, t.info()))?;
    let report = analytic::feasibility(t, &wit, tau, analytic::DEFAULT_ALPHA_TOL)?;
    w.json("feasibility.json", &report)?;

    let energy = latent_energy(t, &wit)?;
    let tc = &loaded.config.train;
    let cmp = analytic::energy_comparison(t.info(), t.energy(), t.k(), wit.beta(), tc.alpha_kl, tc.lambda_ts);
    w.json("energy.json", &json!({"latent_energy": energy, "e_t": t.energy(), "comparison": cmp}))?;

    if !fc.groupings.is_empty() {
        let views = fc
            .groupings
            .iter()
            .map(|g| coarsen(t, &Grouping::from_assignment(g.clone())?))
            .collect::<Result<Vec<_>>>()?;
        w.json("groups.json", &group_alpha_thresholds(t, &wit, &views)?)?;
    }
    w.finish(Command::Feasibility, loaded, seeds, Some(ctx.snapshot.probs_sha256))
}

fn run_json(o: &TrainOutcome, ctx: &Context) -> Result<Value> {
    let recon = if ctx.snapshot.has_feature_pipeline() && o.divergence.is_none() {
        Some(reconstruction_diagnostics(
            &ctx.data.t_eval,
            &ctx.witness,
            &o.model,
            &ctx.snapshot,
            &ctx.data.x_eval,
        )?)
    } else {
        None
    };
    let last_epoch = o.trace.len().saturating_sub(o.trace.len() / o.epochs.len().max(1));
    Ok(json!({
        "variant": o.variant.name(),
        "seed": o.seed,
        "alpha_star": o.alpha_star,
        "prefit_g_t": o.prefit_g_t,
        "epochs": o.epochs,
        "report": o.report,
        "divergence": o.divergence,
        "dominance_all": dominance_diagnostics(&o.trace),
        "dominance_last_epoch": dominance_diagnostics(&o.trace[last_epoch..]),
        "reconstruction": recon,
    }))
}

/// Trains `cfg` for every seed, writing per-seed artifacts under `prefix`.
fn train_seeds(
    ctx: &Context,
    cfg: &TrainConfig,
    seeds: &[u64],
    w: &mut Writer,
    prefix: &str,
) -> Result<(RunSummary, usize)> {
    let outcomes = seeds
        .par_iter()
        .map(|&s| train(cfg, &ctx.data, &ctx.witness, s))
        .collect::<Result<Vec<_>>>()?;
    let mut csv = String::from(CertificateReport::CSV_HEADER);
    csv.push('\n');
    let mut reports = Vec::new();
    let mut diverged = 0;
    for o in &outcomes {
        let dir = format!("{prefix}/seed{}", o.seed);
        w.text(&format!("{dir}/trace.csv"), &trace_csv(&o.trace))?;
        w.json(&format!("{dir}/run.json"), &run_json(o, ctx)?)?;
        w.json(&format!("{dir}/model.json"), &o.model)?;
        match &o.report {
            Some(r) => {
                csv.push_str(&r.csv_row(o.seed));
                csv.push('\n');
                reports.push((o.seed, *r));
            }
            None => diverged += 1,
        }
    }
    w.text(&format!("{prefix}/certificates.csv"), &csv)?;
    Ok((RunSummary::from_reports(cfg.variant.name(), &reports), diverged))
}

fn train_cmd(loaded: &LoadedConfig, root: &Path, mut w: Writer, seeds: &[u64]) -> Result<PathBuf> {
    let ctx = context(loaded, root)?;
    let c = &loaded.config;
    let mut summaries = Vec::new();
    let mut diverged = 0;
    for v in &c.variants {
        let cfg = TrainConfig {
            variant: *v,
            ..c.train.clone()
        };
        let (s, d) = train_seeds(&ctx, &cfg, seeds, &mut w, v.name())?;
        summaries.push(s);
        diverged += d;
    }
    let mut sweep = Vec::new();
    for &lambda in &c.lambda_sweep {
        let cfg = TrainConfig {
            variant: c.variants[0],
            lambda_ts: lambda,
            ..c.train.clone()
        };
        let prefix = format!("lambda_sweep/{}_lambda{lambda}", c.variants[0].name());
        let (mut s, d) = train_seeds(&ctx, &cfg, seeds, &mut w, &prefix)?;
        s.variant = format!("{}@lambda_ts={lambda}", s.variant);
        sweep.push(json!({"lambda_ts": lambda, "summary": s}));
        diverged += d;
    }
    w.json(
        "summary.json",
        &json!({"i_t_train": ctx.data.t_train.info(), "i_t_test": ctx.data.t_eval.info(), "runs": summaries, "lambda_sweep": sweep}),
    )?;
    let dir = w.finish(Command::Train, loaded, seeds, Some(ctx.snapshot.probs_sha256.clone()))?;
    if diverged > 0 {
        return Err(Error::Numeric(format!("{diverged} training runs diverged; see {}", dir.display())));
    }
    Ok(dir)
}

fn stress_cmd(loaded: &LoadedConfig, root: &Path, mut w: Writer, seeds: &[u64]) -> Result<PathBuf> {
    let ctx = context(loaded, root)?;
    let c = &loaded.config;
    let mut rows = Vec::new();
    let mut diverged = 0;
    for &b in &c.stress.beta_kl {
        for v in &c.stress.variants {
            let cfg = TrainConfig {
                variant: *v,
                beta_kl: b,
                ..c.train.clone()
            };
            let (s, d) = train_seeds(&ctx, &cfg, seeds, &mut w, &format!("beta_kl{b}/{}", v.name()))?;
            rows.push(json!({"beta_kl": b, "summary": s}));
            diverged += d;
        }
    }
    w.json("summary.json", &json!({"i_t_test": ctx.data.t_eval.info(), "runs": rows}))?;
    let dir = w.finish(Command::Stress, loaded, seeds, Some(ctx.snapshot.probs_sha256.clone()))?;
    if diverged > 0 {
        return Err(Error::Numeric(format!("{diverged} stress runs diverged; see {}", dir.display())));
    }
    Ok(dir)
}

fn escape_cmd(loaded: &LoadedConfig, root: &Path, mut w: Writer, seeds: &[u64]) -> Result<PathBuf> {
    let ctx = context(loaded, root)?;
    let ec = &loaded.config.escape;
    let cfg = ec.train.clone().unwrap_or_else(|| loaded.config.train.clone());
    let outcomes = seeds
        .par_iter()
        .map(|&s| escape_run(&cfg, &ctx.data, &ctx.witness, s, ec.steps, ec.init_scale))
        .collect::<Result<Vec<_>>>()?;
    let mut summaries = Vec::new();
    for o in &outcomes {
        let dir = format!("seed{}", o.summary.seed);
        w.text(&format!("{dir}/trace.csv"), &trace_csv(&o.trace))?;
        let mut path = String::from("step,g_t\n");
        for (i, g) in o.g_t_path.iter().enumerate() {
            path.push_str(&format!("{i},{g}\n"));
        }
        w.text(&format!("{dir}/g_t_path.csv"), &path)?;
        summaries.push(o.summary);
    }
    let mean = |f: fn(&crate::dynamics::EscapeSummary) -> f64| pairwise_mean(&summaries.iter().map(f).collect::<Vec<_>>());
    w.json(
        "summary.json",
        &json!({
            "i_t": ctx.data.t_train.info(),
            "steps": ec.steps,
            "g_t_start": mean(|s| s.g_t_start),
            "g_t_end": mean(|s| s.g_t_end),
            "g_t_max": mean(|s| s.g_t_max),
            "mean_g_ts_norm": mean(|s| s.mean_g_ts_norm),
            "runs": summaries,
        }),
    )?;
    w.finish(Command::Escape, loaded, seeds, Some(ctx.snapshot.probs_sha256.clone()))
}

/// Collects the JSON outputs of earlier commands found under `root`.
pub fn collect_report(root: &Path) -> Result<Value> {
    let sources = [
        ("teacher", "teacher/teacher_stats.json"),
        ("certificate", "certify/certificate.json"),
        ("feasibility", "feasibility/feasibility.json"),
        ("groups", "feasibility/groups.json"),
        ("train", "train/summary.json"),
        ("stress", "stress/summary.json"),
        ("escape", "escape/summary.json"),
    ];
    let mut out = serde_json::Map::new();
    for (key, rel) in sources {
        let p = root.join(rel);
        if p.exists() {
            let v: Value = serde_json::from_slice(&fs::read(&p).map_err(|e| Error::io(&p, e))?)?;
            out.insert(key.to_string(), v);
        }
    }
    if out.is_empty() {
        return Err(Error::Dependency(format!("no command outputs found under {}", root.display())));
    }
    Ok(Value::Object(out))
}

fn report_cmd(loaded: &LoadedConfig, root: &Path, mut w: Writer, seeds: &[u64]) -> Result<PathBuf> {
    let report = collect_report(root)?;
    w.json("report.json", &report)?;
    let teacher_hash = TeacherSnapshot::load(&pipeline::snapshot_path(loaded, root))
        .ok()
        .map(|(s, _)| s.probs_sha256);
    w.finish(Command::Report, loaded, seeds, teacher_hash)
}

pub fn validate_file(path: &Path) -> Result<Vec<String>> {
    Ok(config::violations(&config::load(path)?))
}
