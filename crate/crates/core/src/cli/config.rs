//! Versioned JSON experiment configuration and its validation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynamics::{TrainConfig, Variant};
use crate::error::{Error, Result};
use crate::teacher::{ScoreWeights, SearchGrid};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        n: usize,
        dim: usize,
        clusters: usize,
        separation: f64,
        #[serde(default)]
        seed: u64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// Keep only the first `limit` records.
        #[serde(default)]
        limit: Option<usize>,
    },
}

fn default_fractions() -> Vec<f64> {
    vec![0.9]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    /// Train share, optionally followed by validation and test shares.
    /// Rows not covered are tagged test. Held-out certificates use the
    /// test rows.
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            fractions: default_fractions(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpec {
    pub grid: SearchGrid,
    #[serde(default)]
    pub weights: ScoreWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSmoothedSpec {
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TeacherSpec {
    Search(SearchSpec),
    Snapshot(PathBuf),
    LabelSmoothed(LabelSmoothedSpec),
}

fn default_beta() -> f64 {
    crate::geometry::DEFAULT_BETA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WitnessConfig {
    /// Checked against the teacher when given.
    #[serde(default, rename = "K")]
    pub k: Option<usize>,
    pub d_z: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_grid_points() -> usize {
    101
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeasibilityConfig {
    /// Absolute margin; takes precedence over `tau_fraction`.
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default = "default_tau_fraction")]
    pub tau_fraction: f64,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    /// One-level groupings, each a component → group assignment.
    #[serde(default)]
    pub groupings: Vec<Vec<usize>>,
}

fn default_tau_fraction() -> f64 {
    0.1
}

impl Default for FeasibilityConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

fn default_steps() -> usize {
    300
}
fn default_init_scale() -> f64 {
    1e-2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EscapeConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Scale applied to the freshly initialized encoder mean head.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    /// Overrides the top-level `train` block.
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

impl Default for EscapeConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

fn default_stress_betas() -> Vec<f64> {
    vec![2.0, 4.0, 8.0]
}
fn default_stress_variants() -> Vec<Variant> {
    vec![Variant::RstAlphaPrefit, Variant::Vae]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StressConfig {
    #[serde(default = "default_stress_betas")]
    pub beta_kl: Vec<f64>,
    #[serde(default = "default_stress_variants")]
    pub variants: Vec<Variant>,
}

impl Default for StressConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifyConfig {
    /// Means matrix in the binary matrix format, one row per dataset row.
    #[serde(default)]
    pub means: Option<PathBuf>,
    /// Trained model JSON written by `train`; evaluated on the test rows.
    #[serde(default)]
    pub model: Option<PathBuf>,
}

fn default_variants() -> Vec<Variant> {
    vec![Variant::Rst, Variant::RstPrefit, Variant::RstAlphaPrefit]
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub split: SplitSpec,
    /// Per-feature standardization fitted on the train rows.
    #[serde(default = "default_true")]
    pub standardize: bool,
    pub teacher: TeacherSpec,
    pub witness: WitnessConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub feasibility: FeasibilityConfig,
    #[serde(default)]
    pub escape: EscapeConfig,
    #[serde(default)]
    pub stress: StressConfig,
    /// Extra `lambda_ts` values trained with the first variant.
    #[serde(default)]
    pub lambda_sweep: Vec<f64>,
    #[serde(default)]
    pub certify: CertifyConfig,
}

/// Parsed configuration plus its source, for hashing and path resolution.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub path: PathBuf,
    pub bytes: Vec<u8>,
}

impl LoadedConfig {
    /// Relative paths in the config are taken from the config's directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.path.parent().unwrap_or(Path::new(".")).join(p)
        }
    }

    pub fn sha256(&self) -> String {
        crate::matrix_io::sha256_hex(&self.bytes)
    }
}

/// Reads and deserializes; structural problems become schema errors with
/// the offending field path.
pub fn load(path: &Path) -> Result<LoadedConfig> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| {
        Error::Parse(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column()))
    })?;
    let config: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let field = e.path().to_string();
        Error::Schema(vec![format!("{field}: {}", e.into_inner())])
    })?;
    Ok(LoadedConfig {
        config,
        path: path.to_path_buf(),
        bytes,
    })
}

/// Structural and range checks. Margins that depend on `I_T` are checked
/// when the command runs.
pub fn violations(loaded: &LoadedConfig) -> Vec<String> {
    let c = &loaded.config;
    let mut nested = c.train.violations("train.");
    if let Some(t) = &c.escape.train {
        nested.extend(t.violations("escape.train."));
    }
    let mut v = Vec::new();
    let mut need = |ok: bool, msg: String| {
        if !ok {
            v.push(msg);
        }
    };
    let exists = |p: &Path| loaded.resolve(p).exists();

    need(
        c.schema_version == SCHEMA_VERSION,
        format!("schema_version must be {SCHEMA_VERSION}"),
    );
    need(!c.seeds.is_empty(), "seeds must be nonempty".into());

    match &c.dataset {
        DatasetSpec::Synthetic {
            n,
            dim,
            clusters,
            separation,
            ..
        } => {
            need(*n > 0, "dataset.n must be > 0".into());
            need(*dim > 0, "dataset.dim must be > 0".into());
            need(*clusters >= 1, "dataset.clusters must be >= 1".into());
            need(
                *separation >= 0.0 && separation.is_finite(),
                "dataset.separation must be >= 0".into(),
            );
        }
        DatasetSpec::Idx { images, labels, limit } => {
            need(exists(images), format!("dataset.images: {} does not exist", images.display()));
            need(exists(labels), format!("dataset.labels: {} does not exist", labels.display()));
            need(limit.is_none_or(|l| l > 0), "dataset.limit must be > 0".into());
        }
    }

    let f = &c.split.fractions;
    need(
        !f.is_empty() && f.len() <= 3 && f.iter().all(|x| *x > 0.0) && f.iter().sum::<f64>() <= 1.0 + 1e-12,
        "split.fractions must hold 1 to 3 positive shares summing to <= 1".into(),
    );

    match &c.teacher {
        TeacherSpec::Search(s) => {
            let g = &s.grid;
            need(!g.is_empty(), "teacher.search.grid: every list must be nonempty".into());
            need(g.pca_dims.iter().all(|m| *m >= 1), "teacher.search.grid.pca_dims must be >= 1".into());
            need(g.components.iter().all(|k| *k >= 1), "teacher.search.grid.components must be >= 1".into());
            need(
                g.temperatures.iter().all(|t| *t > 0.0),
                "teacher.search.grid.temperatures must be > 0".into(),
            );
            need(
                g.epsilons.iter().all(|e| (0.0..1.0).contains(e)),
                "teacher.search.grid.epsilons must lie in [0, 1)".into(),
            );
            need(g.max_iters > 0, "teacher.search.grid.max_iters must be > 0".into());
            need(
                g.validation_fraction > 0.0 && g.validation_fraction < 1.0,
                "teacher.search.grid.validation_fraction must lie in (0, 1)".into(),
            );
        }
        TeacherSpec::Snapshot(p) => {
            need(exists(p), format!("teacher.snapshot: {} does not exist", p.display()));
        }
        TeacherSpec::LabelSmoothed(s) => {
            need(
                s.epsilon > 0.0 && s.epsilon < 1.0,
                "teacher.label_smoothed.epsilon must lie in (0, 1)".into(),
            );
        }
    }

    need(c.witness.beta > 0.0 && c.witness.beta.is_finite(), "witness.beta must be > 0".into());
    need(c.witness.d_z >= 1, "witness.d_z must be >= 1".into());
    if let Some(k) = c.witness.k {
        need(k >= 2, "witness.K must be >= 2".into());
        need(c.witness.d_z + 1 >= k, "witness.d_z must be >= K - 1".into());
    }

    need(!c.variants.is_empty(), "variants must be nonempty".into());

    let fe = &c.feasibility;
    need(fe.tau.is_none_or(|t| t > 0.0), "feasibility.tau must be > 0".into());
    need(
        fe.tau_fraction > 0.0 && fe.tau_fraction < 1.0,
        "feasibility.tau_fraction must lie in (0, 1)".into(),
    );
    need(fe.grid_points >= 2, "feasibility.grid_points must be >= 2".into());
    for (i, g) in fe.groupings.iter().enumerate() {
        need(!g.is_empty(), format!("feasibility.groupings[{i}] must be nonempty"));
    }

    need(c.escape.steps > 0, "escape.steps must be > 0".into());
    need(c.escape.init_scale > 0.0, "escape.init_scale must be > 0".into());
    need(
        !c.stress.beta_kl.is_empty() && c.stress.beta_kl.iter().all(|b| *b > 0.0),
        "stress.beta_kl must be a nonempty list of values > 0".into(),
    );
    need(!c.stress.variants.is_empty(), "stress.variants must be nonempty".into());
    need(
        c.lambda_sweep.iter().all(|l| *l >= 0.0 && l.is_finite()),
        "lambda_sweep values must be >= 0".into(),
    );
    for (name, p) in [("certify.means", &c.certify.means), ("certify.model", &c.certify.model)] {
        if let Some(p) = p {
            need(exists(p), format!("{name}: {} does not exist", p.display()));
        }
    }
    v.extend(nested);
    v
}

/// Loads and validates in one go.
pub fn load_valid(path: &Path) -> Result<LoadedConfig> {
    let loaded = load(path)?;
    let v = violations(&loaded);
    if v.is_empty() {
        Ok(loaded)
    } else {
        Err(Error::Schema(v))
    }
}
