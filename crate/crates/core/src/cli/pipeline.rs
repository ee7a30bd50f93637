//! Dataset preparation, teacher resolution and witness construction shared
//! by every command.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use super::config::{DatasetSpec, LoadedConfig, TeacherSpec, WitnessConfig};
use crate::data::{self, Dataset, SplitTag};
use crate::dynamics::TrainData;
use crate::error::{Error, Result};
use crate::geometry::WitnessSpec;
use crate::teacher::{
    label_smoothed_teacher, search_teachers, Candidate, ScoreWeights, SearchGrid, TeacherPosterior, TeacherSnapshot,
    SNAPSHOT_FILE,
};

/// Split and (optionally) standardized dataset.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub train_idx: Vec<usize>,
    pub eval_idx: Vec<usize>,
}

impl Prepared {
    pub fn x_train(&self) -> DMatrix<f64> {
        self.dataset.rows(&self.train_idx)
    }
}

pub fn load_dataset(spec: &DatasetSpec, resolve: impl Fn(&Path) -> PathBuf) -> Result<Dataset> {
    match spec {
        DatasetSpec::Synthetic {
            n,
            dim,
            clusters,
            separation,
            seed,
        } => data::synth_mixture(*n, *dim, *clusters, *separation, *seed),
        DatasetSpec::Idx { images, labels, limit } => {
            let ds = data::load_idx(&resolve(images), &resolve(labels))?;
            match limit {
                Some(l) if *l < ds.n() => {
                    let idx: Vec<usize> = (0..*l).collect();
                    Dataset::new(ds.rows(&idx), ds.labels.map(|v| v[..*l].to_vec()))
                }
                _ => Ok(ds),
            }
        }
    }
}

pub fn prepare(ds: Dataset, fractions: &[f64], split_seed: u64, standardize: bool) -> Result<Prepared> {
    let mut ds = data::split(&ds, fractions, split_seed)?;
    let train_idx = ds.indices(SplitTag::Train);
    let eval_idx = ds.indices(SplitTag::Test);
    if eval_idx.is_empty() {
        return Err(Error::Domain(
            "split leaves no test rows for the held-out certificate; lower the fractions".into(),
        ));
    }
    if standardize {
        ds.x = data::standardize(&ds.x, &train_idx)?;
    }
    Ok(Prepared {
        dataset: ds,
        train_idx,
        eval_idx,
    })
}

pub fn prepare_from_config(loaded: &LoadedConfig) -> Result<Prepared> {
    let c = &loaded.config;
    let ds = load_dataset(&c.dataset, |p| loaded.resolve(p))?;
    prepare(ds, &c.split.fractions, c.split.seed, c.standardize)
}

/// Searched teacher: ranked candidates plus a snapshot whose probabilities
/// cover every dataset row.
pub struct SearchedTeacher {
    pub candidates: Vec<Candidate>,
    pub snapshot: TeacherSnapshot,
    pub teacher: TeacherPosterior,
}

/// Searches on the train rows and scores all rows with the best candidate.
pub fn search_teacher(p: &Prepared, grid: &SearchGrid, weights: &ScoreWeights) -> Result<SearchedTeacher> {
    let candidates = search_teachers(&p.x_train(), grid, weights)?;
    let best = candidates
        .iter()
        .find(|c| c.error.is_none())
        .ok_or_else(|| Error::Numeric("every teacher candidate failed to fit".into()))?;
    let snapshot = TeacherSnapshot::from_candidate(best)?;
    let teacher = TeacherPosterior::from_probs(snapshot.score_inputs(&p.dataset.x)?)?;
    Ok(SearchedTeacher {
        candidates,
        snapshot,
        teacher,
    })
}

pub fn label_smoothed(p: &Prepared, epsilon: f64, k: Option<usize>) -> Result<(TeacherSnapshot, TeacherPosterior)> {
    let labels = p
        .dataset
        .labels
        .as_ref()
        .ok_or_else(|| Error::Dependency("label-smoothed teacher needs dataset labels".into()))?;
    let k = k.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    let t = label_smoothed_teacher(labels, k, epsilon)?;
    Ok((TeacherSnapshot::label_smoothed(&t, epsilon), t))
}

/// Where the frozen teacher lives for this config.
pub fn snapshot_path(loaded: &LoadedConfig, out_root: &Path) -> PathBuf {
    match &loaded.config.teacher {
        TeacherSpec::Snapshot(p) => loaded.resolve(p),
        _ => out_root.join("teacher").join(SNAPSHOT_FILE),
    }
}

/// Loads the frozen teacher; a missing snapshot is a dependency error.
pub fn load_teacher(loaded: &LoadedConfig, out_root: &Path, n: usize) -> Result<(TeacherSnapshot, TeacherPosterior, PathBuf)> {
    let path = snapshot_path(loaded, out_root);
    if !path.exists() {
        return Err(Error::Dependency(format!(
            "no teacher snapshot at {}; run search-teacher first",
            path.display()
        )));
    }
    let (snap, t) = TeacherSnapshot::load(&path)?;
    if t.n() != n {
        return Err(Error::Consistency(format!(
            "teacher snapshot covers {} rows but the dataset has {n}",
            t.n()
        )));
    }
    Ok((snap, t, path))
}

/// Witness whose offsets are the train-row teacher mean.
pub fn witness_for(cfg: &WitnessConfig, t_train: &TeacherPosterior) -> Result<WitnessSpec> {
    if let Some(k) = cfg.k {
        if k != t_train.k() {
            return Err(Error::Consistency(format!(
                "witness.K = {k} but the teacher has {} components",
                t_train.k()
            )));
        }
    }
    WitnessSpec::new(cfg.d_z, cfg.beta, t_train.bar_t())
}

pub fn train_data(p: &Prepared, teacher: &TeacherPosterior) -> Result<TrainData> {
    Ok(TrainData {
        x_train: p.x_train(),
        t_train: teacher.select(&p.train_idx)?,
        x_eval: p.dataset.rows(&p.eval_idx),
        t_eval: teacher.select(&p.eval_idx)?,
    })
}
