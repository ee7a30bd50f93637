//! Frozen teacher files: a JSON descriptor plus the probability matrix in
//! the binary matrix format.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{temper_and_smooth, Candidate, GmmModel, PcaModel, TeacherPosterior};
use crate::error::{Error, Result};
use crate::matrix_io;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    PcaGmm,
    LabelSmoothed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSnapshot {
    pub kind: TeacherKind,
    pub pca: Option<PcaModel>,
    pub gmm: Option<GmmModel>,
    pub temperature: f64,
    pub epsilon: f64,
    /// Relative to the directory holding the descriptor.
    pub probs_path: String,
    pub n: usize,
    pub k: usize,
    /// SHA-256 of the probability payload.
    #[serde(default)]
    pub probs_sha256: String,
}

pub const SNAPSHOT_FILE: &str = "teacher.json";
pub const PROBS_FILE: &str = "teacher_probs.bin";

impl TeacherSnapshot {
    pub fn from_candidate(c: &Candidate) -> Result<Self> {
        let (Some(pca), Some(gmm), Some(t)) = (&c.pca, &c.gmm, &c.teacher) else {
            return Err(Error::Consistency("cannot snapshot a failed candidate".into()));
        };
        Ok(Self {
            kind: TeacherKind::PcaGmm,
            pca: Some((**pca).clone()),
            gmm: Some(gmm.clone()),
            temperature: c.params.temperature,
            epsilon: c.params.epsilon,
            probs_path: PROBS_FILE.into(),
            n: t.n(),
            k: t.k(),
            probs_sha256: String::new(),
        })
    }

    pub fn label_smoothed(teacher: &TeacherPosterior, epsilon: f64) -> Self {
        Self {
            kind: TeacherKind::LabelSmoothed,
            pca: None,
            gmm: None,
            temperature: 1.0,
            epsilon,
            probs_path: PROBS_FILE.into(),
            n: teacher.n(),
            k: teacher.k(),
            probs_sha256: String::new(),
        }
    }

    /// Writes descriptor and probabilities into `dir`; returns the
    /// descriptor path. The payload hash is recorded in the descriptor.
    pub fn save(&mut self, teacher: &TeacherPosterior, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.n = teacher.n();
        self.k = teacher.k();
        self.probs_sha256 = matrix_io::write_matrix(&dir.join(&self.probs_path), teacher.probs())?;
        let path = dir.join(SNAPSHOT_FILE);
        fs::write(&path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<(Self, TeacherPosterior)> {
        let snap: Self = serde_json::from_slice(&fs::read(path).map_err(|e| Error::io(path, e))?)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let probs_path = dir.join(&snap.probs_path);
        let bytes = fs::read(&probs_path).map_err(|e| Error::io(&probs_path, e))?;
        if !snap.probs_sha256.is_empty() && matrix_io::sha256_hex(&bytes) != snap.probs_sha256 {
            return Err(Error::Consistency(format!(
                "teacher probabilities in {} do not match the recorded hash",
                probs_path.display()
            )));
        }
        let probs = matrix_io::read_matrix(&probs_path)?;
        if probs.shape() != (snap.n, snap.k) {
            return Err(Error::Consistency(format!(
                "teacher descriptor says {}x{}, payload is {}x{}",
                snap.n,
                snap.k,
                probs.nrows(),
                probs.ncols()
            )));
        }
        let teacher = TeacherPosterior::from_probs(probs)?;
        Ok((snap, teacher))
    }

    pub fn has_feature_pipeline(&self) -> bool {
        self.pca.is_some() && self.gmm.is_some()
    }

    /// Teacher posterior for new inputs (e.g. reconstructions), through the
    /// frozen PCA → GMM → temper/smooth pipeline.
    pub fn score_inputs(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (Some(pca), Some(gmm)) = (&self.pca, &self.gmm) else {
            return Err(Error::UnsupportedTeacher(
                "teacher has no feature pipeline and cannot score new inputs".into(),
            ));
        };
        let raw = gmm.responsibilities(&pca.transform(x)?)?;
        temper_and_smooth(&raw, self.temperature, self.epsilon)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::teacher::{label_smoothed_teacher, search_teachers, ScoreWeights, SearchGrid};

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = label_smoothed_teacher(&[0, 1, 2, 1], 3, 0.1).unwrap();
        let mut snap = TeacherSnapshot::label_smoothed(&t, 0.1);
        let path = snap.save(&t, dir.path()).unwrap();
        let (back_snap, back) = TeacherSnapshot::load(&path).unwrap();
        assert_eq!(back_snap, snap);
        assert_eq!(back, t);
        assert!(matches!(
            back_snap.score_inputs(&DMatrix::zeros(1, 2)),
            Err(Error::UnsupportedTeacher(_))
        ));
    }

    #[test]
    fn tampered_payload_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let t = label_smoothed_teacher(&[0, 1], 2, 0.1).unwrap();
        let mut snap = TeacherSnapshot::label_smoothed(&t, 0.1);
        let path = snap.save(&t, dir.path()).unwrap();
        let probs = dir.path().join(PROBS_FILE);
        let mut bytes = fs::read(&probs).unwrap();
        bytes[0] ^= 1;
        fs::write(&probs, bytes).unwrap();
        assert!(matches!(TeacherSnapshot::load(&path), Err(Error::Consistency(_))));
    }

    #[test]
    fn pipeline_reproduces_stored_probabilities() {
        let data = DMatrix::from_fn(120, 3, |i, j| ((i % 3) * 4) as f64 + 0.1 * ((i * 7 + j * 3) % 11) as f64);
        let grid = SearchGrid {
            pca_dims: vec![2],
            components: vec![3],
            temperatures: vec![0.5],
            epsilons: vec![0.1],
            seeds: vec![0],
            max_iters: 50,
            tol: 1e-8,
            validation_fraction: 0.1,
        };
        let best = &search_teachers(&data, &grid, &ScoreWeights::default()).unwrap()[0];
        let snap = TeacherSnapshot::from_candidate(best).unwrap();
        let again = snap.score_inputs(&data).unwrap();
        assert!((again - best.teacher.as_ref().unwrap().probs()).amax() < 1e-12);
    }
}
