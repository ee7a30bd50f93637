#![allow(dead_code)]

use collapse_cert::rng::SplitMix;
use collapse_cert::teacher::TeacherPosterior;
use nalgebra::DMatrix;

/// Full-support rows from softmax of Gaussian logits with the given spread.
pub fn random_teacher(n: usize, k: usize, spread: f64, rng: &mut SplitMix) -> TeacherPosterior {
    let mut probs = DMatrix::zeros(n, k);
    for i in 0..n {
        let logits: Vec<f64> = (0..k).map(|_| spread * rng.normal()).collect();
        for (j, p) in collapse_cert::numeric::softmax(&logits).into_iter().enumerate() {
            probs[(i, j)] = p.max(1e-300);
        }
        let s: f64 = probs.row(i).sum();
        for j in 0..k {
            probs[(i, j)] /= s;
        }
    }
    TeacherPosterior::from_probs(probs).expect("valid teacher")
}

/// Random point in the open simplex.
pub fn random_simplex_point(k: usize, rng: &mut SplitMix) -> Vec<f64> {
    let logits: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
    collapse_cert::numeric::softmax(&logits)
}

pub fn random_matrix(n: usize, m: usize, scale: f64, rng: &mut SplitMix) -> DMatrix<f64> {
    DMatrix::from_fn(n, m, |_, _| scale * rng.normal())
}

/// Random assignment of `k` components onto `groups` groups, each nonempty.
pub fn random_partition(k: usize, groups: usize, rng: &mut SplitMix) -> Vec<usize> {
    let mut a: Vec<usize> = (0..k).map(|i| if i < groups { i } else { rng.below(groups) }).collect();
    rng.shuffle(&mut a);
    a
}
