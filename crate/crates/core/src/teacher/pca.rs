use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Principal directions fitted by eigendecomposition of the sample
/// covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `m` orthonormal rows in input space, by decreasing variance.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
}

/// Fits the top-`m` principal directions of an `N × D` data matrix.
///
/// Eigenvector signs are fixed so that each component's largest-magnitude
/// entry is positive.
pub fn fit_pca(data: &DMatrix<f64>, m: usize) -> Result<PcaModel> {
    let (n, d) = data.shape();
    if m == 0 || m > n.min(d) {
        return Err(Error::Dimension(format!(
            "cannot extract {m} components from {n} samples of dimension {d}"
        )));
    }
    if n < 2 {
        return Err(Error::Dimension("PCA needs at least two samples".into()));
    }
    let mean: DVector<f64> = data.row_mean().transpose();
    let mut centered = data.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.tr_mul(&centered) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut components = Vec::with_capacity(m);
    let mut explained_variance = Vec::with_capacity(m);
    for &idx in order.iter().take(m) {
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let pivot = v
            .iter()
            .copied()
            .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        explained_variance.push(eig.eigenvalues[idx].max(0.0));
    }
    Ok(PcaModel {
        mean: mean.as_slice().to_vec(),
        components,
        explained_variance,
    })
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.len()
    }

    fn component_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.output_dim(), self.input_dim(), |i, j| self.components[i][j])
    }

    /// Projects rows of `data` onto the components.
    pub fn transform(&self, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if data.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "PCA expects {} features, got {}",
                self.input_dim(),
                data.ncols()
            )));
        }
        let mut centered = data.clone();
        for mut row in centered.row_iter_mut() {
            for (x, m) in row.iter_mut().zip(&self.mean) {
                *x -= m;
            }
        }
        Ok(centered * self.component_matrix().transpose())
    }

    pub fn inverse_transform(&self, projected: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if projected.ncols() != self.output_dim() {
            return Err(Error::Shape(format!(
                "PCA inverse expects {} coordinates, got {}",
                self.output_dim(),
                projected.ncols()
            )));
        }
        let mut out = projected * self.component_matrix();
        for mut row in out.row_iter_mut() {
            for (x, m) in row.iter_mut().zip(&self.mean) {
                *x += m;
            }
        }
        Ok(out)
    }
}
