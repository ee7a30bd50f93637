//! Regular-simplex witness geometry.
//!
//! The witness reads a latent mean `z` through `S(z) = softmax(β V z + log T̄)`
//! where the rows of `V` are unit vectors with pairwise inner product
//! `-1/(K-1)` living in the first `K-1` latent coordinates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric;

/// Default witness gain.
pub const DEFAULT_BETA: f64 = 5.0;

/// Regular simplex vertices as rows of a `K × d_z` matrix.
///
/// The centered basis vectors `e_k - 1/K` are orthonormalized by a QR
/// factorization of the first `K-1` of them (fixed column order, each basis
/// vector's first nonzero entry made positive) and each normalized vertex is
/// expressed in that basis. Coordinates `K-1..d_z` are exactly zero.
pub fn build_simplex_vertices(k: usize, d_z: usize) -> Result<DMatrix<f64>> {
    if k < 2 {
        return Err(Error::Domain(format!("simplex needs K >= 2, got {k}")));
    }
    if d_z < k - 1 {
        return Err(Error::Dimension(format!(
            "latent dimension {d_z} cannot hold a {k}-vertex simplex (needs >= {})",
            k - 1
        )));
    }
    let kf = k as f64;
    let centered = DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { 0.0 } - 1.0 / kf);

    let basis_src = centered.columns(0, k - 1).into_owned();
    let mut q = basis_src.qr().q();
    for mut col in q.column_iter_mut() {
        if let Some(&first) = col.iter().find(|x| x.abs() > 1e-12) {
            if first < 0.0 {
                col.neg_mut();
            }
        }
    }

    let unit_norm = ((kf - 1.0) / kf).sqrt();
    let mut vertices = DMatrix::zeros(k, d_z);
    for i in 0..k {
        let coords = q.transpose() * centered.column(i) / unit_norm;
        for (j, c) in coords.iter().enumerate() {
            vertices[(i, j)] = *c;
        }
    }
    Ok(vertices)
}

/// Fixed witness: vertices, gain, and log-prior offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct WitnessSpec {
    vertices: DMatrix<f64>,
    beta: f64,
    log_prior: Vec<f64>,
}

impl WitnessSpec {
    /// Builds the witness for `K = prior.len()` components in `d_z` latent
    /// dimensions. `prior` must be a full-support probability vector.
    pub fn new(d_z: usize, beta: f64, prior: &[f64]) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Domain(format!("witness gain must be > 0, got {beta}")));
        }
        check_probability_vector(prior, 1e-9, "witness prior")?;
        if prior.iter().any(|&p| p <= 0.0) {
            return Err(Error::Domain("witness prior must have full support".into()));
        }
        let vertices = build_simplex_vertices(prior.len(), d_z)?;
        Ok(Self {
            vertices,
            beta,
            log_prior: prior.iter().map(|p| p.ln()).collect(),
        })
    }

    pub fn k(&self) -> usize {
        self.vertices.nrows()
    }

    pub fn d_z(&self) -> usize {
        self.vertices.ncols()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn vertices(&self) -> &DMatrix<f64> {
        &self.vertices
    }

    pub fn log_prior(&self) -> &[f64] {
        &self.log_prior
    }

    /// `T̄`, recovered from the stored offsets.
    pub fn prior(&self) -> Vec<f64> {
        self.log_prior.iter().map(|l| l.exp()).collect()
    }

    /// Same vertices and prior with a different gain.
    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Domain(format!("witness gain must be > 0, got {beta}")));
        }
        Ok(Self {
            beta,
            ..self.clone()
        })
    }

    /// Witness logits `β v_k·z + log T̄_k`.
    pub fn logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.d_z() {
            return Err(Error::Shape(format!(
                "latent vector has length {}, witness expects {}",
                z.len(),
                self.d_z()
            )));
        }
        if !numeric::all_finite(z) {
            return Err(Error::Numeric("non-finite latent mean".into()));
        }
        Ok((0..self.k())
            .map(|k| {
                let proj: f64 = self.vertices.row(k).iter().zip(z).map(|(v, x)| v * x).sum();
                self.beta * proj + self.log_prior[k]
            })
            .collect())
    }

    /// Logits for every row of an `N × d_z` matrix of means.
    pub fn logits_batch(&self, mus: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if mus.ncols() != self.d_z() {
            return Err(Error::Shape(format!(
                "means have {} columns, witness expects {}",
                mus.ncols(),
                self.d_z()
            )));
        }
        if !numeric::all_finite(mus.as_slice()) {
            return Err(Error::Numeric("non-finite latent means".into()));
        }
        let mut logits = mus * self.vertices.transpose() * self.beta;
        for mut row in logits.row_iter_mut() {
            for (a, lp) in row.iter_mut().zip(&self.log_prior) {
                *a += lp;
            }
        }
        Ok(logits)
    }

    /// `S(z)`.
    pub fn probs(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(numeric::softmax(&self.logits(z)?))
    }

    pub fn log_probs(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(numeric::log_softmax(&self.logits(z)?))
    }

    /// `F_T(x) = β Σ_k (t_k - T̄_k) v_k`, the negative gradient of
    /// `KL(t ‖ S(μ))` with respect to `μ` at `μ = 0`.
    pub fn escape_field(&self, t_row: &[f64]) -> Result<Vec<f64>> {
        if t_row.len() != self.k() {
            return Err(Error::Shape(format!(
                "teacher row has length {}, witness has K = {}",
                t_row.len(),
                self.k()
            )));
        }
        check_probability_vector(t_row, 1e-6, "teacher row")?;
        let residual: Vec<f64> = t_row
            .iter()
            .zip(self.prior())
            .map(|(t, p)| t - p)
            .collect();
        let field = self.vertices.transpose() * DVector::from_vec(residual) * self.beta;
        Ok(field.as_slice().to_vec())
    }
}

fn check_probability_vector(p: &[f64], tol: f64, what: &str) -> Result<()> {
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::Domain(format!("{what} has negative or non-finite entries")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > tol {
        return Err(Error::Domain(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct WitnessJson {
    #[serde(rename = "K")]
    k: usize,
    d_z: usize,
    beta: f64,
    log_prior: Vec<f64>,
    vertices: Vec<f64>,
}

impl Serialize for WitnessSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut vertices = Vec::with_capacity(self.vertices.len());
        for row in self.vertices.row_iter() {
            vertices.extend(row.iter().copied());
        }
        WitnessJson {
            k: self.k(),
            d_z: self.d_z(),
            beta: self.beta,
            log_prior: self.log_prior.clone(),
            vertices,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for WitnessSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let raw = WitnessJson::deserialize(d)?;
        if raw.log_prior.len() != raw.k || raw.vertices.len() != raw.k * raw.d_z {
            return Err(D::Error::custom("witness arrays do not match K and d_z"));
        }
        if !(raw.beta > 0.0) {
            return Err(D::Error::custom("witness beta must be > 0"));
        }
        Ok(WitnessSpec {
            vertices: DMatrix::from_row_slice(raw.k, raw.d_z, &raw.vertices),
            beta: raw.beta,
            log_prior: raw.log_prior,
        })
    }
}
