//! One-hidden-layer Gaussian encoder and decoder with named parameter blocks.

use nalgebra::{DMatrix, RowDVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, SplitMix};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

pub const BLOCK_NAMES: [&str; 10] = [
    "enc.hidden.w",
    "enc.hidden.b",
    "enc.mean.w",
    "enc.mean.b",
    "enc.logvar.w",
    "enc.logvar.b",
    "dec.hidden.w",
    "dec.hidden.b",
    "dec.out.w",
    "dec.out.b",
];

/// Blocks `0..ENCODER_BLOCKS` belong to the encoder.
pub const ENCODER_BLOCKS: usize = 6;

/// `y = x W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub w: DMatrix<f64>,
    pub b: RowDVector<f64>,
}

impl Affine {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: DMatrix::zeros(fan_in, fan_out),
            b: RowDVector::zeros(fan_out),
        }
    }

    /// Weights `N(0, 1/fan_in)`, zero bias.
    fn random(fan_in: usize, fan_out: usize, rng: &mut SplitMix) -> Self {
        let sd = (1.0 / fan_in as f64).sqrt();
        Self {
            w: DMatrix::from_fn(fan_in, fan_out, |_, _| sd * rng.normal()),
            b: RowDVector::zeros(fan_out),
        }
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x * &self.w;
        for mut row in y.row_iter_mut() {
            row += &self.b;
        }
        y
    }

    pub fn fan_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub hidden: Affine,
    pub mean: Affine,
    pub logvar: Affine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    pub hidden: Affine,
    pub out: Affine,
}

/// Encoder and decoder together. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vae {
    pub enc: Encoder,
    pub dec: Decoder,
}

/// Intermediate values of one stochastic forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub h: DMatrix<f64>,
    pub mu: DMatrix<f64>,
    pub logvar_raw: DMatrix<f64>,
    pub logvar: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub h2: DMatrix<f64>,
    pub x_hat: DMatrix<f64>,
}

impl Vae {
    pub fn zeros(input_dim: usize, hidden: usize, d_z: usize) -> Self {
        Self {
            enc: Encoder {
                hidden: Affine::zeros(input_dim, hidden),
                mean: Affine::zeros(hidden, d_z),
                logvar: Affine::zeros(hidden, d_z),
            },
            dec: Decoder {
                hidden: Affine::zeros(d_z, hidden),
                out: Affine::zeros(hidden, input_dim),
            },
        }
    }

    pub fn new(input_dim: usize, hidden: usize, d_z: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || d_z == 0 {
            return Err(Error::Dimension(format!(
                "network sizes must be positive (input {input_dim}, hidden {hidden}, latent {d_z})"
            )));
        }
        let mut rng = SplitMix::keyed(seed, stream::INIT, 0);
        Ok(Self {
            enc: Encoder {
                hidden: Affine::random(input_dim, hidden, &mut rng),
                mean: Affine::random(hidden, d_z, &mut rng),
                logvar: Affine::random(hidden, d_z, &mut rng),
            },
            dec: Decoder {
                hidden: Affine::random(d_z, hidden, &mut rng),
                out: Affine::random(hidden, input_dim, &mut rng),
            },
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.hidden_dim(), self.latent_dim())
    }

    pub fn input_dim(&self) -> usize {
        self.enc.hidden.fan_in()
    }

    pub fn hidden_dim(&self) -> usize {
        self.enc.hidden.fan_out()
    }

    pub fn latent_dim(&self) -> usize {
        self.enc.mean.fan_out()
    }

    pub fn blocks(&self) -> [&[f64]; 10] {
        [
            self.enc.hidden.w.as_slice(),
            self.enc.hidden.b.as_slice(),
            self.enc.mean.w.as_slice(),
            self.enc.mean.b.as_slice(),
            self.enc.logvar.w.as_slice(),
            self.enc.logvar.b.as_slice(),
            self.dec.hidden.w.as_slice(),
            self.dec.hidden.b.as_slice(),
            self.dec.out.w.as_slice(),
            self.dec.out.b.as_slice(),
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 10] {
        [
            self.enc.hidden.w.as_mut_slice(),
            self.enc.hidden.b.as_mut_slice(),
            self.enc.mean.w.as_mut_slice(),
            self.enc.mean.b.as_mut_slice(),
            self.enc.logvar.w.as_mut_slice(),
            self.enc.logvar.b.as_mut_slice(),
            self.dec.hidden.w.as_mut_slice(),
            self.dec.hidden.b.as_mut_slice(),
            self.dec.out.w.as_mut_slice(),
            self.dec.out.b.as_mut_slice(),
        ]
    }

    /// `self += a · other`.
    pub fn axpy(&mut self, a: f64, other: &Vae) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += a * s;
            }
        }
    }

    pub fn scale(&mut self, a: f64) {
        for block in self.blocks_mut() {
            block.iter_mut().for_each(|v| *v *= a);
        }
    }

    /// Inner product restricted to encoder blocks.
    pub fn encoder_dot(&self, other: &Vae) -> f64 {
        self.blocks()[..ENCODER_BLOCKS]
            .iter()
            .zip(&other.blocks()[..ENCODER_BLOCKS])
            .map(|(a, b)| crate::numeric::dot(a, b))
            .sum()
    }

    pub fn encoder_norm(&self) -> f64 {
        self.encoder_dot(self).sqrt()
    }

    /// Name of the first block holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.blocks()
            .iter()
            .zip(BLOCK_NAMES)
            .find(|(b, _)| !crate::numeric::all_finite(b))
            .map(|(_, n)| n)
    }

    pub fn hidden_features(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.enc.hidden.forward(x).map(f64::tanh)
    }

    /// Deterministic means `μ_φ(x)`.
    pub fn encode_mean(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.enc.mean.forward(&self.hidden_features(x))
    }

    pub fn decode(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        self.dec.out.forward(&self.dec.hidden.forward(z).map(f64::tanh))
    }

    /// Reparameterized pass with externally supplied standard-normal noise.
    pub fn forward(&self, x: &DMatrix<f64>, noise: &DMatrix<f64>) -> Result<ForwardPass> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "inputs have {} features, encoder expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        if noise.shape() != (x.nrows(), self.latent_dim()) {
            return Err(Error::Shape(format!(
                "noise is {:?}, expected {:?}",
                noise.shape(),
                (x.nrows(), self.latent_dim())
            )));
        }
        let h = self.hidden_features(x);
        let mu = self.enc.mean.forward(&h);
        let logvar_raw = self.enc.logvar.forward(&h);
        let logvar = logvar_raw.map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX));
        let sigma = logvar.map(|v| (0.5 * v).exp());
        let z = &mu + sigma.component_mul(noise);
        let h2 = self.dec.hidden.forward(&z).map(f64::tanh);
        let x_hat = self.dec.out.forward(&h2);
        Ok(ForwardPass {
            h,
            mu,
            logvar_raw,
            logvar,
            sigma,
            z,
            h2,
            x_hat,
        })
    }
}

/// Standard-normal reparameterization draws for one step; row `i` comes
/// from its own counter so batches are reproducible independently.
pub fn step_noise(seed: u64, step: u64, rows: usize, d_z: usize) -> DMatrix<f64> {
    let base = crate::rng::key(seed, stream::NOISE, step);
    let mut out = DMatrix::zeros(rows, d_z);
    for i in 0..rows {
        let mut rng = SplitMix::keyed(base, stream::NOISE, i as u64);
        for j in 0..d_z {
            out[(i, j)] = rng.normal();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_determinism() {
        let m = Vae::new(3, 5, 2, 1).unwrap();
        assert_eq!(m, Vae::new(3, 5, 2, 1).unwrap());
        assert_ne!(m, Vae::new(3, 5, 2, 2).unwrap());
        let x = DMatrix::from_fn(4, 3, |i, j| (i + j) as f64 * 0.1);
        let f = m.forward(&x, &step_noise(0, 0, 4, 2)).unwrap();
        assert_eq!(f.x_hat.shape(), (4, 3));
        assert_eq!(f.mu, m.encode_mean(&x));
        assert!(m.forward(&x, &DMatrix::zeros(4, 3)).is_err());
        assert!(Vae::new(0, 5, 2, 0).is_err());
    }

    #[test]
    fn logvar_is_clamped() {
        let mut m = Vae::new(1, 2, 1, 0).unwrap();
        m.enc.logvar.b[0] = 50.0;
        let f = m.forward(&DMatrix::zeros(1, 1), &DMatrix::zeros(1, 1)).unwrap();
        assert_eq!(f.logvar[(0, 0)], LOGVAR_MAX);
    }

    #[test]
    fn block_arithmetic() {
        let m = Vae::new(2, 3, 2, 0).unwrap();
        let mut g = m.zeros_like();
        g.axpy(2.0, &m);
        assert!((g.encoder_dot(&m) - 2.0 * m.encoder_norm().powi(2)).abs() < 1e-12);
        g.enc.mean.b[0] = f64::NAN;
        assert_eq!(g.first_non_finite(), Some("enc.mean.b"));
        assert_eq!(step_noise(3, 7, 5, 2), step_noise(3, 7, 5, 2));
        assert_ne!(step_noise(3, 7, 5, 2), step_noise(3, 8, 5, 2));
    }
}
