//! Datasets: synthetic Gaussian mixtures and IDX (MNIST-format) files.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::build_simplex_vertices;
use crate::rng::{stream, SplitMix};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub labels: Option<Vec<usize>>,
    pub tags: Vec<SplitTag>,
}

impl Dataset {
    /// All rows tagged `train`.
    pub fn new(x: DMatrix<f64>, labels: Option<Vec<usize>>) -> Result<Self> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("dataset contains non-finite entries".into()));
        }
        if let Some(l) = &labels {
            if l.len() != x.nrows() {
                return Err(Error::Consistency(format!("{} labels for {} rows", l.len(), x.nrows())));
            }
        }
        let tags = vec![SplitTag::Train; x.nrows()];
        Ok(Self { x, labels, tags })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn indices(&self, tag: SplitTag) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.tags[i] == tag).collect()
    }

    pub fn rows(&self, idx: &[usize]) -> DMatrix<f64> {
        self.x.select_rows(idx)
    }
}

/// Centres of the synthetic mixture, one per row.
///
/// With `dim ≥ clusters − 1` the centres are scaled regular-simplex vertices.
/// Otherwise they are spaced on a circle (or a line when `dim = 1`) with
/// nearest-neighbour distance equal to the simplex edge length.
pub fn mixture_centres(dim: usize, clusters: usize, separation: f64) -> Result<DMatrix<f64>> {
    if clusters == 0 {
        return Err(Error::Domain("need at least one cluster".into()));
    }
    if dim == 0 {
        return Err(Error::Dimension("data dimension must be positive".into()));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::Domain(format!("separation must be >= 0, got {separation}")));
    }
    if clusters == 1 {
        return Ok(DMatrix::zeros(1, dim));
    }
    if dim + 1 >= clusters {
        return Ok(build_simplex_vertices(clusters, dim)? * separation);
    }
    let kf = clusters as f64;
    let edge = separation * (2.0 * kf / (kf - 1.0)).sqrt();
    let mut c = DMatrix::zeros(clusters, dim);
    if dim == 1 {
        for i in 0..clusters {
            c[(i, 0)] = edge * (i as f64 - (kf - 1.0) / 2.0);
        }
    } else {
        let radius = edge / (2.0 * (std::f64::consts::PI / kf).sin());
        for i in 0..clusters {
            let angle = 2.0 * std::f64::consts::PI * i as f64 / kf;
            c[(i, 0)] = radius * angle.cos();
            c[(i, 1)] = radius * angle.sin();
        }
    }
    Ok(c)
}

/// `n` points from equally weighted unit-variance Gaussians; sample `i`
/// draws its component and noise from its own counter in the data stream.
pub fn synth_mixture(n: usize, dim: usize, clusters: usize, separation: f64, seed: u64) -> Result<Dataset> {
    let centres = mixture_centres(dim, clusters, separation)?;
    let mut x = DMatrix::zeros(n, dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = SplitMix::keyed(seed, stream::DATA, i as u64);
        let c = rng.below(clusters);
        for j in 0..dim {
            x[(i, j)] = centres[(c, j)] + rng.normal();
        }
        labels.push(c);
    }
    Dataset::new(x, Some(labels))
}

/// Per-feature standardization fitted on `fit_rows` and applied to all rows.
/// Constant features are only centred.
pub fn standardize(x: &DMatrix<f64>, fit_rows: &[usize]) -> Result<DMatrix<f64>> {
    if fit_rows.len() < 2 {
        return Err(Error::Domain("standardization needs at least two rows".into()));
    }
    let sub = x.select_rows(fit_rows);
    let mut out = x.clone();
    for j in 0..x.ncols() {
        let col: Vec<f64> = sub.column(j).iter().copied().collect();
        let mean = crate::numeric::pairwise_mean(&col);
        let sd = crate::numeric::std_dev(&col);
        let scale = if sd > 1e-12 { sd } else { 1.0 };
        for v in out.column_mut(j).iter_mut() {
            *v = (*v - mean) / scale;
        }
    }
    Ok(out)
}

/// Shuffled train/val/test assignment. `fractions` lists train, then
/// optionally val and test; any remainder is tagged test.
pub fn split(ds: &Dataset, fractions: &[f64], seed: u64) -> Result<Dataset> {
    if fractions.is_empty() || fractions.len() > 3 {
        return Err(Error::Domain("give between one and three split fractions".into()));
    }
    if fractions.iter().any(|f| !(*f > 0.0)) {
        return Err(Error::Domain("split fractions must be positive".into()));
    }
    let total: f64 = fractions.iter().sum();
    if total > 1.0 + 1e-12 {
        return Err(Error::Domain(format!("split fractions sum to {total} > 1")));
    }
    let n = ds.n();
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix::keyed(seed, stream::SPLIT, 0).shuffle(&mut order);

    let tags_in_order = [SplitTag::Train, SplitTag::Val, SplitTag::Test];
    let mut tags = vec![SplitTag::Test; n];
    let mut start = 0;
    let mut cumulative = 0.0;
    for (f, tag) in fractions.iter().zip(tags_in_order) {
        cumulative += f;
        let end = ((cumulative * n as f64).round() as usize).min(n);
        if end == start {
            return Err(Error::Domain(format!("{tag:?} split would be empty")));
        }
        for &i in &order[start..end] {
            tags[i] = tag;
        }
        start = end;
    }
    Ok(Dataset {
        x: ds.x.clone(),
        labels: ds.labels.clone(),
        tags,
    })
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("four bytes")))
        .ok_or_else(|| Error::Length {
            path: path.to_path_buf(),
            expected: at + 4,
            found: bytes.len(),
        })
}

fn check_magic(found: u32, expected: u32, path: &Path) -> Result<()> {
    if found != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("expected IDX magic 0x{expected:08X}, found 0x{found:08X}"),
        });
    }
    Ok(())
}

fn check_len(bytes: &[u8], expected: usize, path: &Path) -> Result<()> {
    if bytes.len() != expected {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(())
}

/// Raw IDX image file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    check_magic(read_u32(bytes, 0, path)?, IDX_IMAGES_MAGIC, path)?;
    let count = read_u32(bytes, 4, path)? as usize;
    let rows = read_u32(bytes, 8, path)? as usize;
    let cols = read_u32(bytes, 12, path)? as usize;
    check_len(bytes, 16 + count * rows * cols, path)?;
    Ok((count, rows, cols, bytes[16..].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    check_magic(read_u32(bytes, 0, path)?, IDX_LABELS_MAGIC, path)?;
    let count = read_u32(bytes, 4, path)? as usize;
    check_len(bytes, 8 + count, path)?;
    Ok(bytes[8..].to_vec())
}

pub fn encode_idx_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != count * rows * cols {
        return Err(Error::Shape(format!(
            "{} pixels for {count} images of {rows}×{cols}",
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Images scaled to `[0, 1]`, one flattened image per row.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img_bytes = fs::read(images).map_err(|e| Error::io(images, e))?;
    let lab_bytes = fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let (count, rows, cols, pixels) = parse_idx_images(&img_bytes, images)?;
    let labs = parse_idx_labels(&lab_bytes, labels)?;
    if labs.len() != count {
        return Err(Error::Consistency(format!(
            "{} images but {} labels",
            count,
            labs.len()
        )));
    }
    let d = rows * cols;
    let x = DMatrix::from_row_iterator(count, d, pixels.iter().map(|&p| p as f64 / 255.0));
    Dataset::new(x, Some(labs.into_iter().map(usize::from).collect()))
}

/// Labels only, for label-smoothed teachers.
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_idx_labels(&bytes, path)?.into_iter().map(usize::from).collect())
}
