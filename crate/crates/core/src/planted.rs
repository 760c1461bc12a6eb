//! Planted ReLU data, the least-squares loss and its generalized gradient.
//!
//! Labels are `y_i = max(0, <x_i, w*>)` with standard normal features. The
//! per-sample gradient is
//!
//! ```text
//! grad_i(w) = 2 (relu(<w, x_i>) - y_i) (1 + sgn(<w, x_i>)) x_i,   sgn(0) = 0
//! ```
//!
//! which is twice the derivative of `(relu(<w, x_i>) - y_i)^2` wherever that
//! derivative exists. Callers that need another normalization scale the
//! result; the engine does so through `RunConfig::grad_scale`.

use std::io::{Read, Write};
use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{Purpose, Stream};

const MAGIC: &[u8; 4] = b"RELU";
const FORMAT_VERSION: u16 = 1;
/// Bytes before the first float: magic, version, n, d, seed.
pub const HEADER_LEN: usize = 4 + 2 + 8 + 8 + 8;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("sample index {index} out of range for n = {n}")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("mini-batch index list is empty")]
    EmptyBatch,
    #[error("invalid planted weight spec: {0}")]
    InvalidSpec(String),
    #[error("dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How the planted weight vector is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WStarSpec {
    Explicit(Vec<f64>),
    Gaussian { mean: f64, std: f64 },
}

impl WStarSpec {
    /// Entries i.i.d. with mean 200 and variance 3.
    pub fn paper_default() -> Self {
        WStarSpec::Gaussian {
            mean: 200.0,
            std: 3f64.sqrt(),
        }
    }
}

/// A model iterate. Dereferences to a slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(entries: Vec<f64>) -> Self {
        WeightVector(entries)
    }

    pub fn zeros(d: usize) -> Self {
        WeightVector(vec![0.0; d])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for WeightVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for WeightVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for WeightVector {
    fn from(v: Vec<f64>) -> Self {
        WeightVector(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedDataset {
    features: Vec<f64>,
    labels: Vec<f64>,
    w_star: Vec<f64>,
    n: usize,
    d: usize,
    seed: u64,
}

/// Sequential dot product. Every label and gradient in the crate goes
/// through this so the summation order is fixed.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let diff = x - y;
        acc += diff * diff;
    }
    acc.sqrt()
}

#[inline]
fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

/// Sign with `sgn(0) = 0`.
#[inline]
pub fn sgn(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else if z < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Scalar prefactor `2 (relu(z) - y)(1 + sgn(z))` of the per-sample gradient.
#[inline]
fn gradient_coefficient(z: f64, y: f64) -> f64 {
    2.0 * (relu(z) - y) * (1.0 + sgn(z))
}

impl PlantedDataset {
    /// Draws a planted dataset. Features are consumed row-major from the
    /// `Features` stream; Gaussian planted weights come from the
    /// `PlantedWeights` stream.
    pub fn generate(n: usize, d: usize, spec: &WStarSpec, seed: u64) -> Result<Self, ModelError> {
        if n == 0 || d == 0 {
            return Err(ModelError::InvalidDimension(format!(
                "n and d must be at least 1 (got n = {n}, d = {d})"
            )));
        }
        let w_star = match spec {
            WStarSpec::Explicit(v) => {
                if v.len() != d {
                    return Err(ModelError::DimensionMismatch {
                        expected: d,
                        got: v.len(),
                    });
                }
                if !v.iter().all(|x| x.is_finite()) {
                    return Err(ModelError::InvalidSpec(
                        "explicit w* has non-finite entries".into(),
                    ));
                }
                v.clone()
            }
            WStarSpec::Gaussian { mean, std } => {
                if !(mean.is_finite() && std.is_finite()) || *std < 0.0 {
                    return Err(ModelError::InvalidSpec(format!(
                        "gaussian(mean = {mean}, std = {std}) needs finite mean and std >= 0"
                    )));
                }
                let mut stream = Stream::new(seed, Purpose::PlantedWeights, 0);
                (0..d).map(|_| stream.normal(*mean, *std)).collect()
            }
        };
        let len = n.checked_mul(d).ok_or_else(|| {
            ModelError::InvalidDimension(format!("n * d overflows (n = {n}, d = {d})"))
        })?;
        let mut stream = Stream::new(seed, Purpose::Features, 0);
        let features: Vec<f64> = (0..len).map(|_| stream.standard_normal()).collect();
        let labels = features
            .chunks_exact(d)
            .map(|row| relu(dot(row, &w_star)))
            .collect();
        Ok(PlantedDataset {
            features,
            labels,
            w_star,
            n,
            d,
            seed,
        })
    }

    /// Builds a dataset from explicit rows; labels are computed from `w_star`.
    pub fn from_rows(rows: Vec<Vec<f64>>, w_star: Vec<f64>) -> Result<Self, ModelError> {
        let n = rows.len();
        let d = w_star.len();
        if n == 0 || d == 0 {
            return Err(ModelError::InvalidDimension(
                "need at least one row and one column".into(),
            ));
        }
        let mut features = Vec::with_capacity(n * d);
        for row in &rows {
            if row.len() != d {
                return Err(ModelError::DimensionMismatch {
                    expected: d,
                    got: row.len(),
                });
            }
            features.extend_from_slice(row);
        }
        let labels = features
            .chunks_exact(d)
            .map(|row| relu(dot(row, &w_star)))
            .collect();
        Ok(PlantedDataset {
            features,
            labels,
            w_star,
            n,
            d,
            seed: 0,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn w_star(&self) -> &[f64] {
        &self.w_star
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    fn check_dim(&self, w: &[f64]) -> Result<(), ModelError> {
        if w.len() != self.d {
            return Err(ModelError::DimensionMismatch {
                expected: self.d,
                got: w.len(),
            });
        }
        Ok(())
    }

    fn check_index(&self, i: usize) -> Result<(), ModelError> {
        if i >= self.n {
            return Err(ModelError::IndexOutOfRange {
                index: i,
                n: self.n,
            });
        }
        Ok(())
    }

    /// `(1/n) sum_i (relu(<w, x_i>) - y_i)^2`.
    pub fn loss(&self, w: &[f64]) -> Result<f64, ModelError> {
        self.check_dim(w)?;
        let mut acc = 0.0;
        for (row, &y) in self.features.chunks_exact(self.d).zip(&self.labels) {
            let r = relu(dot(row, w)) - y;
            acc += r * r;
        }
        Ok(acc / self.n as f64)
    }

    pub fn generalized_gradient(&self, w: &[f64], i: usize) -> Result<Vec<f64>, ModelError> {
        self.check_dim(w)?;
        self.check_index(i)?;
        let row = self.row(i);
        let c = gradient_coefficient(dot(row, w), self.labels[i]);
        Ok(row.iter().map(|x| c * x).collect())
    }

    /// Mean of the generalized gradients over `indices`, accumulated in list order.
    pub fn minibatch_gradient(&self, w: &[f64], indices: &[usize]) -> Result<Vec<f64>, ModelError> {
        self.check_dim(w)?;
        if indices.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        for &i in indices {
            self.check_index(i)?;
        }
        let mut out = vec![0.0; self.d];
        self.minibatch_gradient_into(w, indices, &mut out);
        Ok(out)
    }

    /// Unchecked hot path of [`minibatch_gradient`](Self::minibatch_gradient).
    pub(crate) fn minibatch_gradient_into(&self, w: &[f64], indices: &[usize], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for &i in indices {
            let row = self.row(i);
            let c = gradient_coefficient(dot(row, w), self.labels[i]);
            if c != 0.0 {
                for (o, x) in out.iter_mut().zip(row) {
                    *o += c * x;
                }
            }
        }
        let m = indices.len() as f64;
        out.iter_mut().for_each(|v| *v /= m);
    }

    /// Full gradient `(1/n) sum_i grad_i(w)`.
    pub fn full_gradient(&self, w: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_dim(w)?;
        let indices: Vec<usize> = (0..self.n).collect();
        let mut out = vec![0.0; self.d];
        self.minibatch_gradient_into(w, &indices, &mut out);
        Ok(out)
    }

    /// One full gradient step of size 1 from the origin:
    /// `w_0 = 0 - grad L(0) = (2/n) sum_i y_i x_i`. Its expectation is `w*`.
    pub fn spectral_init(&self) -> WeightVector {
        let zero = vec![0.0; self.d];
        let g = self
            .full_gradient(&zero)
            .expect("zero vector has the dataset dimension");
        WeightVector(g.into_iter().map(|v| 0.0 - v).collect())
    }

    /// `||w - w*|| / ||w*||`, or the absolute error when `w*` is zero.
    pub fn relative_error(&self, w: &[f64]) -> f64 {
        let scale = norm(&self.w_star);
        let err = distance(w, &self.w_star);
        if scale > 0.0 {
            err / scale
        } else {
            err
        }
    }

    /// Byte size of the on-disk format for an `n x d` dataset.
    pub fn encoded_len(n: usize, d: usize) -> usize {
        HEADER_LEN + 8 * (d + n * d + n)
    }

    /// Writes the binary dataset format: header, then `w*`, the features
    /// row-major and the labels, all little-endian IEEE-754 doubles.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), ModelError> {
        let mut buf = Vec::with_capacity(Self::encoded_len(self.n, self.d));
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.n as u64).to_le_bytes());
        buf.extend_from_slice(&(self.d as u64).to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        for v in self.w_star.iter().chain(&self.features).chain(&self.labels) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self, ModelError> {
        let mut buf = Vec::new();
        input.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// Parses the binary format. The labels must satisfy the planted
    /// relation exactly; anything else is rejected.
    pub fn from_bytes(buf: &[u8]) -> Result<Self, ModelError> {
        if buf.len() < HEADER_LEN {
            return Err(ModelError::Format(format!(
                "truncated header ({} bytes)",
                buf.len()
            )));
        }
        if &buf[..4] != MAGIC {
            return Err(ModelError::Format("bad magic".into()));
        }
        let version = u16::from_le_bytes([buf[4], buf[5]]);
        if version != FORMAT_VERSION {
            return Err(ModelError::Format(format!("unsupported version {version}")));
        }
        let read_u64 = |at: usize| u64::from_le_bytes(buf[at..at + 8].try_into().expect("8 bytes"));
        let n =
            usize::try_from(read_u64(6)).map_err(|_| ModelError::Format("n too large".into()))?;
        let d =
            usize::try_from(read_u64(14)).map_err(|_| ModelError::Format("d too large".into()))?;
        let seed = read_u64(22);
        if n == 0 || d == 0 {
            return Err(ModelError::InvalidDimension(format!(
                "file has n = {n}, d = {d}"
            )));
        }
        let floats = n
            .checked_mul(d)
            .and_then(|nd| nd.checked_add(n + d))
            .ok_or_else(|| ModelError::Format("dimensions overflow".into()))?;
        let expected = floats
            .checked_mul(8)
            .and_then(|b| b.checked_add(HEADER_LEN))
            .ok_or_else(|| ModelError::Format("dimensions overflow".into()))?;
        if buf.len() != expected {
            return Err(ModelError::Format(format!(
                "expected {expected} bytes for n = {n}, d = {d}, found {}",
                buf.len()
            )));
        }
        let mut values = buf[HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let w_star: Vec<f64> = values.by_ref().take(d).collect();
        let features: Vec<f64> = values.by_ref().take(n * d).collect();
        let labels: Vec<f64> = values.collect();
        for (i, (row, &y)) in features.chunks_exact(d).zip(&labels).enumerate() {
            if relu(dot(row, &w_star)).to_bits() != y.to_bits() {
                return Err(ModelError::Format(format!(
                    "label {i} does not match the planted model"
                )));
            }
        }
        Ok(PlantedDataset {
            features,
            labels,
            w_star,
            n,
            d,
            seed,
        })
    }
}
