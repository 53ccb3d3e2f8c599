//! Pre-defined per-class target codes and the algebra of ±1 vectors.
//!
//! Each class gets a code whose bits are drawn i.i.d. with `P(+1) = ½`, the
//! choice that maximizes the chance of two codes being orthogonal. Rows are
//! resampled until pairwise distinct.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::seeded;
use crate::stats::binomial;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Codebook {
    classes: usize,
    bits: usize,
    codes: Vec<Vec<i8>>,
    seed: u64,
}

/// Minimum number of bits able to give `classes` distinct codes, `⌈log₂ C⌉`.
pub fn code_length(classes: usize) -> Result<usize> {
    if classes < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {classes}")));
    }
    Ok((usize::BITS - (classes - 1).leading_zeros()) as usize)
}

fn capacity_ok(classes: usize, bits: usize) -> bool {
    bits >= usize::BITS as usize || (1usize << bits) >= classes
}

impl Codebook {
    pub fn generate(classes: usize, bits: usize, seed: u64) -> Result<Self> {
        code_length(classes)?;
        if bits == 0 || !capacity_ok(classes, bits) {
            return Err(Error::CodebookCapacity { classes, bits });
        }
        let mut rng = seeded(seed);
        let mut codes: Vec<Vec<i8>> = Vec::with_capacity(classes);
        while codes.len() < classes {
            let row: Vec<i8> = (0..bits)
                .map(|_| if rng.random_bool(0.5) { 1 } else { -1 })
                .collect();
            if !codes.contains(&row) {
                codes.push(row);
            }
        }
        Ok(Self {
            classes,
            bits,
            codes,
            seed,
        })
    }

    /// Rebuilds a codebook from stored rows (checkpoint path).
    pub fn from_codes(codes: Vec<Vec<i8>>, seed: u64) -> Result<Self> {
        let classes = codes.len();
        code_length(classes)?;
        let bits = codes[0].len();
        for (i, row) in codes.iter().enumerate() {
            if row.len() != bits {
                return Err(Error::shape("Codebook::from_codes", bits, row.len()));
            }
            if let Some(&v) = row.iter().find(|&&v| v != 1 && v != -1) {
                return Err(Error::NonBinary {
                    index: i,
                    value: v as f64,
                });
            }
            if codes[..i].contains(row) {
                return Err(Error::invalid(format!("duplicate code for class {i}")));
            }
        }
        Ok(Self {
            classes,
            bits,
            codes,
            seed,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn codes(&self) -> &[Vec<i8>] {
        &self.codes
    }

    pub fn code(&self, class: usize) -> Vec<f64> {
        self.codes[class].iter().map(|&b| b as f64).collect()
    }

    pub fn as_matrix(&self) -> Matrix {
        let data = self.codes.iter().flatten().map(|&b| b as f64).collect();
        Matrix::from_raw(self.classes, self.bits, data)
    }
}

fn check_pair(h1: &[f64], h2: &[f64]) -> Result<()> {
    if h1.len() != h2.len() {
        return Err(Error::shape("binary code pair", h1.len(), h2.len()));
    }
    for (i, &v) in h1.iter().chain(h2).enumerate() {
        if v != 1.0 && v != -1.0 {
            return Err(Error::NonBinary {
                index: i % h1.len().max(1),
                value: v,
            });
        }
    }
    Ok(())
}

/// Number of differing positions, computed as `(d̃ − h₁ᵀh₂)/2`.
pub fn hamming(h1: &[f64], h2: &[f64]) -> Result<usize> {
    check_pair(h1, h2)?;
    let dot: f64 = h1.iter().zip(h2).map(|(a, b)| a * b).sum();
    Ok(((h1.len() as f64 - dot) / 2.0) as usize)
}

/// `h₁ᵀh₂ / d̃`, the cosine of two ±1 vectors.
pub fn cosine_binary(h1: &[f64], h2: &[f64]) -> Result<f64> {
    check_pair(h1, h2)?;
    if h1.is_empty() {
        return Err(Error::invalid("empty code"));
    }
    let dot: f64 = h1.iter().zip(h2).map(|(a, b)| a * b).sum();
    Ok(dot / h1.len() as f64)
}

/// One target row per label: `onehot(Y) × o`.
pub fn target_codes(labels: &[usize], cb: &Codebook) -> Result<Matrix> {
    let mut data = Vec::with_capacity(labels.len() * cb.bits);
    for &y in labels {
        if y >= cb.classes {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: cb.classes,
            });
        }
        data.extend(cb.codes[y].iter().map(|&b| b as f64));
    }
    Ok(Matrix::from_raw(labels.len(), cb.bits, data))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityReport {
    pub pairs: usize,
    pub mean_cos: f64,
    pub mean_abs_cos: f64,
    pub max_abs_cos: f64,
    pub orthogonal_fraction: f64,
}

pub fn orthogonality_report(cb: &Codebook) -> OrthogonalityReport {
    let mut cosines = Vec::new();
    for i in 0..cb.classes {
        for j in i + 1..cb.classes {
            let dot: i32 = cb.codes[i]
                .iter()
                .zip(&cb.codes[j])
                .map(|(&a, &b)| (a * b) as i32)
                .sum();
            cosines.push(dot as f64 / cb.bits as f64);
        }
    }
    let n = cosines.len().max(1) as f64;
    OrthogonalityReport {
        pairs: cosines.len(),
        mean_cos: cosines.iter().sum::<f64>() / n,
        mean_abs_cos: cosines.iter().map(|c| c.abs()).sum::<f64>() / n,
        max_abs_cos: cosines.iter().map(|c| c.abs()).fold(0.0, f64::max),
        orthogonal_fraction: cosines.iter().filter(|&&c| c == 0.0).count() as f64 / n,
    }
}

/// Probability that two random length-`n` codes with per-bit `P(+1) = p` are
/// orthogonal: `C(n, n/2)·q^{n/2}(1−q)^{n/2}` with `q = p² + (1−p)²`.
pub fn orthogonal_pair_probability(n: usize, p: f64) -> f64 {
    if n % 2 == 1 {
        return 0.0;
    }
    let q = p * p + (1.0 - p) * (1.0 - p);
    let half = (n / 2) as i32;
    binomial(n as u64, n as u64 / 2) * q.powi(half) * (1.0 - q).powi(half)
}
