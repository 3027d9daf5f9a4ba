//! Dense linear algebra, seeded randomness, and probability/divergence
//! primitives shared by every other module.
//!
//! All arithmetic is 64-bit floating point with fixed summation order, so any
//! two runs of the same operation are bit-identical. Randomness comes from a
//! hand-rolled xoshiro256** generator (seeded via SplitMix64) so streams are
//! reproducible across platforms and languages; see the README for the exact
//! generator specification and the seed-derivation scheme.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Token identifier in the model vocabulary.
pub type TokenId = u32;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("dimension mismatch: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    DimensionMismatch {
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("vector length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("softmax temperature must be > 0, got {0}")]
    InvalidTemperature(f64),
    #[error("operation requires a nonempty input")]
    EmptyInput,
    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: TokenId, vocab_size: usize },
    #[error("smoothing epsilon must be > 0, got {0}")]
    InvalidEpsilon(f64),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("vocabulary size mismatch: {left} vs {right}")]
    VocabMismatch { left: usize, right: usize },
}

/// Row-major dense matrix of f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data. Panics on length mismatch or
    /// non-finite entries; constructors are the finiteness choke point.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix data length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        assert!(
            data.iter().all(|v| v.is_finite()),
            "matrix data contains non-finite entries"
        );
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Standard matrix product with a fixed i,k,j loop order so results are
    /// bit-reproducible across runs and platforms.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, NumericsError> {
        if self.cols != other.rows {
            return Err(NumericsError::DimensionMismatch {
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let lhs_row = k * other.cols;
                let out_row = i * other.cols;
                for j in 0..other.cols {
                    out.data[out_row + j] += a * other.data[lhs_row + j];
                }
            }
        }
        if !out.data.iter().all(|v| v.is_finite()) {
            return Err(NumericsError::NonFinite { op: "matmul" });
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix, NumericsError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(NumericsError::DimensionMismatch {
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// `self += scale * other`, shapes must match.
    pub fn add_scaled_assign(&mut self, other: &Matrix, scale: f64) -> Result<(), NumericsError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(NumericsError::DimensionMismatch {
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        debug_assert_eq!(self.rows, other.rows);
        debug_assert_eq!(self.cols, other.cols);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Dense f64 vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector {
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        assert!(
            data.iter().all(|v| v.is_finite()),
            "vector data contains non-finite entries"
        );
        Vector { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize) -> f64 {
        self.data[i]
    }

    pub fn set(&mut self, i: usize, v: f64) {
        self.data[i] = v;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.data.iter().enumerate() {
            if *v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector {
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Vector) -> Result<Vector, NumericsError> {
        if self.len() != other.len() {
            return Err(NumericsError::LengthMismatch {
                left: self.len(),
                right: other.len(),
            });
        }
        Ok(Vector {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &Vector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// xoshiro256** (Blackman & Vigna), state expanded from a 64-bit seed via
/// SplitMix64. Identical seed gives an identical stream on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    state: [u64; 4],
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        let mut sm = seed;
        let state = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng { seed, state }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.state[1]
            .wrapping_mul(5)
            .rotate_left(7)
            .wrapping_mul(9);
        let t = self.state[1] << 17;
        self.state[2] ^= self.state[0];
        self.state[3] ^= self.state[1];
        self.state[1] ^= self.state[2];
        self.state[0] ^= self.state[3];
        self.state[2] ^= t;
        self.state[3] = self.state[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1), 53-bit resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller (two uniforms per call, cosine branch).
    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        let u1 = loop {
            let u = self.uniform();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.uniform();
        mean + std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Samples an index from an unnormalized nonnegative weight slice.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        debug_assert!(!weights.is_empty());
        let total: f64 = weights.iter().sum();
        let mut dart = self.uniform() * total;
        for (i, w) in weights.iter().enumerate() {
            dart -= w;
            if dart <= 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }

    /// Child generator for a named component; see [`derive_seed`].
    pub fn derive(&self, label: &str) -> Rng {
        Rng::from_seed(derive_seed(self.seed, label))
    }
}

/// Component seed derivation: first 8 little-endian bytes of
/// SHA-256(root_seed_le || 0x00 || label_utf8). Collision-resistant and
/// reproducible in any language with a SHA-256 implementation.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update([0u8]);
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[0..8].try_into().expect("digest is 32 bytes"))
}

/// Temperature softmax with max-subtraction for stability.
pub fn softmax(scores: &Vector, temperature: f64) -> Result<Vector, NumericsError> {
    if scores.is_empty() {
        return Err(NumericsError::EmptyInput);
    }
    if !(temperature > 0.0) {
        return Err(NumericsError::InvalidTemperature(temperature));
    }
    let max = scores.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores
        .data()
        .iter()
        .map(|s| ((s - max) / temperature).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(NumericsError::NonFinite { op: "softmax" });
    }
    Ok(Vector::from_vec(exps.iter().map(|e| e / total).collect()))
}

/// Smoothed unigram distribution over generated tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution {
    vocab_size: usize,
    probs: Vec<f64>,
    smoothing_epsilon: f64,
}

impl TokenDistribution {
    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn smoothing_epsilon(&self) -> f64 {
        self.smoothing_epsilon
    }
}

/// Laplace-smoothed unigram estimator:
/// `probs_i = (count_i + eps) / (total + eps * vocab_size)`.
pub fn token_distribution(
    token_ids: &[TokenId],
    vocab_size: usize,
    epsilon: f64,
) -> Result<TokenDistribution, NumericsError> {
    if !(epsilon > 0.0) {
        return Err(NumericsError::InvalidEpsilon(epsilon));
    }
    let mut counts = vec![0u64; vocab_size];
    for &id in token_ids {
        if id as usize >= vocab_size {
            return Err(NumericsError::TokenOutOfRange { id, vocab_size });
        }
        counts[id as usize] += 1;
    }
    let denom = token_ids.len() as f64 + epsilon * vocab_size as f64;
    let probs = counts
        .iter()
        .map(|&c| (c as f64 + epsilon) / denom)
        .collect();
    Ok(TokenDistribution {
        vocab_size,
        probs,
        smoothing_epsilon: epsilon,
    })
}

/// Pools several token sequences into one smoothed distribution.
pub fn pooled_token_distribution(
    sequences: &[Vec<TokenId>],
    vocab_size: usize,
    epsilon: f64,
) -> Result<TokenDistribution, NumericsError> {
    let pooled: Vec<TokenId> = sequences.iter().flatten().copied().collect();
    token_distribution(&pooled, vocab_size, epsilon)
}

/// KL divergence in nats. Both inputs are smoothed (strictly positive), so
/// the sum is always finite; `kl(p, p)` is exactly zero because every summand
/// is `p_i * ln(1) = 0` in IEEE arithmetic.
pub fn kl_divergence(
    p: &TokenDistribution,
    q: &TokenDistribution,
) -> Result<f64, NumericsError> {
    if p.vocab_size != q.vocab_size {
        return Err(NumericsError::VocabMismatch {
            left: p.vocab_size,
            right: q.vocab_size,
        });
    }
    let mut acc = 0.0;
    for (pi, qi) in p.probs.iter().zip(&q.probs) {
        acc += pi * (pi / qi).ln();
    }
    if !acc.is_finite() {
        return Err(NumericsError::NonFinite { op: "kl_divergence" });
    }
    Ok(acc)
}
