//! Elementary descriptor math: L2 normalization, cosine similarity, sign
//! hashing, Hamming distance, and the inner-product identity
//! `<b_i, b_j>/d == (d - 2*H)/d` that lets Hamming scans stand in for cosine
//! ranking of binary codes.
//!
//! Conventions: a binary code stores one sign per dimension, bit 1 for +1 and
//! bit 0 for -1, packed little-endian into 64-bit words. Padding bits in the
//! last word are always zero so word-wise XOR/popcount never counts them.

use crate::error::{Error, Result};

/// An L2-normalized global descriptor for one image.
///
/// Construct via [`l2_normalize`] (normalizes any non-zero finite vector) or
/// [`FloatDescriptor::from_unit`] (validates an already-normalized one).
#[derive(Debug, Clone, PartialEq)]
pub struct FloatDescriptor {
    values: Vec<f32>,
}

impl FloatDescriptor {
    /// Wraps a vector that is already unit-norm (within 1e-5).
    pub fn from_unit(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("descriptor"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "descriptor",
            });
        }
        let norm = norm_f64(&values);
        if (norm - 1.0).abs() > 1e-5 {
            return Err(Error::InvalidArgument(format!(
                "descriptor norm {norm} is not 1 within 1e-5"
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Sign-quantizes this descriptor into a binary code.
    pub fn sign_hash(&self) -> BinaryCode {
        // Entries are finite by construction, so hashing cannot fail.
        sign_hash(&self.values).expect("descriptor entries are finite")
    }
}

/// A d-bit sign code. Bit semantics: 1 = +1, 0 = -1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryCode {
    words: Vec<u64>,
    dim: usize,
}

impl BinaryCode {
    /// Packs per-dimension signs (`true` = +1) into a code.
    pub fn from_bits(bits: &[bool]) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::EmptyInput("binary code"));
        }
        let mut words = vec![0u64; bits.len().div_ceil(64)];
        for (i, &bit) in bits.iter().enumerate() {
            if bit {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        Ok(Self {
            words,
            dim: bits.len(),
        })
    }

    /// Reconstructs a code from packed words. Padding bits must be zero.
    pub fn from_words(words: Vec<u64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::EmptyInput("binary code"));
        }
        if words.len() != dim.div_ceil(64) {
            return Err(Error::InvalidArgument(format!(
                "expected {} words for dim {dim}, got {}",
                dim.div_ceil(64),
                words.len()
            )));
        }
        if dim % 64 != 0 {
            let used = dim % 64;
            let padding = words[words.len() - 1] >> used;
            if padding != 0 {
                return Err(Error::InvalidArgument(
                    "padding bits beyond dim must be zero".into(),
                ));
            }
        }
        Ok(Self { words, dim })
    }

    /// Unpacks into per-dimension signs (`true` = +1).
    pub fn to_bits(&self) -> Vec<bool> {
        (0..self.dim).map(|i| self.bit(i)).collect()
    }

    /// Per-dimension sign values in {-1, +1}.
    pub fn to_signs(&self) -> Vec<i8> {
        (0..self.dim)
            .map(|i| if self.bit(i) { 1 } else { -1 })
            .collect()
    }

    pub fn bit(&self, i: usize) -> bool {
        debug_assert!(i < self.dim);
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }
}

fn norm_f64(values: &[f32]) -> f64 {
    values
        .iter()
        .map(|&v| {
            let v = v as f64;
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Scales a vector to unit Euclidean norm.
///
/// Errors on empty, non-finite, or zero input rather than producing NaN.
pub fn l2_normalize(values: &[f32]) -> Result<FloatDescriptor> {
    if values.is_empty() {
        return Err(Error::EmptyInput("vector"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "vector" });
    }
    let norm = norm_f64(values);
    if norm == 0.0 {
        return Err(Error::ZeroVector);
    }
    let scaled: Vec<f32> = values.iter().map(|&v| (v as f64 / norm) as f32).collect();
    Ok(FloatDescriptor { values: scaled })
}

/// Cosine similarity `<x, y> / (|x| * |y|)`, accumulated in f64.
///
/// For unit-norm inputs this equals the plain inner product.
pub fn cosine_similarity(x: &FloatDescriptor, y: &FloatDescriptor) -> Result<f64> {
    cosine_similarity_raw(x.values(), y.values())
}

/// Cosine similarity of raw vectors; errors on zero-norm input.
pub fn cosine_similarity_raw(x: &[f32], y: &[f32]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.is_empty() {
        return Err(Error::EmptyInput("vector"));
    }
    let (nx, ny) = (norm_f64(x), norm_f64(y));
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum::<f64>();
    Ok(dot / (nx * ny))
}

/// Sign-quantizes a float vector: entries `< 0` map to -1 (clear bit), all
/// other entries, including zero and negative zero, map to +1 (set bit).
pub fn sign_hash(values: &[f32]) -> Result<BinaryCode> {
    if values.is_empty() {
        return Err(Error::EmptyInput("vector"));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite { context: "vector" });
    }
    // -0.0 < 0.0 is false, so negative zero lands on the +1 side.
    let bits: Vec<bool> = values.iter().map(|&v| !(v < 0.0)).collect();
    BinaryCode::from_bits(&bits)
}

/// Number of differing sign positions, via word-wise XOR + popcount.
pub fn hamming_distance(a: &BinaryCode, b: &BinaryCode) -> Result<u32> {
    if a.dim != b.dim {
        return Err(Error::DimMismatch {
            expected: a.dim,
            got: b.dim,
        });
    }
    Ok(hamming_words(&a.words, &b.words))
}

#[inline]
pub(crate) fn hamming_words(a: &[u64], b: &[u64]) -> u32 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x ^ y).count_ones())
        .sum()
}

/// Cosine similarity of two sign codes: `<a, b>/d == (d - 2*H(a, b))/d`.
///
/// Exact, because the +-1 inner product is the integer `d - 2H`.
pub fn binary_cosine(a: &BinaryCode, b: &BinaryCode) -> Result<f64> {
    let h = hamming_distance(a, b)?;
    let d = a.dim as f64;
    Ok((d - 2.0 * h as f64) / d)
}
