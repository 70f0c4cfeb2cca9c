//! Dense arithmetic, the counter-based generator and the loss primitive.
//!
//! Everything here is a pure function of its arguments. Matrices are
//! row-major `f64`; vectors are plain `Vec<f64>`.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vector = Vec<f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                what: format!("{rows}x{cols} matrix data"),
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows; all rows must share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Dimension {
                    what: format!("row {i}"),
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
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

    /// `self * v` for a column vector `v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vector> {
        if v.len() != self.cols {
            return Err(self.mismatch("matvec", v.len(), 1));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    /// `selfᵀ * v`.
    pub fn matvec_transposed(&self, v: &[f64]) -> Result<Vector> {
        if v.len() != self.rows {
            return Err(Error::ShapeMismatch {
                op: "matvec_transposed",
                left_rows: self.cols,
                left_cols: self.rows,
                right_rows: v.len(),
                right_cols: 1,
            });
        }
        let mut out = vec![0.0; self.cols];
        for (r, &s) in v.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * s;
            }
        }
        Ok(out)
    }

    fn mismatch(&self, op: &'static str, right_rows: usize, right_cols: usize) -> Error {
        Error::ShapeMismatch {
            op,
            left_rows: self.rows,
            left_cols: self.cols,
            right_rows,
            right_cols,
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Standard matrix product. Each output entry is accumulated left to right
/// over the shared dimension, so results are bit-exact for fixed inputs.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(a.mismatch("matmul", b.rows, b.cols));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += a.data[i * a.cols + k] * b.data[k * b.cols + j];
            }
            out.data[i * b.cols + j] = acc;
        }
    }
    Ok(out)
}

/// Key of a counter-based random stream.
///
/// `stream` is a domain-separation tag; callers pack whatever identifies the
/// consumer (instance id, layer index, purpose) into it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngKey {
    pub seed: u64,
    pub stream: u64,
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngKey {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// Packs a purpose tag and two indices into a stream id.
    pub fn tagged(seed: u64, tag: u64, a: u64, b: u64) -> Self {
        let s = mix64(tag.wrapping_mul(GOLDEN_GAMMA) ^ mix64(a.wrapping_add(0x632B_E59B_D9B4_E019)));
        Self {
            seed,
            stream: mix64(s ^ b.wrapping_mul(0xD6E8_FEB8_6659_FD93)),
        }
    }

    fn block_base(&self, counter: u64) -> u64 {
        let h = mix64(self.seed ^ 0x5851_F42D_4C95_7F2D);
        let h = mix64(h ^ self.stream.wrapping_mul(GOLDEN_GAMMA));
        mix64(h ^ counter.wrapping_mul(0xD1B5_4A32_D192_ED03))
    }

    /// Raw 64-bit word `index` of block `counter`.
    #[inline]
    pub fn word(&self, counter: u64, index: u64) -> u64 {
        mix64(
            self.block_base(counter)
                .wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)),
        )
    }
}

#[inline]
fn unit_from_bits(x: u64) -> f64 {
    const DEN: f64 = (1u64 << 53) as f64;
    (x >> 11) as f64 / DEN
}

/// `n` uniforms in `[0, 1)`, a pure function of `(key, counter, n)`.
///
/// Block `counter` is computed directly; no other block is touched.
pub fn uniform_block(key: RngKey, counter: u64, n: usize) -> Vec<f64> {
    let base = key.block_base(counter);
    (0..n as u64)
        .map(|j| unit_from_bits(mix64(base.wrapping_add((j + 1).wrapping_mul(GOLDEN_GAMMA)))))
        .collect()
}

/// Sequential view over one counter block, for code that wants an
/// `RngCore` (shuffles, normal sampling).
#[derive(Clone, Debug)]
pub struct KeyedRng {
    base: u64,
    index: u64,
}

impl KeyedRng {
    pub fn new(key: RngKey, counter: u64) -> Self {
        Self {
            base: key.block_base(counter),
            index: 0,
        }
    }

    pub fn next_unit(&mut self) -> f64 {
        unit_from_bits(self.next_u64())
    }
}

impl RngCore for KeyedRng {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.index = self.index.wrapping_add(1);
        mix64(self.base.wrapping_add(self.index.wrapping_mul(GOLDEN_GAMMA)))
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        for chunk in dest.chunks_mut(8) {
            let bytes = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.fill_bytes(dest);
        Ok(())
    }
}

/// Cross-entropy of `softmax(logits)` against `label`, with its gradient
/// with respect to the logits.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vector)> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            n_classes: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() - (logits[label] - max);
    let mut grad: Vector = exps.iter().map(|e| e / total).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Loss only; same arithmetic as [`softmax_cross_entropy`].
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            n_classes: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    Ok(total.ln() - (logits[label] - max))
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
