//! Bit-plane packing and popcount inner products.
//!
//! A vector of `k`-bit codes is stored as `k` bit planes; plane `p` holds
//! bit `p` of every code. Element `i` lives in word `i / 64`, bit `i % 64`
//! (little-endian bit order). Padding bits past the logical length are zero.
//!
//! For binary vectors `x · y = popcount(x & y)`. Multi-bit codes expand as
//! `Σ_p Σ_q 2^(p+q) · popcount(a_p & w_q)`, and signed/offset values are
//! recovered through the affine pair `(alpha, beta)` plus cached code sums.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quantizers::{levels, QuantizedMatrix, MAX_BITS};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PackError {
    #[error("code {code} at index {index} does not fit in {bits} bits")]
    Range { index: usize, code: u32, bits: u8 },
    #[error("length mismatch: {left} vs {right}")]
    Shape { left: usize, right: usize },
    #[error("invalid bit-width {0}: expected 1..=8")]
    BitWidth(u8),
}

#[inline]
pub fn words_for(n: usize) -> usize {
    n.div_ceil(64)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitPlanes {
    /// `bits` planes of `words_for(len)` words each, plane-major.
    words: Vec<u64>,
    len: usize,
    bits: u8,
}

impl BitPlanes {
    pub fn from_raw(words: Vec<u64>, len: usize, bits: u8) -> Result<Self, PackError> {
        if !(1..=MAX_BITS).contains(&bits) {
            return Err(PackError::BitWidth(bits));
        }
        let expected = words_for(len) * bits as usize;
        if words.len() != expected {
            return Err(PackError::Shape {
                left: words.len(),
                right: expected,
            });
        }
        Ok(Self { words, len, bits })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn bits(&self) -> u8 {
        self.bits
    }

    #[inline]
    pub fn words_per_plane(&self) -> usize {
        words_for(self.len)
    }

    #[inline]
    pub fn plane(&self, p: usize) -> &[u64] {
        let w = self.words_per_plane();
        &self.words[p * w..(p + 1) * w]
    }

    pub fn raw_words(&self) -> &[u64] {
        &self.words
    }

    pub fn unpack(&self) -> Vec<u8> {
        (0..self.len)
            .map(|i| {
                let (w, b) = (i / 64, i % 64);
                (0..self.bits as usize).fold(0u8, |c, p| c | ((((self.plane(p)[w] >> b) & 1) as u8) << p))
            })
            .collect()
    }

    /// Sum of all codes.
    pub fn code_sum(&self) -> u64 {
        (0..self.bits as usize)
            .map(|p| {
                let ones: u64 = self.plane(p).iter().map(|w| w.count_ones() as u64).sum();
                ones << p
            })
            .sum()
    }
}

/// Pack `codes` (each `< 2^bits`) into bit planes.
pub fn pack(codes: &[u8], bits: u8) -> Result<BitPlanes, PackError> {
    if !(1..=MAX_BITS).contains(&bits) {
        return Err(PackError::BitWidth(bits));
    }
    let limit = 1u32 << bits;
    let wpp = words_for(codes.len());
    let mut words = vec![0u64; wpp * bits as usize];
    for (i, &c) in codes.iter().enumerate() {
        if c as u32 >= limit {
            return Err(PackError::Range {
                index: i,
                code: c as u32,
                bits,
            });
        }
        let (w, b) = (i / 64, i % 64);
        for p in 0..bits as usize {
            words[p * wpp + w] |= (((c >> p) & 1) as u64) << b;
        }
    }
    Ok(BitPlanes {
        words,
        len: codes.len(),
        bits,
    })
}

#[inline]
fn and_popcount(x: &[u64], y: &[u64]) -> u64 {
    x.iter().zip(y).map(|(a, b)| (a & b).count_ones() as u64).sum()
}

/// Binary inner product `popcount(x & y)`. Only plane 0 of each input is used.
pub fn dot_bits(x: &BitPlanes, y: &BitPlanes) -> Result<u64, PackError> {
    if x.len != y.len {
        return Err(PackError::Shape {
            left: x.len,
            right: y.len,
        });
    }
    Ok(and_popcount(x.plane(0), y.plane(0)))
}

/// Exact integer `Σ code_a(i) · code_w(i)` over all plane pairs.
pub fn dot_multibit(a: &BitPlanes, w: &BitPlanes) -> Result<u64, PackError> {
    if a.len != w.len {
        return Err(PackError::Shape {
            left: a.len,
            right: w.len,
        });
    }
    Ok(dot_multibit_unchecked(a, w))
}

fn dot_multibit_unchecked(a: &BitPlanes, w: &BitPlanes) -> u64 {
    let mut acc = 0u64;
    for p in 0..a.bits as usize {
        let ap = a.plane(p);
        for q in 0..w.bits as usize {
            acc += and_popcount(ap, w.plane(q)) << (p + q);
        }
    }
    acc
}

/// Quantized matrix with each row packed into bit planes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackedQuantMatrix {
    pub rows: Vec<BitPlanes>,
    /// Per-row sum of codes.
    pub code_sums: Vec<u32>,
    pub bits: u8,
    pub alpha: f64,
    pub beta: f64,
    pub shape: (usize, usize),
}

impl PackedQuantMatrix {
    pub fn from_quantized(q: &QuantizedMatrix) -> Result<Self, PackError> {
        let mut rows = Vec::with_capacity(q.rows);
        let mut code_sums = Vec::with_capacity(q.rows);
        for r in 0..q.rows {
            let codes = &q.codes[r * q.cols..(r + 1) * q.cols];
            rows.push(pack(codes, q.bits)?);
            code_sums.push(codes.iter().map(|&c| c as u32).sum());
        }
        Ok(Self {
            rows,
            code_sums,
            bits: q.bits,
            alpha: q.alpha,
            beta: q.beta,
            shape: (q.rows, q.cols),
        })
    }

    pub fn unpack(&self) -> QuantizedMatrix {
        QuantizedMatrix {
            codes: self.rows.iter().flat_map(|r| r.unpack()).collect(),
            bits: self.bits,
            alpha: self.alpha,
            beta: self.beta,
            rows: self.shape.0,
            cols: self.shape.1,
        }
    }

    /// Codes of one row.
    pub fn row_codes(&self, r: usize) -> Vec<u8> {
        self.rows[r].unpack()
    }
}

/// An activation vector in packed form with its affine pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedActivation {
    pub planes: BitPlanes,
    pub alpha: f64,
    pub beta: f64,
    pub code_sum: u64,
}

impl PackedActivation {
    pub fn new(codes: &[u8], bits: u8, alpha: f64, beta: f64) -> Result<Self, PackError> {
        let planes = pack(codes, bits)?;
        let code_sum = codes.iter().map(|&c| c as u64).sum();
        Ok(Self {
            planes,
            alpha,
            beta,
            code_sum,
        })
    }
}

/// `W · a` on packed operands.
///
/// Row `r` expands the affine product
/// `Σ_i (aw·cw_i/Lw + bw)(aa·ca_i/La + ba)` into one popcount dot product
/// plus code-sum corrections, accumulating in 64-bit integers.
pub fn qmatvec(w: &PackedQuantMatrix, a: &PackedActivation) -> Result<Vec<f64>, PackError> {
    let n = a.planes.len();
    if w.shape.1 != n {
        return Err(PackError::Shape {
            left: w.shape.1,
            right: n,
        });
    }
    let lw = levels(w.bits) as f64;
    let la = levels(a.planes.bits()) as f64;
    let c_dot = w.alpha * a.alpha / (lw * la);
    let c_wsum = w.alpha * a.beta / lw;
    let c_asum = w.beta * a.alpha / la * a.code_sum as f64 + w.beta * a.beta * n as f64;
    Ok(w.rows
        .iter()
        .zip(&w.code_sums)
        .map(|(row, &wsum)| {
            let dot = dot_multibit_unchecked(&a.planes, row);
            c_dot * dot as f64 + c_wsum * wsum as f64 + c_asum
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: usize,
    pub cols: usize,
    pub weight_bits: u8,
    pub activation_bits: u8,
    pub repeats: usize,
    pub packed_secs: f64,
    pub dense_secs: f64,
    /// Multiply-accumulates per second (`rows * cols * repeats / secs`).
    pub packed_ops_per_sec: f64,
    pub dense_ops_per_sec: f64,
    pub agreement: bool,
}

/// Time packed `qmatvec` against a dense real matvec on identical data.
///
/// Data is drawn from a fixed seed so repeated runs see the same inputs.
pub fn bench_qmatvec(
    rows: usize,
    cols: usize,
    weight_bits: u8,
    activation_bits: u8,
    repeats: usize,
) -> Result<BenchReport, PackError> {
    use rand::{Rng, SeedableRng};
    let rows = rows.max(1);
    let cols = cols.max(1);
    let repeats = repeats.max(1);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
    let wmax = levels(weight_bits) as u8;
    let amax = levels(activation_bits) as u8;
    let wq = QuantizedMatrix {
        codes: (0..rows * cols).map(|_| rng.random_range(0..=wmax)).collect(),
        bits: weight_bits,
        alpha: 1.7,
        beta: -0.85,
        rows,
        cols,
    };
    let acodes: Vec<u8> = (0..cols).map(|_| rng.random_range(0..=amax)).collect();
    let packed = PackedQuantMatrix::from_quantized(&wq)?;
    let act = PackedActivation::new(&acodes, activation_bits, 1.0, 0.0)?;
    let dense_w = wq.reconstruct();
    let la = levels(activation_bits) as f64;
    let dense_a: Vec<f64> = acodes.iter().map(|&c| c as f64 / la).collect();

    let mut packed_out = Vec::new();
    let start = Instant::now();
    for _ in 0..repeats {
        packed_out = std::hint::black_box(qmatvec(&packed, &act)?);
    }
    let packed_secs = start.elapsed().as_secs_f64();

    let mut dense_out = vec![0.0; rows];
    let start = Instant::now();
    for _ in 0..repeats {
        for (r, o) in dense_out.iter_mut().enumerate() {
            *o = dense_w.row(r).iter().zip(&dense_a).map(|(x, y)| x * y).sum();
        }
        std::hint::black_box(&dense_out);
    }
    let dense_secs = start.elapsed().as_secs_f64();

    let agreement = packed_out
        .iter()
        .zip(&dense_out)
        .all(|(p, d)| (p - d).abs() <= 1e-9 * d.abs().max(1.0));
    let macs = (rows * cols * repeats) as f64;
    Ok(BenchReport {
        rows,
        cols,
        weight_bits,
        activation_bits,
        repeats,
        packed_secs,
        dense_secs,
        packed_ops_per_sec: macs / packed_secs.max(1e-12),
        dense_ops_per_sec: macs / dense_secs.max(1e-12),
        agreement,
    })
}
