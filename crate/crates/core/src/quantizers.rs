//! Uniform, min/max and balanced quantizers.
//!
//! Every quantizer here maps a real tensor onto a `2^k`-level grid and
//! records the integer codes together with the affine pair `(alpha, beta)`
//! such that `value = alpha * code / (2^k - 1) + beta`.
//!
//! The balanced quantizer standardizes with an adaptive threshold
//! `s = gamma * stat(|X|)` instead of the extremal values:
//!
//! ```text
//! X_hat = clip(X / s, -1/2, 1/2) + 1/2
//! Xq    = s * Q_k(X_hat) - s/2
//! ```
//!
//! For `k = 2` the three decision thresholds on `X` are `{-s/3, 0, s/3}`,
//! so with `gamma = 3` and the median statistic a symmetric input lands
//! in four bins of identical size.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Matrix;

/// Bit-width value meaning "not quantized" (full precision).
pub const FULL_PRECISION_BITS: u8 = 32;

/// Largest bit-width that stores codes in a `u8`.
pub const MAX_BITS: u8 = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("input value {value} outside quantizer domain [{lo}, {hi}]")]
    Domain { value: f64, lo: f64, hi: f64 },
    #[error("degenerate range: max == min == {0}, cannot standardize")]
    DegenerateRange(f64),
    #[error("degenerate threshold: {stat} of |X| is zero")]
    DegenerateThreshold { stat: &'static str },
    #[error("invalid bit-width {0}: expected 1..=8")]
    BitWidth(u8),
    #[error("invalid gamma {0}: must be positive and finite")]
    Gamma(f64),
    #[error("non-finite input value {0}")]
    NonFinite(f64),
}

/// Statistic of `|X|` used to set the balanced threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdStat {
    MeanAbs,
    MedianAbs,
}

impl ThresholdStat {
    pub fn name(self) -> &'static str {
        match self {
            ThresholdStat::MeanAbs => "mean_abs",
            ThresholdStat::MedianAbs => "median_abs",
        }
    }
}

/// Activation value range: `[0, 1]` or `[-1/2, 1/2]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationRange {
    Unit01,
    Symmetric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    /// 1..=8, or 32 for full precision.
    pub weight_bits: u8,
    /// 1..=8, or 32 for full precision.
    pub activation_bits: u8,
    pub balanced: bool,
    pub gamma: f64,
    pub threshold_stat: ThresholdStat,
    pub activation_range: ActivationRange,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            weight_bits: 2,
            activation_bits: 2,
            balanced: true,
            gamma: 2.5,
            threshold_stat: ThresholdStat::MeanAbs,
            activation_range: ActivationRange::Unit01,
        }
    }
}

impl QuantConfig {
    pub fn full_precision() -> Self {
        Self {
            weight_bits: FULL_PRECISION_BITS,
            activation_bits: FULL_PRECISION_BITS,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        for bits in [self.weight_bits, self.activation_bits] {
            if bits != FULL_PRECISION_BITS {
                check_bits(bits)?;
            }
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(QuantError::Gamma(self.gamma));
        }
        Ok(())
    }

    pub fn weights_quantized(&self) -> bool {
        self.weight_bits != FULL_PRECISION_BITS
    }

    pub fn activations_quantized(&self) -> bool {
        self.activation_bits != FULL_PRECISION_BITS
    }
}

/// Integer codes plus the affine reconstruction `alpha * c / (2^k - 1) + beta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedMatrix {
    pub codes: Vec<u8>,
    pub bits: u8,
    pub alpha: f64,
    pub beta: f64,
    pub rows: usize,
    pub cols: usize,
}

impl QuantizedMatrix {
    #[inline]
    pub fn levels(&self) -> u32 {
        levels(self.bits)
    }

    pub fn reconstruct(&self) -> Matrix {
        let denom = self.levels() as f64;
        let data = self
            .codes
            .iter()
            .map(|&c| self.alpha * (c as f64 / denom) + self.beta)
            .collect();
        Matrix::from_vec(self.rows, self.cols, data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub bin_counts: Vec<u64>,
    pub normalized_entropy: f64,
    pub max_abs_error: f64,
}

/// `2^k - 1`, the largest code at bit-width `k`.
#[inline]
pub fn levels(bits: u8) -> u32 {
    (1u32 << bits) - 1
}

fn check_bits(bits: u8) -> Result<(), QuantError> {
    if (1..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(QuantError::BitWidth(bits))
    }
}

/// Distance (in units of `x`) within which a value counts as sitting on a rounding tie.
pub const TIE_SLACK: f64 = 1e-12;

/// Code of `x ∈ [0, 1]` under `Q_k`: `⌊(2^k - 1)x + 1/2⌋`, ties round up.
///
/// Values within [`TIE_SLACK`] of a tie count as the tie.
#[inline]
pub fn unit_code(x: f64, bits: u8) -> u8 {
    let n = levels(bits) as f64;
    let y = n * x + 0.5;
    let r = y.round();
    if (y - r).abs() <= TIE_SLACK * n {
        r as u8
    } else {
        y.floor() as u8
    }
}

/// `Q_k(x)` for one scalar already in `[0, 1]`.
#[inline]
pub fn quantize_unit_scalar(x: f64, bits: u8) -> f64 {
    unit_code(x, bits) as f64 / levels(bits) as f64
}

fn check_unit_domain(data: &[f64], lo: f64, hi: f64) -> Result<(), QuantError> {
    for &v in data {
        if !(lo..=hi).contains(&v) {
            return Err(if v.is_nan() {
                QuantError::NonFinite(v)
            } else {
                QuantError::Domain { value: v, lo, hi }
            });
        }
    }
    Ok(())
}

fn check_finite(data: &[f64]) -> Result<(), QuantError> {
    match data.iter().find(|v| !v.is_finite()) {
        Some(&v) => Err(QuantError::NonFinite(v)),
        None => Ok(()),
    }
}

/// `Q_k` applied elementwise to a matrix with entries in `[0, 1]`.
pub fn quantize_unit(x: &Matrix, bits: u8) -> Result<Matrix, QuantError> {
    check_bits(bits)?;
    check_unit_domain(x.data(), 0.0, 1.0)?;
    Ok(x.map(|v| quantize_unit_scalar(v, bits)))
}

/// Standardize with `(X - beta) / alpha`, quantize, and reverse the affine map.
fn affine_quantize(
    x: &Matrix,
    bits: u8,
    alpha: f64,
    beta: f64,
    standardize: impl Fn(f64) -> f64,
) -> (Matrix, QuantizedMatrix) {
    let codes: Vec<u8> = x.data().iter().map(|&v| unit_code(standardize(v), bits)).collect();
    let meta = QuantizedMatrix {
        codes,
        bits,
        alpha,
        beta,
        rows: x.rows(),
        cols: x.cols(),
    };
    (meta.reconstruct(), meta)
}

/// Min/max quantization: `alpha = max - min`, `beta = min`.
pub fn quantize_det(x: &Matrix, bits: u8) -> Result<(Matrix, QuantizedMatrix), QuantError> {
    check_bits(bits)?;
    check_finite(x.data())?;
    let (lo, hi) = x
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if x.is_empty() || hi <= lo {
        return Err(QuantError::DegenerateRange(if x.is_empty() { 0.0 } else { lo }));
    }
    Ok(quantize_with_range(x, bits, hi - lo, lo, (lo, hi)))
}

/// Min/max quantization on the symmetric range `[-max|X|, max|X|]`.
///
/// This is the unbalanced baseline for weights.
pub fn quantize_det_symmetric(x: &Matrix, bits: u8) -> Result<(Matrix, QuantizedMatrix), QuantError> {
    check_bits(bits)?;
    check_finite(x.data())?;
    let m = x.max_abs();
    if m == 0.0 {
        return Err(QuantError::DegenerateRange(0.0));
    }
    Ok(quantize_with_range(x, bits, 2.0 * m, -m, (-m, m)))
}

/// Extremal codes reconstruct to `ends` exactly rather than `alpha + beta`.
fn quantize_with_range(x: &Matrix, bits: u8, alpha: f64, beta: f64, ends: (f64, f64)) -> (Matrix, QuantizedMatrix) {
    let (mut xq, meta) = affine_quantize(x, bits, alpha, beta, |v| ((v - beta) / alpha).clamp(0.0, 1.0));
    let top = levels(bits) as u8;
    for (q, &c) in xq.data_mut().iter_mut().zip(&meta.codes) {
        if c == 0 {
            *q = ends.0;
        } else if c == top {
            *q = ends.1;
        }
    }
    (xq, meta)
}

pub fn mean_abs(data: &[f64]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    data.iter().map(|v| v.abs()).sum::<f64>() / data.len() as f64
}

/// Median of `|X|`; midpoint of the two central values for even length.
pub fn median_abs(data: &[f64]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let mut abs: Vec<f64> = data.iter().map(|v| v.abs()).collect();
    abs.sort_by(|a, b| a.total_cmp(b));
    let n = abs.len();
    if n % 2 == 1 {
        abs[n / 2]
    } else {
        0.5 * (abs[n / 2 - 1] + abs[n / 2])
    }
}

pub fn threshold_statistic(data: &[f64], stat: ThresholdStat) -> f64 {
    match stat {
        ThresholdStat::MeanAbs => mean_abs(data),
        ThresholdStat::MedianAbs => median_abs(data),
    }
}

/// Balanced quantization with threshold `s = gamma * stat(|X|)`.
pub fn quantize_balanced(
    x: &Matrix,
    bits: u8,
    gamma: f64,
    stat: ThresholdStat,
) -> Result<(Matrix, QuantizedMatrix), QuantError> {
    check_bits(bits)?;
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(QuantError::Gamma(gamma));
    }
    check_finite(x.data())?;
    let t = threshold_statistic(x.data(), stat);
    if t == 0.0 {
        return Err(QuantError::DegenerateThreshold { stat: stat.name() });
    }
    Ok(quantize_balanced_with_scale(x, bits, gamma * t))
}

/// Balanced quantization with an explicit scale `s` (`alpha = s`, `beta = -s/2`).
pub fn quantize_balanced_with_scale(x: &Matrix, bits: u8, scale: f64) -> (Matrix, QuantizedMatrix) {
    affine_quantize(x, bits, scale, -0.5 * scale, |v| (v / scale).clamp(-0.5, 0.5) + 0.5)
}

/// Weight quantizer selected by `cfg`.
///
/// Balanced mode uses `gamma * stat(|X|)`, except at one bit where the
/// scale is fixed to `2 * mean(|X|)` (outputs `±mean|X|`). Unbalanced mode
/// is symmetric min/max quantization.
pub fn quantize_weights(x: &Matrix, cfg: &QuantConfig) -> Result<(Matrix, QuantizedMatrix), QuantError> {
    let bits = cfg.weight_bits;
    if !cfg.balanced {
        return quantize_det_symmetric(x, bits);
    }
    if bits == 1 {
        check_finite(x.data())?;
        let m = mean_abs(x.data());
        if m == 0.0 {
            return Err(QuantError::DegenerateThreshold { stat: "mean_abs" });
        }
        return Ok(quantize_balanced_with_scale(x, 1, 2.0 * m));
    }
    quantize_balanced(x, bits, cfg.gamma, cfg.threshold_stat)
}

/// Activation quantizer: `Q_k(X)` on `[0, 1]`, or `Q_k(X + 1/2) - 1/2` on `[-1/2, 1/2]`.
pub fn quantize_activation(x: &Matrix, bits: u8, range: ActivationRange) -> Result<Matrix, QuantError> {
    check_bits(bits)?;
    match range {
        ActivationRange::Unit01 => quantize_unit(x, bits),
        ActivationRange::Symmetric => {
            check_unit_domain(x.data(), -0.5, 0.5)?;
            Ok(x.map(|v| quantize_unit_scalar(v + 0.5, bits) - 0.5))
        }
    }
}

/// Code histogram, normalized entropy and worst-case reconstruction error.
pub fn balance_report(meta: &QuantizedMatrix, original: &Matrix) -> BalanceReport {
    let nbins = 1usize << meta.bits;
    let mut bin_counts = vec![0u64; nbins];
    for &c in &meta.codes {
        bin_counts[c as usize] += 1;
    }
    let total = meta.codes.len() as f64;
    let entropy: f64 = bin_counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum();
    let normalized_entropy = if nbins > 1 && total > 0.0 {
        (entropy / (nbins as f64).ln()).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let max_abs_error = meta
        .reconstruct()
        .data()
        .iter()
        .zip(original.data())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    BalanceReport {
        bin_counts,
        normalized_entropy,
        max_abs_error,
    }
}
