//! Uniform scaled quantizer and its straight-through backward rule.
//!
//! For bitwidth `k` and scale `α > 0` the level set is
//! `(α / 2^{k−1}) · {−2^{k−1}, …, 2^{k−1} − 1}`: `2^k` evenly spaced values
//! from `−α` up to `α − α/2^{k−1}`. Entries are rounded to the nearest level,
//! ties going to the lower level. The scale is treated as a constant by the
//! backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Largest supported bitwidth; codes must fit comfortably in `i64`.
pub const MAX_BITS: u32 = 32;

/// How the scale `α` of the grid is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleRule {
    /// `α = ‖W‖_max` of the tensor being quantized, recomputed on every call.
    MaxAbs,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawQuantSpec")]
pub struct QuantSpec {
    bits: u32,
    scale: ScaleRule,
}

#[derive(Deserialize)]
struct RawQuantSpec {
    bits: u32,
    scale: ScaleRule,
}

impl TryFrom<RawQuantSpec> for QuantSpec {
    type Error = Error;

    fn try_from(raw: RawQuantSpec) -> Result<Self> {
        match raw.scale {
            ScaleRule::MaxAbs => QuantSpec::new(raw.bits),
            ScaleRule::Fixed(a) => QuantSpec::with_fixed_scale(raw.bits, a),
        }
    }
}

impl QuantSpec {
    /// `k`-bit quantizer with the max-abs scaling rule.
    pub fn new(bits: u32) -> Result<Self> {
        if !(2..=MAX_BITS).contains(&bits) {
            return Err(Error::invalid(format!("bitwidth must be in 2..={MAX_BITS}, got {bits}")));
        }
        Ok(QuantSpec {
            bits,
            scale: ScaleRule::MaxAbs,
        })
    }

    pub fn with_fixed_scale(bits: u32, alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::invalid(format!("fixed scale must be positive, got {alpha}")));
        }
        Ok(QuantSpec {
            scale: ScaleRule::Fixed(alpha),
            ..QuantSpec::new(bits)?
        })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn scale_rule(&self) -> ScaleRule {
        self.scale
    }

    /// The scale that would be used for `w`.
    pub fn alpha_for(&self, w: &Matrix) -> f64 {
        match self.scale {
            ScaleRule::MaxAbs => w.max_abs(),
            ScaleRule::Fixed(a) => a,
        }
    }

    /// Smallest and largest code, `−2^{k−1}` and `2^{k−1} − 1`.
    pub fn code_range(&self) -> (i64, i64) {
        code_range(self.bits)
    }
}

pub fn code_range(bits: u32) -> (i64, i64) {
    let half = 1i64 << (bits - 1);
    (-half, half - 1)
}

/// Grid step `α / 2^{k−1}`.
#[inline]
pub fn step(alpha: f64, bits: u32) -> f64 {
    alpha / (1u64 << (bits - 1)) as f64
}

/// Integer code of the level nearest to `x`, ties toward the lower level.
#[inline]
pub fn code_for(x: f64, alpha: f64, bits: u32) -> i64 {
    if alpha == 0.0 {
        return 0;
    }
    let (lo, hi) = code_range(bits);
    let j = (x / step(alpha, bits) - 0.5).ceil();
    // Clamp in float first so huge ratios cannot overflow the cast.
    j.clamp(lo as f64, hi as f64) as i64
}

#[inline]
pub fn quantize_scalar(x: f64, alpha: f64, bits: u32) -> f64 {
    if alpha == 0.0 {
        return 0.0;
    }
    code_for(x, alpha, bits) as f64 * step(alpha, bits)
}

/// Quantized matrix kept as integer codes plus its scale:
/// `value = code · α / 2^{k−1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedMatrix {
    pub rows: usize,
    pub cols: usize,
    pub bits: u32,
    pub alpha: f64,
    pub codes: Vec<i64>,
}

impl QuantizedMatrix {
    pub fn dequantize(&self) -> Matrix {
        let s = step(self.alpha, self.bits);
        let data = self.codes.iter().map(|&c| c as f64 * s).collect();
        Matrix::from_vec(self.rows, self.cols, data).expect("codes match shape")
    }
}

pub fn quantize_codes(w: &Matrix, spec: &QuantSpec) -> QuantizedMatrix {
    let alpha = spec.alpha_for(w);
    QuantizedMatrix {
        rows: w.rows(),
        cols: w.cols(),
        bits: spec.bits,
        alpha,
        codes: w.as_slice().iter().map(|&x| code_for(x, alpha, spec.bits)).collect(),
    }
}

/// Entrywise nearest-level quantization `q_k(w)`.
///
/// With the max-abs rule an all-zero input has `α = 0`; the grid collapses
/// and the zero matrix is returned.
pub fn quantize(w: &Matrix, spec: &QuantSpec) -> Matrix {
    let alpha = spec.alpha_for(w);
    w.map(|x| quantize_scalar(x, alpha, spec.bits))
}

/// Straight-through estimator: the gradient with respect to the
/// full-precision tensor is the gradient at the quantized point.
pub fn ste_backward(upstream_grad: &Matrix) -> Matrix {
    upstream_grad.clone()
}

/// `I + q_k(w − I)`, the recurrent quantizer variant centred on the identity.
pub fn quantize_identity_offset(w: &Matrix, spec: &QuantSpec) -> Result<Matrix> {
    if !w.is_square() {
        return Err(Error::NotSquare {
            rows: w.rows(),
            cols: w.cols(),
        });
    }
    let n = w.rows();
    let eye = Matrix::identity(n);
    let offset = w.sub(&eye)?;
    quantize(&offset, spec).add(&eye)
}
