//! Fixed-point inference of a weight-quantized ReLU network.
//!
//! With `q_k(W) = α_W W̃`, `q_k(U) = α_U Ũ` and inputs `x = α_i x̃`, the
//! network `(α_W W̃, Ũ/α_i, α_iα_U V, b_o)` has the same outputs as the
//! quantized one. Hidden states are stored as `h = α_h h̃` with `h̃` on a
//! `k_a`-bit grid, and `α_h` is picked so that `α_W α_h = 2^z`. One step is
//! then
//!
//! ```text
//! h̃_t = q^{α_h}_{k_a}(relu(2^z W̃ h̃_{t−1} + Ũ x̃_t)) / α_h
//! ```
//!
//! which needs only integer products, sums and shifts, followed by a
//! threshold lookup for the quantized activation.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gemm, read_binary, write_binary, Matrix, Op};
use crate::ortho::BjorckTape;
use crate::quantize::{code_for, quantize_codes, QuantSpec, QuantizedMatrix};
use crate::rnn::{forward, Activation, InputStage, Mode, RecurrentStage, RnnConfig, RnnParams, WeightTransform};
use crate::tasks::{Dataset, TaskKind};

/// `Q_{l,k} = 2^{−k}·⟦−2^{l−1}, 2^{l−1} − 1⟧`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FxpFormat {
    total_bits: u32,
    frac_bits: u32,
}

/// Raws are `i64`, so formats are limited to 64 bits.
pub const MAX_FORMAT_BITS: u32 = 64;

fn ceil_log2(n: usize) -> u32 {
    if n <= 1 {
        0
    } else {
        usize::BITS - (n - 1).leading_zeros()
    }
}

impl FxpFormat {
    pub fn new(total_bits: u32, frac_bits: u32) -> Result<Self> {
        if !(1..=MAX_FORMAT_BITS).contains(&total_bits) {
            return Err(Error::Unsupported(format!(
                "fixed-point format with {total_bits} bits (1..={MAX_FORMAT_BITS})"
            )));
        }
        Ok(FxpFormat {
            total_bits,
            frac_bits,
        })
    }

    /// `Q_{k+1,k}`, the grid of `[−1, 1)` with step `2^{−k}`.
    pub fn unit(frac_bits: u32) -> Result<Self> {
        FxpFormat::new(frac_bits + 1, frac_bits)
    }

    pub fn total_bits(&self) -> u32 {
        self.total_bits
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    pub fn min_raw(&self) -> i64 {
        i64::MIN >> (64 - self.total_bits)
    }

    pub fn max_raw(&self) -> i64 {
        i64::MAX >> (64 - self.total_bits)
    }

    pub fn contains(&self, raw: i64) -> bool {
        (self.min_raw()..=self.max_raw()).contains(&raw)
    }

    pub fn value(&self, raw: i64) -> f64 {
        raw as f64 / (self.frac_bits as f64).exp2()
    }

    /// `Q_{l,k} · Q_{l′,k′} ⊂ Q_{l+l′−1, k+k′}`, except for the product of
    /// both minima, which is `2^{l+l′−2}`.
    pub fn mul(&self, other: &FxpFormat) -> Result<FxpFormat> {
        FxpFormat::new(self.total_bits + other.total_bits - 1, self.frac_bits + other.frac_bits)
    }

    /// Sum of two numbers with the same fractional size: one extra bit.
    pub fn add(&self, other: &FxpFormat) -> Result<FxpFormat> {
        if self.frac_bits != other.frac_bits {
            return Err(Error::invalid(format!(
                "adding formats with {} and {} fractional bits",
                self.frac_bits, other.frac_bits
            )));
        }
        FxpFormat::new(self.total_bits.max(other.total_bits) + 1, self.frac_bits)
    }

    /// Sum of `n` numbers of this format: `⌈log₂ n⌉` guard bits.
    pub fn sum(&self, n: usize) -> Result<FxpFormat> {
        FxpFormat::new(self.total_bits + ceil_log2(n), self.frac_bits)
    }

    /// Same values with `d` more fractional bits (raws shifted left by `d`).
    pub fn widen_frac(&self, d: u32) -> Result<FxpFormat> {
        FxpFormat::new(self.total_bits + d, self.frac_bits + d)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FxpTensor {
    format: FxpFormat,
    rows: usize,
    cols: usize,
    raw: Vec<i64>,
}

impl FxpTensor {
    pub fn new(format: FxpFormat, rows: usize, cols: usize, raw: Vec<i64>) -> Result<Self> {
        if raw.len() != rows * cols {
            return Err(Error::invalid(format!("{} raws cannot fill {rows}x{cols}", raw.len())));
        }
        if let Some(&bad) = raw.iter().find(|&&r| !format.contains(r)) {
            return Err(Error::invalid(format!("raw {bad} outside {format:?}")));
        }
        Ok(FxpTensor {
            format,
            rows,
            cols,
            raw,
        })
    }

    /// Codes of a quantized matrix, in `Q_{k,k−1}`.
    pub fn from_codes(q: &QuantizedMatrix) -> Result<Self> {
        FxpTensor::new(FxpFormat::unit(q.bits - 1)?, q.rows, q.cols, q.codes.clone())
    }

    pub fn format(&self) -> FxpFormat {
        self.format
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn raw(&self) -> &[i64] {
        &self.raw
    }

    pub fn values(&self) -> Matrix {
        Matrix::from_vec(self.rows, self.cols, self.raw.iter().map(|&r| self.format.value(r)).collect())
            .expect("shape checked")
    }

    fn check_shape(&self, other: &FxpTensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }
}

/// Elementwise exact product. The widened format holds every product except
/// `min·min`, which is rejected rather than wrapped.
pub fn fxp_mul(a: &FxpTensor, b: &FxpTensor) -> Result<FxpTensor> {
    a.check_shape(b, "fxp_mul")?;
    let format = a.format.mul(&b.format)?;
    let (amin, bmin) = (a.format.min_raw(), b.format.min_raw());
    if a.raw.iter().zip(&b.raw).any(|(&x, &y)| x == amin && y == bmin) {
        return Err(Error::invalid(format!(
            "product of the two most negative values leaves {format:?}"
        )));
    }
    let raw = a.raw.iter().zip(&b.raw).map(|(x, y)| x * y).collect();
    FxpTensor::new(format, a.rows, a.cols, raw)
}

/// Elementwise exact sum of tensors with the same fractional size.
pub fn fxp_add(a: &FxpTensor, b: &FxpTensor) -> Result<FxpTensor> {
    a.check_shape(b, "fxp_add")?;
    let format = a.format.add(&b.format)?;
    let raw = a.raw.iter().zip(&b.raw).map(|(x, y)| x + y).collect();
    FxpTensor::new(format, a.rows, a.cols, raw)
}

/// Exact `a · b` for an `m × n` matrix and `n × p` matrix. One bit more than
/// the product rule so that `min·min` terms fit.
pub fn fxp_matmul(a: &FxpTensor, b: &FxpTensor) -> Result<FxpTensor> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch {
            op: "fxp_matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let format = a.format.mul(&b.format)?.sum(a.cols)?;
    let format = FxpFormat::new(format.total_bits + 1, format.frac_bits)?;
    let mut raw = vec![0i64; a.rows * b.cols];
    for i in 0..a.rows {
        for k in 0..a.cols {
            let x = a.raw[i * a.cols + k];
            for j in 0..b.cols {
                raw[i * b.cols + j] += x * b.raw[k * b.cols + j];
            }
        }
    }
    FxpTensor::new(format, a.rows, b.cols, raw)
}

/// Multiplication by `2^z` as a change of fractional size, shifting raws
/// left only when the fractional size would become negative.
pub fn fxp_scale_pow2(a: &FxpTensor, z: i32) -> Result<FxpTensor> {
    let k = a.format.frac_bits as i64 - z as i64;
    if k >= 0 {
        let format = FxpFormat::new(a.format.total_bits, k as u32)?;
        return FxpTensor::new(format, a.rows, a.cols, a.raw.clone());
    }
    let d = (-k) as u32;
    let format = FxpFormat::new(a.format.total_bits + d, 0)?;
    FxpTensor::new(format, a.rows, a.cols, a.raw.iter().map(|r| r << d).collect())
}

/// Scale of the inputs: one-hot tasks use 2, pixel and adding tasks 1.
pub fn input_scale(task: TaskKind) -> f64 {
    match task {
        TaskKind::Copy { .. } | TaskKind::Ptb => 2.0,
        TaskKind::Mnist { .. } | TaskKind::Adding { .. } => 1.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActQuantCalib {
    pub alpha_w: f64,
    pub alpha_u: f64,
    pub alpha_i: f64,
    /// `2^z / α_W`
    pub alpha_h: f64,
    pub z: i32,
    pub k: u32,
    pub k_a: u32,
    pub k_i: u32,
    pub max_h: f64,
}

/// Smallest `z` with `2^z / α_W ≥ max_h`. A zero `max_h` gives `z = 0`.
pub fn alpha_h_exponent(alpha_w: f64, max_h: f64) -> Result<i32> {
    if !(alpha_w > 0.0 && alpha_w.is_finite() && max_h >= 0.0 && max_h.is_finite()) {
        return Err(Error::invalid(format!("α_W = {alpha_w}, max_h = {max_h}")));
    }
    if max_h == 0.0 {
        return Ok(0);
    }
    let mut z = (alpha_w * max_h).log2().ceil() as i32;
    while (z as f64).exp2() / alpha_w < max_h {
        z += 1;
    }
    while ((z - 1) as f64).exp2() / alpha_w >= max_h {
        z -= 1;
    }
    Ok(z)
}

/// Codes of the deployed `W̃` and `Ũ`: the transforms must end with a
/// max-abs quantizer.
pub fn weight_codes(params: &RnnParams, transform: &WeightTransform) -> Result<(QuantizedMatrix, QuantizedMatrix)> {
    let unsupported = |what: &str| Error::Unsupported(format!("fixed-point export needs {what}"));
    let mut w = params.w.clone();
    let mut w_codes = None;
    for stage in &transform.recurrent {
        if w_codes.is_some() {
            return Err(unsupported("the recurrent quantizer as the last stage"));
        }
        match stage {
            RecurrentStage::Bjorck(cfg) => w = BjorckTape::forward(&w, cfg)?.into_output(),
            RecurrentStage::Quantize(spec) => w_codes = Some(quantize_codes(&w, spec)),
            RecurrentStage::IdentityOffsetQuantize(_) => return Err(unsupported("a plain recurrent quantizer")),
            RecurrentStage::Identity => {}
        }
    }
    let mut u_codes = None;
    for stage in &transform.input {
        if u_codes.is_some() {
            return Err(unsupported("the input quantizer as the last stage"));
        }
        if let InputStage::Quantize(spec) = stage {
            u_codes = Some(quantize_codes(&params.u, spec));
        }
    }
    match (w_codes, u_codes) {
        (Some(w), Some(u)) if w.bits == u.bits => Ok((w, u)),
        (Some(_), Some(_)) => Err(unsupported("equal bitwidths for W and U")),
        _ => Err(unsupported("quantized recurrent and input weights")),
    }
}

/// `(α_W W̃, Ũ/α_i, α_iα_U V, b_o)`: the quantized network with its hidden
/// states divided by `α_iα_U`, outputs unchanged.
pub fn rescaled_params(params: &RnnParams, w: &QuantizedMatrix, u: &QuantizedMatrix, alpha_i: f64) -> RnnParams {
    let lambda = 1.0 / (alpha_i * u.alpha);
    RnnParams {
        w: w.dequantize(),
        u: u.dequantize().scale(lambda),
        v: params.v.scale(1.0 / lambda),
        b_o: params.b_o.clone(),
        modrelu_bias: None,
    }
}

/// Measures `max_h = max_t ‖h_t‖_∞` of the rescaled network on `data` and
/// derives `α_h`.
pub fn calibrate_activations(
    params: &RnnParams,
    transform: &WeightTransform,
    cfg: &RnnConfig,
    k_a: u32,
    k_i: u32,
    alpha_i: f64,
    data: &[&dyn Dataset],
    batch_size: usize,
) -> Result<ActQuantCalib> {
    if cfg.activation != Activation::Relu {
        return Err(Error::Unsupported("fixed-point recurrence is defined for ReLU only".into()));
    }
    QuantSpec::new(k_a)?;
    QuantSpec::new(k_i)?;
    if !(alpha_i > 0.0 && alpha_i.is_finite()) {
        return Err(Error::invalid(format!("input scale must be positive, got {alpha_i}")));
    }
    let (w, u) = weight_codes(params, transform)?;
    if !(w.alpha > 0.0 && u.alpha > 0.0) {
        return Err(Error::invalid("quantized weights are all zero"));
    }
    let rescaled = rescaled_params(params, &w, &u, alpha_i);
    let identity = WeightTransform::identity();
    let mut max_h: f64 = 0.0;
    for d in data {
        let idx: Vec<usize> = (0..d.len()).collect();
        for chunk in idx.chunks(batch_size.max(1)) {
            let batch = d.batch(chunk)?;
            let trace = forward(&rescaled, &identity, cfg, &batch.inputs)?;
            for h in &trace.hidden[1..] {
                max_h = max_h.max(h.max_abs());
            }
        }
    }
    let z = alpha_h_exponent(w.alpha, max_h)?;
    Ok(ActQuantCalib {
        alpha_w: w.alpha,
        alpha_u: u.alpha,
        alpha_i,
        alpha_h: (z as f64).exp2() / w.alpha,
        z,
        k: w.bits,
        k_a,
        k_i,
        max_h,
    })
}

/// `q^{α_h}_{k_a}(relu(a))` as a code in `0..2^{k_a−1}`.
fn activation_code(a: f64, alpha_h: f64, k_a: u32) -> i64 {
    code_for(a.max(0.0), alpha_h, k_a)
}

/// Thresholds on the integer pre-activation `S`: the code of `S` is the
/// number of thresholds below it. Values above `overflow` exceed `α_h`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationLut {
    pub thresholds: Vec<i64>,
    pub overflow: i64,
}

impl ActivationLut {
    #[inline]
    pub fn lookup(&self, s: i64) -> i64 {
        self.thresholds.partition_point(|&t| t < s) as i64
    }
}

/// Largest `s` in `lo..=hi` with `!pred(s)`, for `pred` monotone; `lo − 1`
/// when `pred` holds everywhere.
fn last_false(lo: i64, hi: i64, pred: impl Fn(i64) -> bool) -> i64 {
    let (mut a, mut b) = (lo, hi + 1);
    while a < b {
        let m = a + (b - a) / 2;
        if pred(m) {
            b = m;
        } else {
            a = m + 1;
        }
    }
    a - 1
}

fn pre_activation_bound(n_i: usize, n_h: usize, k: u32, k_a: u32, k_i: u32, sr: u32, si: u32) -> i64 {
    let rec = n_h as i64 * (1i64 << (k - 1)) * ((1i64 << (k_a - 1)) - 1);
    let inp = n_i as i64 * (1i64 << (k - 1)) * (1i64 << (k_i - 1));
    (rec << sr) + (inp << si)
}

/// How the recurrence reacts to pre-activations above `α_h`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverflowPolicy {
    #[default]
    Error,
    Saturate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FxpHeader {
    n_i: usize,
    n_h: usize,
    n_o: usize,
    mode: Mode,
    calib: ActQuantCalib,
    weight_format: FxpFormat,
    accumulator: FxpFormat,
    shift_recurrent: u32,
    shift_input: u32,
    lut: ActivationLut,
    overflow: OverflowPolicy,
}

/// The deployable integer model.
#[derive(Clone, Debug, PartialEq)]
pub struct FxpModel {
    header: FxpHeader,
    w: FxpTensor,
    u: FxpTensor,
    /// `α_iα_U V`, applied in floating point.
    v: Matrix,
    b_o: Vec<f64>,
}

/// Integer hidden codes per step and the float readouts.
#[derive(Clone, Debug, PartialEq)]
pub struct FxpTrace {
    /// `[step][sample][unit]` codes of `h̃_1..h̃_T`.
    pub codes: Vec<Vec<Vec<i64>>>,
    pub outputs: Vec<Matrix>,
}

impl FxpModel {
    pub fn build(
        params: &RnnParams,
        transform: &WeightTransform,
        cfg: &RnnConfig,
        calib: &ActQuantCalib,
        overflow: OverflowPolicy,
    ) -> Result<Self> {
        if cfg.activation != Activation::Relu {
            return Err(Error::Unsupported("fixed-point recurrence is defined for ReLU only".into()));
        }
        let (wq, uq) = weight_codes(params, transform)?;
        if wq.bits != calib.k || wq.alpha != calib.alpha_w || uq.alpha != calib.alpha_u {
            return Err(Error::invalid("calibration does not belong to these weights"));
        }
        let (k, k_a, k_i) = (calib.k, calib.k_a, calib.k_i);
        let n_h = params.n_h();
        let n_i = params.n_i();
        let weight_format = FxpFormat::unit(k - 1)?;
        let hidden_format = FxpFormat::unit(k_a - 1)?;
        let input_format = FxpFormat::unit(k_i - 1)?;

        // Fractional sizes of the two sums once 2^z is folded in.
        let f_r = (k + k_a - 2) as i64 - calib.z as i64;
        let f_i = (k + k_i - 2) as i64;
        let frac = f_r.max(f_i);
        let shift_recurrent = (frac - f_r) as u32;
        let shift_input = (frac - f_i) as u32;
        let rec = weight_format.mul(&hidden_format)?.sum(n_h)?;
        let inp = weight_format.mul(&input_format)?.sum(n_i)?;
        let mut total_bits = (rec.total_bits + shift_recurrent).max(inp.total_bits + shift_input) + 1;
        // Input codes may sit at the grid minimum together with a weight code.
        let bound = pre_activation_bound(n_i, n_h, k, k_a, k_i, shift_recurrent, shift_input);
        if bound > (1i64 << (total_bits - 1)) - 1 {
            total_bits += 1;
        }
        // Exact in both i64 and f64.
        if total_bits > 53 {
            return Err(Error::Unsupported(format!("accumulator would need {total_bits} bits")));
        }
        let accumulator = FxpFormat::new(total_bits, frac as u32)?;

        let scale = (frac as f64).exp2();
        let (lo, hi) = (accumulator.min_raw(), accumulator.max_raw());
        let direct = |s: i64| activation_code(s as f64 / scale, calib.alpha_h, k_a);
        let max_code = (1i64 << (k_a - 1)) - 1;
        let thresholds = (1..=max_code).map(|c| last_false(lo, hi, |s| direct(s) >= c)).collect();
        let over = last_false(lo, hi, |s| s as f64 / scale > calib.alpha_h);
        let lut = ActivationLut {
            thresholds,
            overflow: over,
        };
        Ok(FxpModel {
            header: FxpHeader {
                n_i,
                n_h,
                n_o: params.n_o(),
                mode: cfg.mode,
                calib: *calib,
                weight_format,
                accumulator,
                shift_recurrent,
                shift_input,
                lut,
                overflow,
            },
            w: FxpTensor::from_codes(&wq)?,
            u: FxpTensor::from_codes(&uq)?,
            v: params.v.scale(calib.alpha_i * calib.alpha_u),
            b_o: params.b_o.clone(),
        })
    }

    pub fn calib(&self) -> &ActQuantCalib {
        &self.header.calib
    }

    pub fn lut(&self) -> &ActivationLut {
        &self.header.lut
    }

    pub fn accumulator(&self) -> FxpFormat {
        self.header.accumulator
    }

    pub fn set_overflow_policy(&mut self, policy: OverflowPolicy) {
        self.header.overflow = policy;
    }

    /// Bound on `|S|` over all admissible codes.
    pub fn pre_activation_bound(&self) -> i64 {
        let (c, h) = (&self.header.calib, &self.header);
        pre_activation_bound(h.n_i, h.n_h, c.k, c.k_a, c.k_i, h.shift_recurrent, h.shift_input)
    }

    /// Real value of the pre-activation `S`.
    pub fn pre_activation_value(&self, s: i64) -> f64 {
        self.header.accumulator.value(s)
    }

    /// `q^{α_h}_{k_a}(relu(·))` computed directly in floating point.
    pub fn direct_activation(&self, s: i64) -> i64 {
        activation_code(self.pre_activation_value(s), self.header.calib.alpha_h, self.header.calib.k_a)
    }

    /// Codes of `x̃ = x/α_i` on the `k_i`-bit grid.
    pub fn input_codes(&self, x: &[f64]) -> Vec<i64> {
        let c = &self.header.calib;
        x.iter().map(|&v| code_for(v, c.alpha_i, c.k_i)).collect()
    }

    fn readout(&self, codes: &[Vec<i64>]) -> Matrix {
        let c = &self.header.calib;
        let step = c.alpha_h / ((c.k_a - 1) as f64).exp2();
        let h = Matrix::from_fn(codes.len(), self.header.n_h, |b, j| codes[b][j] as f64 * step);
        let mut o = Matrix::zeros(codes.len(), self.header.n_o);
        gemm(1.0, &h, Op::N, &self.v, Op::T, 0.0, &mut o).expect("shapes fixed at build");
        for r in 0..o.rows() {
            for (y, b) in o.row_mut(r).iter_mut().zip(&self.b_o) {
                *y += b;
            }
        }
        o
    }

    fn check_inputs(&self, x: &[Matrix]) -> Result<usize> {
        let b = x.first().ok_or_else(|| Error::invalid("sequence must have at least one step"))?.rows();
        if x.iter().any(|m| m.shape() != (b, self.header.n_i)) {
            return Err(Error::invalid("input shape differs from the model"));
        }
        Ok(b)
    }

    fn run(&self, x: &[Matrix], mut step: impl FnMut(&[i64], &[i64], usize) -> Result<Vec<i64>>) -> Result<FxpTrace> {
        let batch = self.check_inputs(x)?;
        let mut h = vec![vec![0i64; self.header.n_h]; batch];
        let mut codes = Vec::with_capacity(x.len());
        let mut outputs = Vec::new();
        for (t, xt) in x.iter().enumerate() {
            for (b, hb) in h.iter_mut().enumerate() {
                let cx = self.input_codes(xt.row(b));
                *hb = step(hb, &cx, t + 1)?;
            }
            if self.header.mode == Mode::ManyToMany || t + 1 == x.len() {
                outputs.push(self.readout(&h));
            }
            codes.push(h.clone());
        }
        Ok(FxpTrace { codes, outputs })
    }

    fn overflow(&self, s_value: f64, step: usize) -> Error {
        Error::FxpOverflow {
            step,
            value: s_value,
            alpha_h: self.header.calib.alpha_h,
        }
    }

    /// The integer recurrence: products and sums of raws, shifts, and the
    /// threshold table. Only the readout uses floating point.
    pub fn forward(&self, x: &[Matrix]) -> Result<FxpTrace> {
        let (n_h, n_i) = (self.header.n_h, self.header.n_i);
        let (sr, si) = (self.header.shift_recurrent, self.header.shift_input);
        let acc = self.header.accumulator;
        let lut = &self.header.lut;
        let w = self.w.raw();
        let u = self.u.raw();
        let max_code = lut.thresholds.len() as i64;
        self.run(x, |h, cx, step| {
            let mut out = vec![0i64; n_h];
            for (i, o) in out.iter_mut().enumerate() {
                let rec: i64 = w[i * n_h..(i + 1) * n_h].iter().zip(h).map(|(a, b)| a * b).sum();
                let inp: i64 = u[i * n_i..(i + 1) * n_i].iter().zip(cx).map(|(a, b)| a * b).sum();
                let s = (rec << sr) + (inp << si);
                if !acc.contains(s) {
                    return Err(Error::format(format!("accumulator overflow at step {step}")));
                }
                *o = if s > lut.overflow {
                    match self.header.overflow {
                        OverflowPolicy::Error => return Err(self.overflow(acc.value(s), step)),
                        OverflowPolicy::Saturate => max_code,
                    }
                } else {
                    lut.lookup(s)
                };
            }
            Ok(out)
        })
    }

    /// Reference recurrence in floating point on the dyadic values, with the
    /// same rounding as the quantizer.
    pub fn float_reference(&self, x: &[Matrix]) -> Result<FxpTrace> {
        let c = self.header.calib;
        let wv = self.w.values();
        let uv = self.u.values();
        let h_scale = ((c.k_a - 1) as f64).exp2();
        let x_scale = ((c.k_i - 1) as f64).exp2();
        let gain = (c.z as f64).exp2();
        let max_code = (1i64 << (c.k_a - 1)) - 1;
        self.run(x, |h, cx, step| {
            let mut out = vec![0i64; self.header.n_h];
            for (i, o) in out.iter_mut().enumerate() {
                let rec: f64 = wv.row(i).iter().zip(h).map(|(a, &b)| a * (b as f64 / h_scale)).sum();
                let inp: f64 = uv.row(i).iter().zip(cx).map(|(a, &b)| a * (b as f64 / x_scale)).sum();
                let a = gain * rec + inp;
                *o = if a > c.alpha_h {
                    match self.header.overflow {
                        OverflowPolicy::Error => return Err(self.overflow(a, step)),
                        OverflowPolicy::Saturate => max_code,
                    }
                } else {
                    activation_code(a, c.alpha_h, c.k_a)
                };
            }
            Ok(out)
        })
    }

    /// Layout: magic, `u32` header length, JSON header, `W̃` and `Ũ` raws as
    /// little-endian `i64`, then `α_iα_U V` and `b_o` in the binary matrix
    /// format.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        out.write_all(FXP_MAGIC)?;
        let len = u32::try_from(header.len()).map_err(|_| Error::invalid("header too large"))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(&header)?;
        for r in self.w.raw().iter().chain(self.u.raw()) {
            out.write_all(&r.to_le_bytes())?;
        }
        write_binary(&self.v, &mut out)?;
        write_binary(&Matrix::from_vec(1, self.b_o.len(), self.b_o.clone())?, &mut out)?;
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != FXP_MAGIC {
            return Err(Error::format("not a fixed-point model file"));
        }
        let mut len = [0u8; 4];
        input.read_exact(&mut len)?;
        let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
        input.read_exact(&mut header)?;
        let header: FxpHeader = serde_json::from_slice(&header)?;
        let mut read_raws = |n: usize| -> Result<Vec<i64>> {
            let mut buf = vec![0u8; 8 * n];
            input.read_exact(&mut buf)?;
            Ok(buf.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
        };
        let (n_i, n_h, n_o) = (header.n_i, header.n_h, header.n_o);
        let w = FxpTensor::new(header.weight_format, n_h, n_h, read_raws(n_h * n_h)?)?;
        let u = FxpTensor::new(header.weight_format, n_h, n_i, read_raws(n_h * n_i)?)?;
        let v = read_binary(&mut input)?;
        let b_o = read_binary(&mut input)?.into_vec();
        if v.shape() != (n_o, n_h) || b_o.len() != n_o {
            return Err(Error::format("readout shapes disagree with the header"));
        }
        Ok(FxpModel { header, w, u, v, b_o })
    }
}

const FXP_MAGIC: &[u8; 8] = b"QORNNFX1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComplexityMode {
    FullPrecision,
    QuantizedWeights,
    FullyQuantized,
}

/// Kind of arithmetic used by an operation count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Arith {
    Float,
    /// Fixed-point addition.
    Fixed,
    /// Fixed-point multiplication of `a`-bit by `b`-bit numbers.
    FixedMul { a: u32, b: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCount {
    pub count: u64,
    pub arith: Arith,
}

/// Per-step operation counts of the two matrix-vector products.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub input_mul: OpCount,
    pub input_add: OpCount,
    pub recurrent_mul: OpCount,
    pub recurrent_add: OpCount,
}

/// Weight quantization lets `q_k(W)h` be computed from `k` binary matrices,
/// hence `k·n²` additions but only `n` multiplications by the scale. With
/// one-hot inputs the input product needs `n_h` multiplications and
/// `(k_i − 1)(n_i − 1)n_h` additions.
pub fn complexity_report(
    n_i: usize,
    n_h: usize,
    k: u32,
    k_a: u32,
    k_i: u32,
    mode: ComplexityMode,
    one_hot_inputs: bool,
) -> ComplexityReport {
    let (ni, nh, kk) = (n_i as u64, n_h as u64, u64::from(k));
    let op = |count, arith| OpCount { count, arith };
    let mut r = match mode {
        ComplexityMode::FullPrecision => ComplexityReport {
            input_mul: op(ni * nh, Arith::Float),
            input_add: op(ni * nh, Arith::Float),
            recurrent_mul: op(nh * nh, Arith::Float),
            recurrent_add: op(nh * nh, Arith::Float),
        },
        ComplexityMode::QuantizedWeights => ComplexityReport {
            input_mul: op(nh, Arith::Float),
            input_add: op(kk * ni * nh, Arith::Float),
            recurrent_mul: op(nh, Arith::Float),
            recurrent_add: op(kk * nh * nh, Arith::Float),
        },
        ComplexityMode::FullyQuantized => ComplexityReport {
            input_mul: op(ni * nh, Arith::FixedMul { a: k, b: k_i }),
            input_add: op(ni * nh, Arith::Fixed),
            recurrent_mul: op(nh * nh, Arith::FixedMul { a: k, b: k_a }),
            recurrent_add: op(nh * nh, Arith::Fixed),
        },
    };
    if one_hot_inputs && mode != ComplexityMode::FullPrecision {
        let adds = u64::from(k_i.saturating_sub(1)) * ni.saturating_sub(1) * nh;
        r.input_mul.count = nh;
        r.input_add.count = adds;
        if mode == ComplexityMode::FullyQuantized {
            r.input_add.arith = Arith::Fixed;
        }
    }
    r
}
