//! Vanilla RNN `h_t = σ(W̃h_{t−1} + Ũx_t)` with readout `V h + b_o`, its
//! losses and backpropagation through time.
//!
//! Sequences are processed as batches: step `t` of a batch is a `B × n_i`
//! matrix whose rows are the samples, hidden states are `B × n_h`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gemm, read_binary, write_binary, Matrix, Op};
use crate::ortho::{BjorckConfig, BjorckTape};
use crate::quantize::{quantize, quantize_identity_offset, QuantSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// `sign(z)·relu(|z| + b)` with a learnable per-unit bias `b`.
    #[serde(alias = "modrelu")]
    ModRelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Single output after the last step.
    ManyToOne,
    /// One output per step.
    ManyToMany,
}

/// The loss also fixes the readout: softmax for the two cross-entropy
/// kinds, identity for MSE.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Mse,
    /// Cross-entropy in bits.
    Bpc,
}

impl LossKind {
    pub fn is_classification(self) -> bool {
        !matches!(self, LossKind::Mse)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RnnConfig {
    pub activation: Activation,
    pub mode: Mode,
    pub loss: LossKind,
}

/// `(W, U, V, b_o)` plus the modReLU bias. Gradients use the same layout.
#[derive(Clone, Debug, PartialEq)]
pub struct RnnParams {
    pub w: Matrix,
    pub u: Matrix,
    pub v: Matrix,
    pub b_o: Vec<f64>,
    pub modrelu_bias: Option<Vec<f64>>,
}

impl RnnParams {
    pub fn new(w: Matrix, u: Matrix, v: Matrix, b_o: Vec<f64>, modrelu_bias: Option<Vec<f64>>) -> Result<Self> {
        let p = RnnParams {
            w,
            u,
            v,
            b_o,
            modrelu_bias,
        };
        p.validate()?;
        Ok(p)
    }

    /// All-zero parameters for the given `(n_i, n_h, n_o)`.
    pub fn zeros(n_i: usize, n_h: usize, n_o: usize, activation: Activation) -> Self {
        RnnParams {
            w: Matrix::zeros(n_h, n_h),
            u: Matrix::zeros(n_h, n_i),
            v: Matrix::zeros(n_o, n_h),
            b_o: vec![0.0; n_o],
            modrelu_bias: (activation == Activation::ModRelu).then(|| vec![0.0; n_h]),
        }
    }

    pub fn n_i(&self) -> usize {
        self.u.cols()
    }

    pub fn n_h(&self) -> usize {
        self.w.rows()
    }

    pub fn n_o(&self) -> usize {
        self.v.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let n_h = self.w.rows();
        let shape_err = |what: &str| Error::invalid(format!("inconsistent parameter shapes: {what}"));
        if !self.w.is_square() {
            return Err(shape_err("W is not square"));
        }
        if self.u.rows() != n_h {
            return Err(shape_err("U rows differ from n_h"));
        }
        if self.v.cols() != n_h {
            return Err(shape_err("V columns differ from n_h"));
        }
        if self.b_o.len() != self.v.rows() {
            return Err(shape_err("b_o length differs from n_o"));
        }
        if let Some(b) = &self.modrelu_bias {
            if b.len() != n_h {
                return Err(shape_err("modReLU bias length differs from n_h"));
            }
        }
        let finite = self.w.is_finite()
            && self.u.is_finite()
            && self.v.is_finite()
            && self.b_o.iter().all(|x| x.is_finite())
            && self.modrelu_bias.iter().flatten().all(|x| x.is_finite());
        if !finite {
            return Err(Error::NonFinite("parameters"));
        }
        Ok(())
    }

    fn check_activation(&self, activation: Activation) -> Result<()> {
        match (activation, &self.modrelu_bias) {
            (Activation::ModRelu, None) => Err(Error::invalid("modReLU needs a bias vector")),
            (Activation::Relu, Some(_)) => Err(Error::invalid("ReLU network carries a modReLU bias")),
            _ => Ok(()),
        }
    }

    /// Total parameter count, every tensor included.
    pub fn count(&self) -> usize {
        self.w.as_slice().len()
            + self.u.as_slice().len()
            + self.v.as_slice().len()
            + self.b_o.len()
            + self.modrelu_bias.as_ref().map_or(0, Vec::len)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecurrentStage {
    Bjorck(BjorckConfig),
    Quantize(QuantSpec),
    /// `I + q_k(W − I)`.
    IdentityOffsetQuantize(QuantSpec),
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputStage {
    Quantize(QuantSpec),
    Identity,
}

/// Maps raw `(W, U)` to the weights used by the forward pass. Stages run
/// left to right.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightTransform {
    pub recurrent: Vec<RecurrentStage>,
    pub input: Vec<InputStage>,
}

impl WeightTransform {
    pub fn identity() -> Self {
        WeightTransform::default()
    }

    /// `q_k` on both `W` and `U`.
    pub fn quantized(bits: u32) -> Result<Self> {
        let spec = QuantSpec::new(bits)?;
        Ok(WeightTransform {
            recurrent: vec![RecurrentStage::Quantize(spec)],
            input: vec![InputStage::Quantize(spec)],
        })
    }

    /// `q_k(BJORCK(W))` and `q_k(U)`.
    pub fn bjorck_quantized(bits: u32, bjorck: BjorckConfig) -> Result<Self> {
        let spec = QuantSpec::new(bits)?;
        Ok(WeightTransform {
            recurrent: vec![RecurrentStage::Bjorck(bjorck), RecurrentStage::Quantize(spec)],
            input: vec![InputStage::Quantize(spec)],
        })
    }

    /// Bitwidth of the last quantizing recurrent stage, if any.
    pub fn recurrent_bits(&self) -> Option<u32> {
        self.recurrent.iter().rev().find_map(|s| match s {
            RecurrentStage::Quantize(q) | RecurrentStage::IdentityOffsetQuantize(q) => Some(q.bits()),
            _ => None,
        })
    }

    pub fn input_bits(&self) -> Option<u32> {
        self.input.iter().rev().find_map(|s| match s {
            InputStage::Quantize(q) => Some(q.bits()),
            InputStage::Identity => None,
        })
    }

    pub fn apply(&self, params: &RnnParams) -> Result<TransformedWeights> {
        let mut w = params.w.clone();
        let mut tapes = Vec::new();
        for stage in &self.recurrent {
            w = match stage {
                RecurrentStage::Bjorck(cfg) => {
                    let tape = BjorckTape::forward(&w, cfg)?;
                    let out = tape.output().clone();
                    tapes.push(tape);
                    out
                }
                RecurrentStage::Quantize(spec) => quantize(&w, spec),
                RecurrentStage::IdentityOffsetQuantize(spec) => quantize_identity_offset(&w, spec)?,
                RecurrentStage::Identity => w,
            };
        }
        let mut u = params.u.clone();
        for stage in &self.input {
            if let InputStage::Quantize(spec) = stage {
                u = quantize(&u, spec);
            }
        }
        Ok(TransformedWeights { w, u, tapes })
    }
}

/// Effective `W̃`, `Ũ` and what is needed to backpropagate through them.
#[derive(Clone, Debug)]
pub struct TransformedWeights {
    pub w: Matrix,
    pub u: Matrix,
    tapes: Vec<BjorckTape>,
}

impl TransformedWeights {
    /// Maps `∂L/∂W̃` to `∂L/∂W`. Quantizers pass gradients straight through.
    pub fn backward_recurrent(&self, grad: Matrix) -> Matrix {
        self.tapes.iter().rev().fold(grad, |g, tape| tape.backward(&g))
    }
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn modrelu(z: &[f64], b: &[f64]) -> Vec<f64> {
    z.iter().zip(b).map(|(&z, &b)| modrelu_scalar(z, b)).collect()
}

#[inline]
fn modrelu_scalar(z: f64, b: f64) -> f64 {
    let m = z.abs() + b;
    if m > 0.0 && z != 0.0 {
        z.signum() * m
    } else {
        0.0
    }
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub weights: TransformedWeights,
    /// `z_1..z_T`
    pub pre: Vec<Matrix>,
    /// `h_0..h_T`, with `h_0 = 0`.
    pub hidden: Vec<Matrix>,
    /// Raw readouts `V h + b_o`, one per output step. Use [`softmax_rows`]
    /// for class probabilities.
    pub outputs: Vec<Matrix>,
}

fn check_inputs(params: &RnnParams, x: &[Matrix]) -> Result<usize> {
    let first = x.first().ok_or_else(|| Error::invalid("sequence must have at least one step"))?;
    let b = first.rows();
    for xt in x {
        if xt.shape() != (b, params.n_i()) {
            return Err(Error::DimensionMismatch {
                op: "rnn input",
                left: xt.shape(),
                right: (b, params.n_i()),
            });
        }
    }
    Ok(b)
}

fn readout(params: &RnnParams, h: &Matrix) -> Matrix {
    let mut o = Matrix::zeros(h.rows(), params.n_o());
    gemm(1.0, h, Op::N, &params.v, Op::T, 0.0, &mut o).expect("shapes checked");
    for r in 0..o.rows() {
        for (y, b) in o.row_mut(r).iter_mut().zip(&params.b_o) {
            *y += b;
        }
    }
    o
}

pub fn forward(params: &RnnParams, transform: &WeightTransform, cfg: &RnnConfig, x: &[Matrix]) -> Result<ForwardTrace> {
    params.check_activation(cfg.activation)?;
    let weights = transform.apply(params)?;
    forward_with(params, weights, cfg, x)
}

/// Forward pass with already transformed weights.
pub fn forward_with(
    params: &RnnParams,
    weights: TransformedWeights,
    cfg: &RnnConfig,
    x: &[Matrix],
) -> Result<ForwardTrace> {
    let batch = check_inputs(params, x)?;
    let n_h = params.n_h();
    let steps = x.len();
    let mut pre = Vec::with_capacity(steps);
    let mut hidden = Vec::with_capacity(steps + 1);
    hidden.push(Matrix::zeros(batch, n_h));
    let mut outputs = Vec::new();
    for (t, xt) in x.iter().enumerate() {
        let mut z = Matrix::zeros(batch, n_h);
        gemm(1.0, xt, Op::N, &weights.u, Op::T, 0.0, &mut z)?;
        gemm(1.0, &hidden[t], Op::N, &weights.w, Op::T, 1.0, &mut z)?;
        let h = match (cfg.activation, &params.modrelu_bias) {
            (Activation::ModRelu, Some(bias)) => {
                let mut h = z.clone();
                for r in 0..batch {
                    for (v, b) in h.row_mut(r).iter_mut().zip(bias) {
                        *v = modrelu_scalar(*v, *b);
                    }
                }
                h
            }
            _ => z.map(relu),
        };
        if !h.is_finite() {
            return Err(Error::Diverged { step: t + 1 });
        }
        if cfg.mode == Mode::ManyToMany || t + 1 == steps {
            outputs.push(readout(params, &h));
        }
        pre.push(z);
        hidden.push(h);
    }
    Ok(ForwardTrace {
        weights,
        pre,
        hidden,
        outputs,
    })
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for r in 0..p.rows() {
        let row = p.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    p
}

fn log_softmax_at(row: &[f64], class: usize) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row[class] - lse
}

/// Targets per output step: class indices `[step][sample]` or values
/// (`B × n_o` per step).
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<Vec<usize>>),
    Values(Vec<Matrix>),
}

impl Targets {
    pub fn steps(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.len(),
        }
    }
}

/// Loss masks per output step, `[step][sample]`.
pub type Mask = Vec<Vec<bool>>;

fn check_loss_shapes(outputs: &[Matrix], targets: &Targets, mask: &[Vec<bool>]) -> Result<usize> {
    if targets.steps() != outputs.len() || mask.len() != outputs.len() {
        return Err(Error::invalid(format!(
            "{} outputs, {} target steps, {} mask steps",
            outputs.len(),
            targets.steps(),
            mask.len()
        )));
    }
    let mut count = 0;
    for (t, o) in outputs.iter().enumerate() {
        if mask[t].len() != o.rows() {
            return Err(Error::invalid(format!("mask length differs from batch at step {t}")));
        }
        match targets {
            Targets::Classes(c) => {
                if c[t].len() != o.rows() {
                    return Err(Error::invalid(format!("target length differs from batch at step {t}")));
                }
                if let Some(&bad) = c[t].iter().find(|&&k| k >= o.cols()) {
                    return Err(Error::invalid(format!("class {bad} out of range for {} outputs", o.cols())));
                }
            }
            Targets::Values(v) => {
                if v[t].shape() != o.shape() {
                    return Err(Error::DimensionMismatch {
                        op: "targets",
                        left: v[t].shape(),
                        right: o.shape(),
                    });
                }
            }
        }
        count += mask[t].iter().filter(|&&m| m).count();
    }
    if count == 0 {
        return Err(Error::invalid("loss mask selects no positions"));
    }
    Ok(count)
}

/// Mean loss over unmasked positions and its gradient w.r.t. the raw
/// outputs. MSE additionally averages over output dimensions.
pub fn loss_and_grad(
    outputs: &[Matrix],
    targets: &Targets,
    mask: &[Vec<bool>],
    kind: LossKind,
) -> Result<(f64, Vec<Matrix>)> {
    let count = check_loss_shapes(outputs, targets, mask)? as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(outputs.len());
    match (kind, targets) {
        (LossKind::CrossEntropy | LossKind::Bpc, Targets::Classes(classes)) => {
            let unit = if kind == LossKind::Bpc { std::f64::consts::LN_2 } else { 1.0 };
            for (t, o) in outputs.iter().enumerate() {
                let mut g = softmax_rows(o);
                for r in 0..o.rows() {
                    let row = g.row_mut(r);
                    if mask[t][r] {
                        let k = classes[t][r];
                        total -= log_softmax_at(o.row(r), k);
                        row[k] -= 1.0;
                        row.iter_mut().for_each(|v| *v /= count * unit);
                    } else {
                        row.fill(0.0);
                    }
                }
                grads.push(g);
            }
            total /= unit;
        }
        (LossKind::Mse, Targets::Values(values)) => {
            let denom = count * outputs[0].cols() as f64;
            for (t, o) in outputs.iter().enumerate() {
                let mut g = Matrix::zeros(o.rows(), o.cols());
                for r in 0..o.rows() {
                    if !mask[t][r] {
                        continue;
                    }
                    for (c, gv) in g.row_mut(r).iter_mut().enumerate() {
                        let d = o[(r, c)] - values[t][(r, c)];
                        total += d * d;
                        *gv = 2.0 * d / denom;
                    }
                }
                grads.push(g);
            }
            return Ok((total / denom, grads));
        }
        _ => return Err(Error::invalid(format!("{kind:?} loss does not match the target kind"))),
    }
    Ok((total / count, grads))
}

pub fn loss(outputs: &[Matrix], targets: &Targets, mask: &[Vec<bool>], kind: LossKind) -> Result<f64> {
    loss_and_grad(outputs, targets, mask, kind).map(|(l, _)| l)
}

/// Fraction of unmasked positions whose argmax is the target class.
pub fn accuracy(outputs: &[Matrix], targets: &Targets, mask: &[Vec<bool>]) -> Result<f64> {
    let count = check_loss_shapes(outputs, targets, mask)?;
    let Targets::Classes(classes) = targets else {
        return Err(Error::invalid("accuracy needs class targets"));
    };
    let mut hits = 0usize;
    for (t, o) in outputs.iter().enumerate() {
        for r in 0..o.rows() {
            if mask[t][r] && argmax(o.row(r)) == classes[t][r] {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / count as f64)
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Gradients w.r.t. the raw parameters.
pub fn backward(
    params: &RnnParams,
    cfg: &RnnConfig,
    trace: &ForwardTrace,
    x: &[Matrix],
    grad_outputs: &[Matrix],
) -> Result<RnnParams> {
    let steps = trace.pre.len();
    if x.len() != steps || grad_outputs.len() != trace.outputs.len() {
        return Err(Error::invalid("backward inputs do not match the trace"));
    }
    let n_h = params.n_h();
    let batch = trace.hidden[0].rows();
    let mut grads = RnnParams::zeros(params.n_i(), n_h, params.n_o(), cfg.activation);
    let mut dw_eff = Matrix::zeros(n_h, n_h);
    let mut du_eff = Matrix::zeros(n_h, params.n_i());
    let mut dh = Matrix::zeros(batch, n_h);
    let first_output = steps - trace.outputs.len();
    for t in (0..steps).rev() {
        let h = &trace.hidden[t + 1];
        if t >= first_output {
            let go = &grad_outputs[t - first_output];
            gemm(1.0, go, Op::N, &params.v, Op::N, 1.0, &mut dh)?;
            gemm(1.0, go, Op::T, h, Op::N, 1.0, &mut grads.v)?;
            for (b, s) in grads.b_o.iter_mut().zip(go.column_sums()) {
                *b += s;
            }
        }
        let z = &trace.pre[t];
        let mut dz = dh;
        match (&params.modrelu_bias, grads.modrelu_bias.as_mut()) {
            (Some(bias), Some(dbias)) => {
                for r in 0..batch {
                    for (c, d) in dz.row_mut(r).iter_mut().enumerate() {
                        let zv = z[(r, c)];
                        if zv != 0.0 && zv.abs() + bias[c] > 0.0 {
                            dbias[c] += *d * zv.signum();
                        } else {
                            *d = 0.0;
                        }
                    }
                }
            }
            _ => {
                for (d, &zv) in dz.as_mut_slice().iter_mut().zip(z.as_slice()) {
                    if zv <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
        }
        gemm(1.0, &dz, Op::T, &trace.hidden[t], Op::N, 1.0, &mut dw_eff)?;
        gemm(1.0, &dz, Op::T, &x[t], Op::N, 1.0, &mut du_eff)?;
        let mut next = Matrix::zeros(batch, n_h);
        if t > 0 {
            gemm(1.0, &dz, Op::N, &trace.weights.w, Op::N, 0.0, &mut next)?;
        }
        dh = next;
    }
    grads.w = trace.weights.backward_recurrent(dw_eff);
    grads.u = du_eff;
    Ok(grads)
}

/// Forward, loss and backward in one call.
pub fn loss_and_gradients(
    params: &RnnParams,
    transform: &WeightTransform,
    cfg: &RnnConfig,
    x: &[Matrix],
    targets: &Targets,
    mask: &[Vec<bool>],
) -> Result<(f64, RnnParams, ForwardTrace)> {
    let trace = forward(params, transform, cfg, x)?;
    let (l, g_out) = loss_and_grad(&trace.outputs, targets, mask, cfg.loss)?;
    let grads = backward(params, cfg, &trace, x, &g_out)?;
    Ok((l, grads, trace))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"QORNNCK1";

/// Metadata stored in front of the parameter matrices of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub n_i: usize,
    pub n_h: usize,
    pub n_o: usize,
    pub config: RnnConfig,
    pub transform: WeightTransform,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: RnnParams,
}

impl Checkpoint {
    pub fn new(params: RnnParams, config: RnnConfig, transform: WeightTransform, seed: u64) -> Result<Self> {
        params.validate()?;
        params.check_activation(config.activation)?;
        Ok(Checkpoint {
            header: CheckpointHeader {
                n_i: params.n_i(),
                n_h: params.n_h(),
                n_o: params.n_o(),
                config,
                transform,
                seed,
            },
            params,
        })
    }

    /// Layout: magic, `u32` header length, JSON header, then `W`, `U`, `V`,
    /// `b_o` (as a row) and, for modReLU, the bias row, each in the binary
    /// matrix format.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        out.write_all(CHECKPOINT_MAGIC)?;
        let len = u32::try_from(header.len()).map_err(|_| Error::invalid("checkpoint header too large"))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(&header)?;
        let p = &self.params;
        write_binary(&p.w, &mut out)?;
        write_binary(&p.u, &mut out)?;
        write_binary(&p.v, &mut out)?;
        write_binary(&Matrix::from_vec(1, p.b_o.len(), p.b_o.clone())?, &mut out)?;
        if let Some(b) = &p.modrelu_bias {
            write_binary(&Matrix::from_vec(1, b.len(), b.clone())?, &mut out)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format("not a checkpoint file"));
        }
        let mut len = [0u8; 4];
        input.read_exact(&mut len)?;
        let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
        input.read_exact(&mut header)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)?;
        let w = read_binary(&mut input)?;
        let u = read_binary(&mut input)?;
        let v = read_binary(&mut input)?;
        let b_o = read_binary(&mut input)?.into_vec();
        let modrelu_bias = match header.config.activation {
            Activation::ModRelu => Some(read_binary(&mut input)?.into_vec()),
            Activation::Relu => None,
        };
        let params = RnnParams::new(w, u, v, b_o, modrelu_bias)?;
        if (params.n_i(), params.n_h(), params.n_o()) != (header.n_i, header.n_h, header.n_o) {
            return Err(Error::format("checkpoint shapes disagree with its header"));
        }
        Ok(Checkpoint { header, params })
    }
}
