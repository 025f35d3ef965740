//! Optimizers, learning-rate schedules and the training strategies:
//! STE-projUNN, STE-Björck, STE with an orthogonality penalty, and
//! post-training quantization of a full-precision projUNN model.

use std::f64::consts::PI;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gram_residual, sample_uniform_orthogonal, singular_values, Matrix, RngState};
use crate::ortho::{ortho_penalty, projunn_project, BjorckConfig};
use crate::quantize::{quantize, QuantSpec};
use crate::rnn::{
    accuracy, backward, forward, loss_and_grad, Activation, InputStage, LossKind, RecurrentStage, RnnConfig,
    RnnParams, WeightTransform,
};
use crate::tasks::{Dataset, TaskBatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    Adam,
    /// Smoothing 0.99, ε = 1e-8, no momentum.
    Rmsprop,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Schedule {
    Constant,
    /// Multiply the rate by `gamma` every `every` epochs.
    Step { gamma: f64, every: usize },
}

impl Schedule {
    /// Rate for 1-based `epoch`.
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        match *self {
            Schedule::Constant => base,
            Schedule::Step { gamma, every } => {
                let drops = epoch.saturating_sub(1) / every.max(1);
                base * gamma.powi(drops as i32)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// The update of W is divided by this factor.
    pub recurrent_lr_divider: f64,
    /// Rescale gradients whose global norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr,
            recurrent_lr_divider: 1.0,
            clip_norm: None,
        }
    }

    pub fn rmsprop(lr: f64, divider: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Rmsprop,
            lr,
            recurrent_lr_divider: divider,
            clip_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.recurrent_lr_divider >= 1.0) {
            return Err(Error::invalid("recurrent learning-rate divider must be ≥ 1"));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::invalid("clip norm must be positive"));
        }
        Ok(())
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const RMSPROP_ALPHA: f64 = 0.99;
const EPS: f64 = 1e-8;

fn slices_mut(p: &mut RnnParams) -> Vec<&mut [f64]> {
    let mut v = vec![p.w.as_mut_slice(), p.u.as_mut_slice(), p.v.as_mut_slice(), p.b_o.as_mut_slice()];
    if let Some(b) = p.modrelu_bias.as_mut() {
        v.push(b.as_mut_slice());
    }
    v
}

fn slices(p: &RnnParams) -> Vec<&[f64]> {
    let mut v = vec![p.w.as_slice(), p.u.as_slice(), p.v.as_slice(), p.b_o.as_slice()];
    if let Some(b) = p.modrelu_bias.as_ref() {
        v.push(b.as_slice());
    }
    v
}

fn zeros_like(p: &RnnParams) -> RnnParams {
    let activation = if p.modrelu_bias.is_some() {
        Activation::ModRelu
    } else {
        Activation::Relu
    };
    RnnParams::zeros(p.n_i(), p.n_h(), p.n_o(), activation)
}

/// Adam or RMSprop with per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    lr: f64,
    steps: u64,
    first: RnnParams,
    second: RnnParams,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, params: &RnnParams) -> Result<Self> {
        cfg.validate()?;
        Ok(Optimizer {
            cfg,
            lr: cfg.lr,
            steps: 0,
            first: zeros_like(params),
            second: zeros_like(params),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Parameter deltas for `grads`; the moments are updated.
    pub fn deltas(&mut self, grads: &RnnParams) -> RnnParams {
        self.steps += 1;
        let mut scale = 1.0;
        if let Some(c) = self.cfg.clip_norm {
            let norm = slices(grads).iter().flat_map(|s| s.iter()).map(|g| g * g).sum::<f64>().sqrt();
            if norm > c {
                scale = c / norm;
            }
        }
        let mut deltas = zeros_like(grads);
        let t = self.steps as i32;
        let lr = self.lr;
        let kind = self.cfg.kind;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (((d, g), m), v) in slices_mut(&mut deltas)
            .into_iter()
            .zip(slices(grads))
            .zip(slices_mut(&mut self.first))
            .zip(slices_mut(&mut self.second))
        {
            for i in 0..g.len() {
                let gi = g[i] * scale;
                d[i] = match kind {
                    OptimizerKind::Adam => {
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                        -lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + EPS)
                    }
                    OptimizerKind::Rmsprop => {
                        v[i] = RMSPROP_ALPHA * v[i] + (1.0 - RMSPROP_ALPHA) * gi * gi;
                        -lr * gi / (v[i].sqrt() + EPS)
                    }
                };
            }
        }
        if self.cfg.recurrent_lr_divider != 1.0 {
            let div = self.cfg.recurrent_lr_divider;
            deltas.w.as_mut_slice().iter_mut().for_each(|x| *x /= div);
        }
        deltas
    }

    /// `params += deltas(grads)`
    pub fn apply(&mut self, params: &mut RnnParams, grads: &RnnParams) {
        let deltas = self.deltas(grads);
        for (p, d) in slices_mut(params).into_iter().zip(slices(&deltas)) {
            for (x, dx) in p.iter_mut().zip(d) {
                *x += dx;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrthoMethod {
    Projunn,
    Bjorck,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "name")]
pub enum Strategy {
    FullPrecision { ortho: OrthoMethod },
    SteProjunn { bits: u32 },
    SteBjorck { bits: u32 },
    StePen { bits: u32, lambda: f64 },
    /// Trained as full-precision projUNN, quantized afterwards.
    Ptq { bits: u32 },
}

impl Strategy {
    pub fn bits(&self) -> Option<u32> {
        match *self {
            Strategy::FullPrecision { .. } => None,
            Strategy::SteProjunn { bits }
            | Strategy::SteBjorck { bits }
            | Strategy::StePen { bits, .. }
            | Strategy::Ptq { bits } => Some(bits),
        }
    }

    pub fn projects(&self) -> bool {
        matches!(
            self,
            Strategy::FullPrecision {
                ortho: OrthoMethod::Projunn
            } | Strategy::SteProjunn { .. }
                | Strategy::Ptq { .. }
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    #[serde(alias = "haar")]
    HaarOrthogonal,
    /// Block-diagonal 2×2 rotations with angles uniform in (−π, π].
    Henaff,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    /// Quantize W as `I + q_k(W − I)`.
    pub identity_offset: bool,
    pub bjorck: BjorckConfig,
}

impl StrategyConfig {
    pub fn new(strategy: Strategy) -> Self {
        StrategyConfig {
            strategy,
            identity_offset: false,
            bjorck: BjorckConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(bits) = self.strategy.bits() {
            QuantSpec::new(bits)?;
        } else if self.identity_offset {
            return Err(Error::invalid("identity offset needs a quantizing strategy"));
        }
        if let Strategy::StePen { lambda, .. } = self.strategy {
            if !(lambda >= 0.0) {
                return Err(Error::invalid(format!("penalty weight must be ≥ 0, got {lambda}")));
            }
        }
        self.bjorck.validate()
    }

    fn quantized(&self, bits: u32, with_bjorck: bool) -> Result<WeightTransform> {
        let spec = QuantSpec::new(bits)?;
        let mut recurrent = Vec::new();
        if with_bjorck {
            recurrent.push(RecurrentStage::Bjorck(self.bjorck));
        }
        recurrent.push(if self.identity_offset {
            RecurrentStage::IdentityOffsetQuantize(spec)
        } else {
            RecurrentStage::Quantize(spec)
        });
        Ok(WeightTransform {
            recurrent,
            input: vec![InputStage::Quantize(spec)],
        })
    }

    /// Transform used while training.
    pub fn train_transform(&self) -> Result<WeightTransform> {
        match self.strategy {
            Strategy::FullPrecision { ortho: OrthoMethod::Bjorck } => Ok(WeightTransform {
                recurrent: vec![RecurrentStage::Bjorck(self.bjorck)],
                input: vec![],
            }),
            Strategy::FullPrecision { .. } | Strategy::Ptq { .. } => Ok(WeightTransform::identity()),
            Strategy::SteProjunn { bits } | Strategy::StePen { bits, .. } => self.quantized(bits, false),
            Strategy::SteBjorck { bits } => self.quantized(bits, true),
        }
    }

    /// Transform of the deployed model.
    pub fn eval_transform(&self) -> Result<WeightTransform> {
        match self.strategy {
            Strategy::Ptq { bits } => self.quantized(bits, false),
            _ => self.train_transform(),
        }
    }
}

/// Loss before the optimizer step, and the penalty term when present.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub penalty: f64,
}

/// Task gradient (plus `λ ∇R(q_k(W))` for STE-pen) at the current point.
pub fn strategy_gradients(
    params: &RnnParams,
    batch: &TaskBatch,
    model: &RnnConfig,
    strategy: &StrategyConfig,
) -> Result<(StepStats, RnnParams)> {
    let transform = strategy.train_transform()?;
    let trace = forward(params, &transform, model, &batch.inputs)?;
    let (loss, g_out) = loss_and_grad(&trace.outputs, &batch.targets, &batch.mask, model.loss)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let mut grads = backward(params, model, &trace, &batch.inputs, &g_out)?;
    let mut penalty = 0.0;
    if let Strategy::StePen { lambda, .. } = strategy.strategy {
        // R is evaluated at the quantized weight; STE passes its gradient to W.
        let (r, g) = ortho_penalty(&trace.weights.w)?;
        penalty = lambda * r;
        grads.w.axpy(lambda, &g)?;
    }
    Ok((StepStats { loss, penalty }, grads))
}

/// One optimizer step of any strategy. projUNN-based strategies project W
/// back onto the orthogonal group afterwards.
pub fn train_step(
    params: &mut RnnParams,
    batch: &TaskBatch,
    model: &RnnConfig,
    strategy: &StrategyConfig,
    opt: &mut Optimizer,
) -> Result<StepStats> {
    let (stats, grads) = strategy_gradients(params, batch, model, strategy)?;
    opt.apply(params, &grads);
    if strategy.strategy.projects() {
        params.w = projunn_project(&params.w)?;
    }
    Ok(stats)
}

pub fn step_ste_projunn(
    params: &mut RnnParams,
    batch: &TaskBatch,
    model: &RnnConfig,
    bits: u32,
    opt: &mut Optimizer,
) -> Result<StepStats> {
    train_step(params, batch, model, &StrategyConfig::new(Strategy::SteProjunn { bits }), opt)
}

pub fn step_ste_bjorck(
    params: &mut RnnParams,
    batch: &TaskBatch,
    model: &RnnConfig,
    bits: u32,
    opt: &mut Optimizer,
) -> Result<StepStats> {
    train_step(params, batch, model, &StrategyConfig::new(Strategy::SteBjorck { bits }), opt)
}

pub fn step_ste_pen(
    params: &mut RnnParams,
    batch: &TaskBatch,
    model: &RnnConfig,
    bits: u32,
    lambda: f64,
    opt: &mut Optimizer,
) -> Result<StepStats> {
    train_step(params, batch, model, &StrategyConfig::new(Strategy::StePen { bits, lambda }), opt)
}

/// `(q_k(W), q_k(U), V, b_o)`.
pub fn run_ptq(params: &RnnParams, bits: u32) -> Result<RnnParams> {
    let spec = QuantSpec::new(bits)?;
    let mut q = params.clone();
    q.w = quantize(&params.w, &spec);
    q.u = quantize(&params.u, &spec);
    Ok(q)
}

pub fn init_recurrent(kind: InitKind, n_h: usize, rng: &mut RngState) -> Result<Matrix> {
    if n_h == 0 {
        return Err(Error::invalid("n_h must be ≥ 1"));
    }
    match kind {
        InitKind::Identity => Ok(Matrix::identity(n_h)),
        InitKind::HaarOrthogonal => Ok(sample_uniform_orthogonal(n_h, rng)),
        InitKind::Henaff => {
            if n_h % 2 != 0 {
                return Err(Error::invalid(format!("Henaff initialization needs an even n_h, got {n_h}")));
            }
            let mut w = Matrix::zeros(n_h, n_h);
            for b in (0..n_h).step_by(2) {
                // (−π, π]
                let theta = PI - 2.0 * PI * rng.uniform();
                let (s, c) = theta.sin_cos();
                w[(b, b)] = c;
                w[(b, b + 1)] = -s;
                w[(b + 1, b)] = s;
                w[(b + 1, b + 1)] = c;
            }
            Ok(w)
        }
    }
}

/// Initial parameters: W from `init`, U uniform on `±1/√n_i`, V, b_o and
/// the modReLU bias zero.
pub fn init_params(
    n_i: usize,
    n_h: usize,
    n_o: usize,
    activation: Activation,
    init: InitKind,
    rng: &mut RngState,
) -> Result<RnnParams> {
    let mut p = RnnParams::zeros(n_i, n_h, n_o, activation);
    p.w = init_recurrent(init, n_h, rng)?;
    let bound = 1.0 / (n_i as f64).sqrt();
    p.u = Matrix::from_fn(n_h, n_i, |_, _| rng.uniform_range(-bound, bound));
    Ok(p)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    /// Accuracy for cross-entropy tasks, otherwise the loss itself.
    pub metric: f64,
}

/// Loss and metric over a whole dataset, weighted by loss-bearing positions.
pub fn evaluate<D: Dataset + ?Sized>(
    params: &RnnParams,
    transform: &WeightTransform,
    model: &RnnConfig,
    data: &D,
    batch_size: usize,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let weights = transform.apply(params)?;
    let (mut loss_sum, mut metric_sum, mut count) = (0.0, 0.0, 0usize);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk)?;
        let trace = crate::rnn::forward_with(params, weights.clone(), model, &batch.inputs)?;
        let n = batch.mask.iter().flatten().filter(|&&m| m).count();
        let (l, _) = loss_and_grad(&trace.outputs, &batch.targets, &batch.mask, model.loss)?;
        loss_sum += l * n as f64;
        if model.loss == LossKind::CrossEntropy {
            metric_sum += accuracy(&trace.outputs, &batch.targets, &batch.mask)? * n as f64;
        }
        count += n;
    }
    let loss = loss_sum / count as f64;
    let metric = if model.loss == LossKind::CrossEntropy {
        metric_sum / count as f64
    } else {
        loss
    };
    Ok(Evaluation { loss, metric })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
    pub seed: u64,
    /// Stop an epoch after this many steps (desk-scale runs).
    pub max_steps_per_epoch: Option<usize>,
    pub eval_batch_size: usize,
    /// When false, `wall_seconds` is written as 0 so reruns are byte-identical.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 128,
            optimizer: OptimizerConfig::adam(1e-3),
            schedule: Schedule::Constant,
            seed: 0,
            max_steps_per_epoch: None,
            eval_batch_size: 500,
            record_wall_time: true,
        }
    }
}

/// One row of the per-epoch metrics file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_metric: f64,
    /// `‖W̃W̃ᵀ − I‖_F` of the deployed recurrent weight.
    pub ortho_residual: f64,
    pub sv_ratio: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,eval_loss,eval_metric,ortho_residual,sv_ratio,lr,wall_seconds";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        use crate::numerics::format_g17 as g;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            g(self.train_loss),
            g(self.eval_loss),
            g(self.eval_metric),
            g(self.ortho_residual),
            g(self.sv_ratio),
            g(self.lr),
            g(self.wall_seconds)
        )
    }
}

/// Observer of a training run. Returning an error aborts it.
pub trait TrainHooks {
    fn on_step(&mut self, _step: u64, _stats: &StepStats, _params: &RnnParams) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _metrics: &EpochMetrics, _params: &RnnParams) -> Result<()> {
        Ok(())
    }
}

impl TrainHooks for () {}

/// Orthogonality residual and `σ_min/σ_max` of the deployed `W̃`.
pub fn recurrent_diagnostics(params: &RnnParams, transform: &WeightTransform) -> Result<(f64, f64)> {
    let w = transform.apply(params)?.w;
    let s = singular_values(&w)?;
    let ratio = match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if hi > 0.0 => lo / hi,
        _ => 0.0,
    };
    Ok((gram_residual(&w)?, ratio))
}

/// Runs `cfg.epochs` epochs of shuffled mini-batch training and evaluates
/// the deployed model after each.
pub fn train<D: Dataset + ?Sized, E: Dataset + ?Sized>(
    params: &mut RnnParams,
    model: &RnnConfig,
    strategy: &StrategyConfig,
    cfg: &TrainConfig,
    train_data: &D,
    eval_data: &E,
    hooks: &mut dyn TrainHooks,
) -> Result<Vec<EpochMetrics>> {
    strategy.validate()?;
    if cfg.batch_size == 0 || train_data.is_empty() {
        return Err(Error::invalid("training needs a positive batch size and data"));
    }
    if strategy.strategy.projects() {
        let r = gram_residual(&params.w)?;
        if r > 1e-6 {
            return Err(Error::invalid(format!(
                "projected training needs an orthogonal initial W (residual {r:e})"
            )));
        }
    }
    let mut opt = Optimizer::new(cfg.optimizer, params)?;
    let eval_transform = strategy.eval_transform()?;
    let root = RngState::new(cfg.seed);
    let start = Instant::now();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lr = cfg.schedule.lr_at(cfg.optimizer.lr, epoch);
        opt.set_lr(lr);
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        root.fork(epoch as u64).shuffle(&mut order);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps_per_epoch.is_some_and(|m| losses.len() >= m) {
                break;
            }
            let batch = train_data.batch(chunk)?;
            let stats = train_step(params, &batch, model, strategy, &mut opt)?;
            if !params.w.is_finite() {
                return Err(Error::Diverged { step: opt.steps() as usize });
            }
            hooks.on_step(opt.steps(), &stats, params)?;
            losses.push(stats.loss);
        }
        let eval = evaluate(params, &eval_transform, model, eval_data, cfg.eval_batch_size)?;
        let (ortho_residual, sv_ratio) = recurrent_diagnostics(params, &eval_transform)?;
        let metrics = EpochMetrics {
            epoch,
            train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            eval_loss: eval.loss,
            eval_metric: eval.metric,
            ortho_residual,
            sv_ratio,
            lr,
            wall_seconds: if cfg.record_wall_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        hooks.on_epoch(&metrics, params)?;
        history.push(metrics);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{matmul, max_abs};
    use crate::rnn::{loss_and_gradients, Mode, Targets};
    use crate::tasks::{gen_adding_task, gen_copy_task, CopyTask};

    fn model(activation: Activation, mode: Mode, loss: LossKind) -> RnnConfig {
        RnnConfig { activation, mode, loss }
    }

    fn copy_setup(seed: u64) -> (RnnParams, TaskBatch, RnnConfig) {
        let mut rng = RngState::new(seed);
        let mut p = init_params(10, 4, 9, Activation::Relu, InitKind::HaarOrthogonal, &mut rng).unwrap();
        p.v = Matrix::from_fn(9, 4, |_, _| 0.3 * rng.normal());
        let batch = gen_copy_task(2, 8, &mut rng);
        (p, batch, model(Activation::Relu, Mode::ManyToMany, LossKind::CrossEntropy))
    }

    #[test]
    fn zero_gradients_give_zero_deltas() {
        let (p, _, _) = copy_setup(0);
        for cfg in [OptimizerConfig::adam(1e-3), OptimizerConfig::rmsprop(1e-3, 32.0)] {
            let mut opt = Optimizer::new(cfg, &p).unwrap();
            let d = opt.deltas(&zeros_like(&p));
            assert!(slices(&d).iter().all(|s| s.iter().all(|&x| x == 0.0)));
        }
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut p = RnnParams::zeros(1, 1, 1, Activation::Relu);
        let mut g = zeros_like(&p);
        g.w[(0, 0)] = 0.3;
        g.u[(0, 0)] = -2e-3;
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.01), &p).unwrap();
        let d = opt.deltas(&g);
        // m̂ = g and v̂ = g² after one step.
        assert!((d.w[(0, 0)] - (-0.01 * 0.3 / (0.3 + 1e-8))).abs() < 1e-17);
        assert!((d.u[(0, 0)] - (0.01 * 2e-3 / (2e-3 + 1e-8))).abs() < 1e-17);
        opt.apply(&mut p, &g);
        assert!(p.w[(0, 0)] < 0.0);
    }

    #[test]
    fn rmsprop_first_step_closed_form() {
        let p = RnnParams::zeros(1, 1, 1, Activation::Relu);
        let mut g = zeros_like(&p);
        g.v[(0, 0)] = 0.5;
        let mut opt = Optimizer::new(OptimizerConfig::rmsprop(1e-3, 1.0), &p).unwrap();
        let d = opt.deltas(&g);
        let want = -1e-3 * 0.5 / ((0.01f64 * 0.25).sqrt() + 1e-8);
        assert!((d.v[(0, 0)] - want).abs() < 1e-15);
    }

    #[test]
    fn divider_scales_only_recurrent_delta() {
        let (p, batch, m) = copy_setup(1);
        let (_, g) = strategy_gradients(&p, &batch, &m, &StrategyConfig::new(Strategy::SteProjunn { bits: 6 })).unwrap();
        let mut plain = Optimizer::new(OptimizerConfig::rmsprop(7e-4, 1.0), &p).unwrap();
        let mut divided = Optimizer::new(OptimizerConfig::rmsprop(7e-4, 32.0), &p).unwrap();
        let a = plain.deltas(&g);
        let b = divided.deltas(&g);
        assert_eq!(a.w.scale(1.0 / 32.0).as_slice(), b.w.as_slice());
        for (x, y) in a.w.as_slice().iter().zip(b.w.as_slice()) {
            assert_eq!(x / 32.0, *y);
        }
        assert_eq!(a.u, b.u);
        assert_eq!(a.v, b.v);
    }

    #[test]
    fn gradient_clipping() {
        let p = RnnParams::zeros(1, 1, 1, Activation::Relu);
        let mut g = zeros_like(&p);
        g.w[(0, 0)] = 3.0;
        g.b_o[0] = 4.0;
        let cfg = OptimizerConfig {
            clip_norm: Some(1.0),
            ..OptimizerConfig::rmsprop(1.0, 1.0)
        };
        let mut opt = Optimizer::new(cfg, &p).unwrap();
        let d = opt.deltas(&g);
        // Clipped gradient 0.6, v = 0.01·0.36.
        assert!((d.w[(0, 0)] + 0.6 / (0.0036f64.sqrt() + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn schedules() {
        let s = Schedule::Step { gamma: 0.2, every: 60 };
        assert_eq!(s.lr_at(1e-3, 1), 1e-3);
        assert_eq!(s.lr_at(1e-3, 60), 1e-3);
        assert!((s.lr_at(1e-3, 61) - 2e-4).abs() < 1e-18);
        let e = Schedule::Step { gamma: 0.9, every: 1 };
        assert!((e.lr_at(1.0, 3) - 0.81).abs() < 1e-15);
        assert_eq!(Schedule::Constant.lr_at(0.5, 100), 0.5);
    }

    #[test]
    fn projunn_step_with_zero_gradient_keeps_w() {
        let mut rng = RngState::new(2);
        let mut p = init_params(2, 6, 1, Activation::Relu, InitKind::HaarOrthogonal, &mut rng).unwrap();
        // V = 0 and b_o equal to the target make every gradient vanish.
        let batch = gen_adding_task(4, 3, &mut rng).unwrap();
        let Targets::Values(t) = &batch.targets else { panic!() };
        let t = t[0].clone();
        for r in 0..3 {
            let mut b = batch.clone();
            b.targets = Targets::Values(vec![Matrix::from_fn(3, 1, |_, _| t[(r, 0)])]);
            p.b_o = vec![t[(r, 0)]];
            let before = p.w.clone();
            let m = model(Activation::Relu, Mode::ManyToOne, LossKind::Mse);
            let mut opt = Optimizer::new(OptimizerConfig::rmsprop(1e-3, 32.0), &p).unwrap();
            step_ste_projunn(&mut p, &b, &m, 6, &mut opt).unwrap();
            assert!(p.w.sub(&before).unwrap().max_abs() <= 1e-10);
        }
    }

    #[test]
    fn projunn_step_matches_hand_composition() {
        let (p0, batch, m) = copy_setup(3);
        let mut p = p0.clone();
        let cfg = OptimizerConfig::rmsprop(7e-4, 32.0);
        let mut opt = Optimizer::new(cfg, &p).unwrap();
        step_ste_projunn(&mut p, &batch, &m, 5, &mut opt).unwrap();
        assert!(gram_residual(&p.w).unwrap() <= 1e-8);

        // STE gradient = gradient of the identity graph at quantized weights.
        let spec = QuantSpec::new(5).unwrap();
        let mut pq = p0.clone();
        pq.w = quantize(&p0.w, &spec);
        pq.u = quantize(&p0.u, &spec);
        let (_, g, _) =
            loss_and_gradients(&pq, &WeightTransform::identity(), &m, &batch.inputs, &batch.targets, &batch.mask)
                .unwrap();
        let mut hand = p0.clone();
        let mut opt = Optimizer::new(cfg, &hand).unwrap();
        opt.apply(&mut hand, &g);
        let polar = crate::numerics::svd(&hand.w).unwrap().polar_factor();
        assert!(polar.sub(&p.w).unwrap().max_abs() <= 1e-12);
        assert_eq!(hand.u, p.u);
        assert_eq!(hand.v, p.v);
    }

    #[test]
    fn bjorck_effective_weight_is_bounded() {
        let (mut p, batch, m) = copy_setup(4);
        let mut rng = RngState::new(5);
        p.w = Matrix::from_fn(4, 4, |_, _| rng.normal());
        let s = StrategyConfig::new(Strategy::SteBjorck { bits: 4 });
        let mut opt = Optimizer::new(OptimizerConfig::adam(1e-2), &p).unwrap();
        for _ in 0..5 {
            let pre = crate::ortho::bjorck(&p.w, &BjorckConfig { tolerance: 1e-3, ..Default::default() }).unwrap();
            assert!(max_abs(&pre) <= 1.0 + 1e-9);
            train_step(&mut p, &batch, &m, &s, &mut opt).unwrap();
        }
    }

    #[test]
    fn bjorck_composite_gradient_matches_finite_differences() {
        let (mut p, batch, m) = copy_setup(6);
        let mut rng = RngState::new(7);
        p.w = p.w.add(&Matrix::from_fn(4, 4, |_, _| 0.2 * rng.normal())).unwrap();
        let s = StrategyConfig::new(Strategy::SteBjorck { bits: 16 });
        let (_, g) = strategy_gradients(&p, &batch, &m, &s).unwrap();
        let fp = WeightTransform {
            recurrent: vec![RecurrentStage::Bjorck(BjorckConfig::default())],
            input: vec![],
        };
        let tau = 1e-5;
        for i in 0..4 {
            for j in 0..4 {
                let f = |d: f64| {
                    let mut q = p.clone();
                    q.w[(i, j)] += d;
                    let tr = forward(&q, &fp, &m, &batch.inputs).unwrap();
                    crate::rnn::loss(&tr.outputs, &batch.targets, &batch.mask, m.loss).unwrap()
                };
                let fd = (f(tau) - f(-tau)) / (2.0 * tau);
                assert!((fd - g.w[(i, j)]).abs() <= 1e-3 * fd.abs().max(1e-2), "({i},{j}) {fd} {}", g.w[(i, j)]);
            }
        }
    }

    #[test]
    fn zero_penalty_matches_plain_ste() {
        let (p0, batch, m) = copy_setup(8);
        let mut a = p0.clone();
        let mut oa = Optimizer::new(OptimizerConfig::adam(1e-3), &a).unwrap();
        let stats = step_ste_pen(&mut a, &batch, &m, 5, 0.0, &mut oa).unwrap();
        assert_eq!(stats.penalty, 0.0);
        let mut b = p0.clone();
        let (_, g, _) = loss_and_gradients(
            &b,
            &WeightTransform::quantized(5).unwrap(),
            &m,
            &batch.inputs,
            &batch.targets,
            &batch.mask,
        )
        .unwrap();
        let mut ob = Optimizer::new(OptimizerConfig::adam(1e-3), &b).unwrap();
        ob.apply(&mut b, &g);
        assert_eq!(a, b);
    }

    #[test]
    fn penalty_gradient_composes() {
        let (mut p, batch, m) = copy_setup(9);
        let mut rng = RngState::new(10);
        p.w = Matrix::from_fn(4, 4, |_, _| 0.5 * rng.normal());
        let lambda = 0.1;
        let (stats, g) = strategy_gradients(&p, &batch, &m, &StrategyConfig::new(Strategy::StePen { bits: 6, lambda })).unwrap();
        let (_, g0) = strategy_gradients(&p, &batch, &m, &StrategyConfig::new(Strategy::StePen { bits: 6, lambda: 0.0 })).unwrap();
        let wq = quantize(&p.w, &QuantSpec::new(6).unwrap());
        let (r, gr) = ortho_penalty(&wq).unwrap();
        let mut want = g0.w.clone();
        want.axpy(lambda, &gr).unwrap();
        assert_eq!(g.w, want);
        assert_eq!(g.u, g0.u);
        assert_eq!(stats.penalty, lambda * r);
    }

    #[test]
    fn grid_aligned_orthogonal_has_no_penalty_gradient() {
        let (mut p, batch, m) = copy_setup(11);
        p.w = Matrix::identity(4).scale(-1.0);
        let (_, g) = strategy_gradients(&p, &batch, &m, &StrategyConfig::new(Strategy::StePen { bits: 4, lambda: 0.1 })).unwrap();
        let (_, g0) =
            strategy_gradients(&p, &batch, &m, &StrategyConfig::new(Strategy::StePen { bits: 4, lambda: 0.0 })).unwrap();
        assert_eq!(g.w, g0.w);
    }

    #[test]
    fn ptq_high_precision_and_idempotence() {
        let (p, _, m) = copy_setup(12);
        let data = CopyTask::new(2, 64, 13);
        let fp = evaluate(&p, &WeightTransform::identity(), &m, &data, 32).unwrap();
        let q16 = run_ptq(&p, 16).unwrap();
        let qe = evaluate(&q16, &WeightTransform::identity(), &m, &data, 32).unwrap();
        assert!((qe.loss - fp.loss).abs() <= 0.01 * fp.loss);

        let q4 = run_ptq(&p, 4).unwrap();
        let fixed_w = QuantSpec::with_fixed_scale(4, p.w.max_abs()).unwrap();
        let fixed_u = QuantSpec::with_fixed_scale(4, p.u.max_abs()).unwrap();
        assert_eq!(quantize(&q4.w, &fixed_w), q4.w);
        assert_eq!(quantize(&q4.u, &fixed_u), q4.u);
        assert_eq!(q4.v, p.v);
    }

    #[test]
    fn initializers() {
        let mut rng = RngState::new(14);
        assert_eq!(init_recurrent(InitKind::Identity, 5, &mut rng).unwrap(), Matrix::identity(5));
        let h = init_recurrent(InitKind::Henaff, 8, &mut rng).unwrap();
        assert!(gram_residual(&h).unwrap() <= 1e-12);
        assert_eq!(h[(0, 2)], 0.0);
        assert!(init_recurrent(InitKind::Henaff, 7, &mut rng).is_err());
        let q = init_recurrent(InitKind::HaarOrthogonal, 16, &mut rng).unwrap();
        for s in singular_values(&q).unwrap() {
            assert!((s - 1.0).abs() <= 1e-10);
        }
        let p = init_params(9, 4, 3, Activation::ModRelu, InitKind::Identity, &mut rng).unwrap();
        assert!(p.u.max_abs() <= 1.0 / 3.0);
        assert_eq!(p.modrelu_bias, Some(vec![0.0; 4]));
    }

    #[test]
    fn strategy_validation() {
        let mut s = StrategyConfig::new(Strategy::StePen { bits: 4, lambda: -1.0 });
        assert!(s.validate().is_err());
        s.strategy = Strategy::SteBjorck { bits: 1 };
        assert!(s.validate().is_err());
        let s = StrategyConfig {
            identity_offset: true,
            ..StrategyConfig::new(Strategy::FullPrecision { ortho: OrthoMethod::None })
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn identity_offset_transform() {
        let s = StrategyConfig {
            identity_offset: true,
            ..StrategyConfig::new(Strategy::SteBjorck { bits: 4 })
        };
        let t = s.train_transform().unwrap();
        assert!(matches!(t.recurrent[1], RecurrentStage::IdentityOffsetQuantize(_)));
    }

    fn short_run(seed: u64) -> (RnnParams, Vec<EpochMetrics>) {
        let m = model(Activation::Relu, Mode::ManyToMany, LossKind::CrossEntropy);
        let mut p = init_params(10, 8, 9, Activation::Relu, InitKind::HaarOrthogonal, &mut RngState::new(seed)).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            seed,
            record_wall_time: false,
            ..Default::default()
        };
        let hist = train(
            &mut p,
            &m,
            &StrategyConfig::new(Strategy::SteBjorck { bits: 6 }),
            &cfg,
            &CopyTask::new(3, 64, seed),
            &CopyTask::new(3, 32, seed + 1),
            &mut (),
        )
        .unwrap();
        (p, hist)
    }

    #[test]
    fn training_is_reproducible() {
        let (pa, ha) = short_run(15);
        let (pb, hb) = short_run(15);
        assert_eq!(pa, pb);
        assert_eq!(ha, hb);
        assert_eq!(ha.len(), 2);
        assert_eq!(ha[1].wall_seconds, 0.0);
        assert_eq!(ha[0].csv_row().split(',').count(), METRICS_HEADER.split(',').count());
    }

    struct ResidualProbe(f64);

    impl TrainHooks for ResidualProbe {
        fn on_step(&mut self, _: u64, _: &StepStats, params: &RnnParams) -> Result<()> {
            self.0 = self.0.max(gram_residual(&params.w)?);
            Ok(())
        }
    }

    #[test]
    fn projected_training_stays_on_manifold() {
        let m = model(Activation::ModRelu, Mode::ManyToMany, LossKind::CrossEntropy);
        let mut p = init_params(10, 8, 9, Activation::ModRelu, InitKind::Henaff, &mut RngState::new(16)).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            optimizer: OptimizerConfig::rmsprop(7e-3, 32.0),
            ..Default::default()
        };
        let mut probe = ResidualProbe(0.0);
        train(
            &mut p,
            &m,
            &StrategyConfig::new(Strategy::SteProjunn { bits: 4 }),
            &cfg,
            &CopyTask::new(3, 64, 1),
            &CopyTask::new(3, 16, 2),
            &mut probe,
        )
        .unwrap();
        assert!(probe.0 <= 1e-8);
    }

    #[test]
    fn both_maps_reach_the_same_objective() {
        // Teacher with orthogonal W; both students fit it over the same group.
        let m = model(Activation::Relu, Mode::ManyToOne, LossKind::Mse);
        let mut rng = RngState::new(17);
        let mut teacher = init_params(1, 2, 1, Activation::Relu, InitKind::HaarOrthogonal, &mut rng).unwrap();
        teacher.v = Matrix::from_rows(&[[1.0, -0.5]]);
        let x: Vec<Matrix> = (0..2).map(|_| Matrix::from_fn(16, 1, |_, _| rng.uniform())).collect();
        let y = forward(&teacher, &WeightTransform::identity(), &m, &x).unwrap().outputs[0].clone();
        let batch = TaskBatch {
            inputs: x,
            targets: Targets::Values(vec![y]),
            mask: vec![vec![true; 16]],
        };
        let start = init_params(1, 2, 1, Activation::Relu, InitKind::HaarOrthogonal, &mut rng).unwrap();
        let mut finals = Vec::new();
        for ortho in [OrthoMethod::Projunn, OrthoMethod::Bjorck] {
            let s = StrategyConfig::new(Strategy::FullPrecision { ortho });
            let mut p = start.clone();
            let mut opt = Optimizer::new(OptimizerConfig::adam(1e-2), &p).unwrap();
            let mut last = 0.0;
            for _ in 0..3000 {
                last = train_step(&mut p, &batch, &m, &s, &mut opt).unwrap().loss;
            }
            finals.push(last);
        }
        assert!((finals[0] - finals[1]).abs() <= 1e-3, "{finals:?}");
    }

    #[test]
    fn evaluation_weights_positions() {
        let (p, _, m) = copy_setup(18);
        let data = CopyTask::new(2, 10, 19);
        let all = evaluate(&p, &WeightTransform::identity(), &m, &data, 10).unwrap();
        let split = evaluate(&p, &WeightTransform::identity(), &m, &data, 3).unwrap();
        assert!((all.loss - split.loss).abs() < 1e-12);
        assert!((all.metric - split.metric).abs() < 1e-12);
        let w = matmul(&p.w, &p.w.transpose()).unwrap();
        assert!(w.sub(&Matrix::identity(4)).unwrap().max_abs() < 1e-10);
    }
}
