//! `calibrate-fxp`: activation calibration, integer export and the
//! float-versus-integer comparison.
//!
//! Writes `<run>/fxp-ka<k_a>/fxp_model.bin` and `fxp_report.json`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use qornn::fxp::{
    calibrate_activations, complexity_report, input_scale, ActQuantCalib, ComplexityMode, ComplexityReport, FxpModel,
    FxpTrace, OverflowPolicy,
};
use qornn::rnn::{accuracy, loss, Activation, Checkpoint, LossKind};
use qornn::tasks::{Dataset, TaskKind};
use qornn::train::evaluate;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{load_task, Prefix, TaskData};
use crate::error::{CliError, CliResult};
use crate::run::{load_run, write_json};

pub const FXP_MODEL_FILE: &str = "fxp_model.bin";
pub const FXP_REPORT_FILE: &str = "fxp_report.json";

#[derive(Clone, Debug)]
pub struct CalibrateArgs {
    pub k_a: u32,
    /// Defaults to 2 for one-hot inputs and 9 otherwise.
    pub k_i: Option<u32>,
    pub overflow: OverflowPolicy,
    /// Use only this many sequences of each calibration set.
    pub calibration_samples: Option<usize>,
}

pub fn default_input_bits(task: TaskKind) -> u32 {
    match task {
        TaskKind::Copy { .. } | TaskKind::Ptb => 2,
        TaskKind::Adding { .. } | TaskKind::Mnist { .. } => 9,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub loss: f64,
    /// Accuracy for classification, the loss otherwise.
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FxpReport {
    pub calibration: ActQuantCalib,
    pub accumulator_bits: u32,
    pub accumulator_frac_bits: u32,
    pub overflow: OverflowPolicy,
    /// Quantized weights, floating-point activations.
    pub float: Score,
    /// Integer recurrence.
    pub fxp: Score,
    /// Floating-point recurrence with the same rounding as the integer one.
    pub simulated: Score,
    /// `fxp.metric − float.metric`
    pub metric_delta: f64,
    /// `|fxp.loss − float.loss| / float.loss`
    pub loss_relative_change: f64,
    pub bit_exact: bool,
    pub sequences_compared: usize,
    pub round_trip: bool,
    pub complexity: Vec<(ComplexityMode, ComplexityReport)>,
}

pub struct CalibrateOutput {
    pub dir: PathBuf,
    pub model: FxpModel,
    pub report: FxpReport,
}

fn score(traces: &[(FxpTrace, qornn::tasks::TaskBatch)], kind: LossKind) -> CliResult<Score> {
    let (mut l, mut m, mut n) = (0.0, 0.0, 0usize);
    for (trace, batch) in traces {
        let count = batch.mask.iter().flatten().filter(|&&b| b).count();
        l += loss(&trace.outputs, &batch.targets, &batch.mask, kind)? * count as f64;
        if kind == LossKind::CrossEntropy {
            m += accuracy(&trace.outputs, &batch.targets, &batch.mask)? * count as f64;
        }
        n += count;
    }
    let loss = l / n as f64;
    Ok(Score {
        loss,
        metric: if kind == LossKind::CrossEntropy { m / n as f64 } else { loss },
    })
}

fn same_bits(a: &FxpTrace, b: &FxpTrace) -> bool {
    a.codes == b.codes
        && a.outputs.len() == b.outputs.len()
        && a.outputs.iter().zip(&b.outputs).all(|(x, y)| {
            x.shape() == y.shape() && x.as_slice().iter().zip(y.as_slice()).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

pub fn cmd_calibrate_fxp(run_dir: &Path, args: &CalibrateArgs) -> CliResult<CalibrateOutput> {
    let (cfg, ck) = load_run(run_dir)?;
    let data = load_task(&cfg)?;
    calibrate_checkpoint(&cfg, &ck, &data, args, run_dir)
}

pub fn calibrate_checkpoint(
    cfg: &ExperimentConfig,
    ck: &Checkpoint,
    data: &TaskData,
    args: &CalibrateArgs,
    run_dir: &Path,
) -> CliResult<CalibrateOutput> {
    let model_cfg = ck.header.config;
    if model_cfg.activation != Activation::Relu {
        return Err(CliError::Config("fixed-point export needs a ReLU model".into()));
    }
    let task = cfg.task_kind();
    let k_i = args.k_i.unwrap_or_else(|| default_input_bits(task));
    let transform = &ck.header.transform;
    let batch_size = cfg.train.eval_batch_size;

    let prefixes: Vec<Prefix> = data
        .calibration
        .iter()
        .map(|d| Prefix::new(d.as_ref(), args.calibration_samples.unwrap_or(usize::MAX)))
        .collect();
    let refs: Vec<&dyn Dataset> = prefixes.iter().map(|p| p as &dyn Dataset).collect();
    let calib = calibrate_activations(&ck.params, transform, &model_cfg, args.k_a, k_i, input_scale(task), &refs, batch_size)?;
    let model = FxpModel::build(&ck.params, transform, &model_cfg, &calib, args.overflow)?;

    let float = evaluate(&ck.params, transform, &model_cfg, data.eval.as_ref(), batch_size)?;
    let mut fxp_runs = Vec::new();
    let mut sim_runs = Vec::new();
    let mut bit_exact = true;
    let indices: Vec<usize> = (0..data.eval.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let batch = data.eval.batch(chunk)?;
        let a = model.forward(&batch.inputs)?;
        let b = model.float_reference(&batch.inputs)?;
        bit_exact &= same_bits(&a, &b);
        fxp_runs.push((a, batch.clone()));
        sim_runs.push((b, batch));
    }
    let fxp = score(&fxp_runs, model_cfg.loss)?;
    let simulated = score(&sim_runs, model_cfg.loss)?;

    let dir = run_dir.join(format!("fxp-ka{}", args.k_a));
    fs::create_dir_all(&dir)?;
    let path = dir.join(FXP_MODEL_FILE);
    let mut out = BufWriter::new(File::create(&path)?);
    model.write(&mut out)?;
    out.flush()?;
    drop(out);
    let back = FxpModel::read(BufReader::new(File::open(&path)?))?;

    let n_i = data.eval.n_i();
    let one_hot = matches!(task, TaskKind::Copy { .. } | TaskKind::Ptb);
    let complexity = [ComplexityMode::FullPrecision, ComplexityMode::QuantizedWeights, ComplexityMode::FullyQuantized]
        .into_iter()
        .map(|m| (m, complexity_report(n_i, ck.header.n_h, calib.k, calib.k_a, k_i, m, one_hot)))
        .collect();
    let report = FxpReport {
        calibration: calib,
        accumulator_bits: model.accumulator().total_bits(),
        accumulator_frac_bits: model.accumulator().frac_bits(),
        overflow: args.overflow,
        float: Score {
            loss: float.loss,
            metric: float.metric,
        },
        fxp,
        simulated,
        metric_delta: fxp.metric - float.metric,
        loss_relative_change: (fxp.loss - float.loss).abs() / float.loss,
        bit_exact,
        sequences_compared: indices.len(),
        round_trip: back == model,
        complexity,
    };
    write_json(&dir.join(FXP_REPORT_FILE), &report)?;
    Ok(CalibrateOutput { dir, model, report })
}
