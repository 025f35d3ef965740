//! `train` and `eval`.
//!
//! A run directory holds `config.toml` (resolved config), `metrics.csv`
//! (one row per epoch), `steps.csv` (one row per optimizer step),
//! `checkpoint.bin` and `report.json`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use qornn::numerics::{gram_residual, RngState};
use qornn::rnn::{Checkpoint, InputStage, RecurrentStage, RnnParams, WeightTransform};
use qornn::quantize::QuantSpec;
use qornn::tasks::naive_baseline;
use qornn::train::{evaluate, init_params, train, EpochMetrics, StepStats, TrainHooks, METRICS_HEADER};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{load_task, TaskData};
use crate::error::{CliError, CliResult};
use crate::size::{model_size, ModelSize};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const STEPS_FILE: &str = "steps.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const REPORT_FILE: &str = "report.json";
pub const EVAL_FILE: &str = "eval.json";

/// `step,epoch,loss,penalty,ortho_residual`, where the residual is
/// `‖WWᵀ − I‖_F` of the latent `W` after the step.
pub const STEPS_HEADER: &str = "step,epoch,loss,penalty,ortho_residual";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub run_id: String,
    pub task: String,
    pub strategy: String,
    pub bits: Option<u32>,
    pub n_i: usize,
    pub n_h: usize,
    pub n_o: usize,
    pub epochs: usize,
    pub steps: u64,
    pub eval_loss: f64,
    /// Accuracy for classification, the loss otherwise.
    pub eval_metric: f64,
    pub baseline: Option<f64>,
    pub beats_baseline: Option<bool>,
    pub max_step_residual: Option<f64>,
    pub model_size: ModelSize,
}

pub struct RunOutput {
    pub dir: PathBuf,
    pub history: Vec<EpochMetrics>,
    pub report: TrainReport,
    pub params: RnnParams,
}

struct RunLog {
    metrics: BufWriter<File>,
    steps: BufWriter<File>,
    epoch: usize,
    step: u64,
    max_residual: f64,
}

impl TrainHooks for RunLog {
    fn on_step(&mut self, step: u64, stats: &StepStats, params: &RnnParams) -> qornn::Result<()> {
        let residual = gram_residual(&params.w)?;
        self.step = step;
        self.max_residual = self.max_residual.max(residual);
        writeln!(
            self.steps,
            "{step},{},{},{},{}",
            self.epoch + 1,
            qornn::numerics::format_g17(stats.loss),
            qornn::numerics::format_g17(stats.penalty),
            qornn::numerics::format_g17(residual)
        )?;
        Ok(())
    }

    fn on_epoch(&mut self, m: &EpochMetrics, _params: &RnnParams) -> qornn::Result<()> {
        self.epoch = m.epoch;
        writeln!(self.metrics, "{}", m.csv_row())?;
        self.metrics.flush()?;
        self.steps.flush()?;
        Ok(())
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

/// Trains the configured model in `<outdir>/<run_id>`.
pub fn cmd_train(cfg: &ExperimentConfig, outdir: &Path, run_id: Option<&str>) -> CliResult<RunOutput> {
    let data = load_task(cfg)?;
    train_with_data(cfg, &data, outdir, run_id)
}

pub fn train_with_data(
    cfg: &ExperimentConfig,
    data: &TaskData,
    outdir: &Path,
    run_id: Option<&str>,
) -> CliResult<RunOutput> {
    let run_id = run_id.map_or_else(|| cfg.default_run_id(), str::to_owned);
    let dir = outdir.join(&run_id);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;

    let strategy = cfg.strategy()?;
    let model = cfg.rnn_config();
    let tc = cfg.train_config();
    let (n_i, n_o) = (data.train.n_i(), data.train.n_o());
    let mut rng = RngState::new(cfg.train.seed);
    let mut params = init_params(n_i, cfg.model.n_h, n_o, model.activation, cfg.model.init, &mut rng)?;

    let mut log = RunLog {
        metrics: create(&dir.join(METRICS_FILE))?,
        steps: create(&dir.join(STEPS_FILE))?,
        epoch: 0,
        step: 0,
        max_residual: 0.0,
    };
    writeln!(log.metrics, "{METRICS_HEADER}")?;
    writeln!(log.steps, "{STEPS_HEADER}")?;
    let history = match train(&mut params, &model, &strategy, &tc, data.train.as_ref(), data.eval.as_ref(), &mut log) {
        Ok(h) => h,
        Err(e @ qornn::Error::Diverged { .. }) => {
            log.steps.flush()?;
            return Err(CliError::Diverged {
                epoch: log.epoch + 1,
                step: log.step + 1,
                source: e,
            });
        }
        Err(e) => return Err(e.into()),
    };
    log.metrics.flush()?;
    log.steps.flush()?;

    let transform = strategy.eval_transform()?;
    let eval = evaluate(&params, &transform, &model, data.eval.as_ref(), tc.eval_batch_size)?;
    let checkpoint = Checkpoint::new(params.clone(), model, transform, cfg.train.seed)?;
    let mut out = create(&dir.join(CHECKPOINT_FILE))?;
    checkpoint.write(&mut out)?;
    out.flush()?;

    let baseline = naive_baseline(cfg.task_kind()).ok();
    let report = TrainReport {
        run_id,
        task: cfg.task_label(),
        strategy: cfg.strategy_label(),
        bits: strategy.strategy.bits(),
        n_i,
        n_h: cfg.model.n_h,
        n_o,
        epochs: history.len(),
        steps: log.step,
        eval_loss: eval.loss,
        eval_metric: eval.metric,
        baseline,
        beats_baseline: baseline.map(|b| eval.loss < b),
        max_step_residual: (log.step > 0).then_some(log.max_residual),
        model_size: model_size(n_i, cfg.model.n_h, n_o, strategy.strategy.bits()),
    };
    write_json(&dir.join(REPORT_FILE), &report)?;
    Ok(RunOutput {
        dir,
        history,
        report,
        params,
    })
}

/// Loads `config.toml` and `checkpoint.bin` from a run directory.
pub fn load_run(dir: &Path) -> CliResult<(ExperimentConfig, Checkpoint)> {
    let cfg_path = dir.join(CONFIG_FILE);
    if !cfg_path.exists() {
        return Err(CliError::MissingData(format!("{} not found", cfg_path.display())));
    }
    let cfg = ExperimentConfig::load(&cfg_path)?;
    let ck_path = dir.join(CHECKPOINT_FILE);
    let file = File::open(&ck_path).map_err(|e| CliError::MissingData(format!("{}: {e}", ck_path.display())))?;
    let ck = Checkpoint::read(std::io::BufReader::new(file))?;
    Ok((cfg, ck))
}

/// Post-training quantization of whatever `transform` deploys: existing
/// quantizers are dropped and `bits`-bit quantizers appended.
pub fn ptq_transform(transform: &WeightTransform, bits: u32) -> CliResult<WeightTransform> {
    let spec = QuantSpec::new(bits)?;
    let mut recurrent: Vec<RecurrentStage> = transform
        .recurrent
        .iter()
        .filter(|s| matches!(s, RecurrentStage::Bjorck(_)))
        .cloned()
        .collect();
    recurrent.push(RecurrentStage::Quantize(spec));
    Ok(WeightTransform {
        recurrent,
        input: vec![InputStage::Quantize(spec)],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub ptq_bits: Option<u32>,
    pub eval_loss: f64,
    pub eval_metric: f64,
    pub baseline: Option<f64>,
}

/// Evaluates a stored run on its test set, optionally after quantizing the
/// deployed weights to `ptq_bits`.
pub fn cmd_eval(dir: &Path, ptq_bits: Option<u32>) -> CliResult<EvalReport> {
    let (cfg, ck) = load_run(dir)?;
    let data = load_task(&cfg)?;
    eval_checkpoint(&cfg, &ck, &data, ptq_bits, dir)
}

pub fn eval_checkpoint(
    cfg: &ExperimentConfig,
    ck: &Checkpoint,
    data: &TaskData,
    ptq_bits: Option<u32>,
    dir: &Path,
) -> CliResult<EvalReport> {
    let transform = match ptq_bits {
        Some(k) => ptq_transform(&ck.header.transform, k)?,
        None => ck.header.transform.clone(),
    };
    let e = evaluate(&ck.params, &transform, &ck.header.config, data.eval.as_ref(), cfg.train.eval_batch_size)?;
    let report = EvalReport {
        run_id: dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        ptq_bits,
        eval_loss: e.loss,
        eval_metric: e.metric,
        baseline: naive_baseline(cfg.task_kind()).ok(),
    };
    let name = match ptq_bits {
        Some(k) => format!("eval_ptq_k{k}.json"),
        None => EVAL_FILE.to_owned(),
    };
    write_json(&dir.join(name), &report)?;
    Ok(report)
}
