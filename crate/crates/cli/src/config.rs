//! Experiment configuration: a TOML file with `[task]`, `[model]` and
//! `[train]` tables. Unset keys take the per-task defaults; the resolved
//! config is what gets echoed into the run directory.

use std::path::{Path, PathBuf};

use qornn::ortho::BjorckConfig;
use qornn::rnn::{Activation, LossKind, Mode, RnnConfig};
use qornn::tasks::TaskKind;
use qornn::train::{
    InitKind, OptimizerConfig, OptimizerKind, OrthoMethod, Schedule, Strategy, StrategyConfig, TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Environment variable naming the dataset root (`mnist/`, `ptb/` below it).
pub const DATA_ENV: &str = "QORNN_DATA";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskName {
    Copy,
    Adding,
    Mnist,
    Pmnist,
    Ptb,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    FullPrecision,
    SteProjunn,
    SteBjorck,
    StePen,
    Ptq,
}

impl StrategyName {
    fn uses_projunn(self, ortho: OrthoMethod) -> bool {
        match self {
            StrategyName::SteProjunn | StrategyName::Ptq => true,
            StrategyName::FullPrecision => ortho == OrthoMethod::Projunn,
            StrategyName::SteBjorck | StrategyName::StePen => false,
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTask {
    name: Option<TaskName>,
    t0: Option<usize>,
    steps: Option<usize>,
    perm_seed: Option<u64>,
    seq_len: Option<usize>,
    data_dir: Option<PathBuf>,
    train_samples: Option<usize>,
    test_samples: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    n_h: Option<usize>,
    activation: Option<Activation>,
    init: Option<InitKind>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    strategy: Option<StrategyName>,
    bits: Option<u32>,
    ortho: Option<OrthoMethod>,
    lambda: Option<f64>,
    identity_offset: Option<bool>,
    bjorck_iterations: Option<usize>,
    optimizer: Option<OptimizerKind>,
    lr: Option<f64>,
    recurrent_lr_divider: Option<f64>,
    clip_norm: Option<f64>,
    lr_gamma: Option<f64>,
    lr_every: Option<usize>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    eval_batch_size: Option<usize>,
    max_steps_per_epoch: Option<usize>,
    seed: Option<u64>,
    record_wall_time: Option<bool>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    task: RawTask,
    #[serde(default)]
    model: RawModel,
    #[serde(default)]
    train: RawTrain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSection {
    pub name: TaskName,
    /// Copy task delay.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t0: Option<usize>,
    /// Adding task length.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perm_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seq_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    /// Generated samples for synthetic tasks, a prefix of the split otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_samples: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub n_h: usize,
    pub activation: Activation,
    pub init: InitKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub strategy: StrategyName,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bits: Option<u32>,
    pub ortho: OrthoMethod,
    pub lambda: f64,
    pub identity_offset: bool,
    pub bjorck_iterations: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub recurrent_lr_divider: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
    pub lr_gamma: f64,
    pub lr_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps_per_epoch: Option<usize>,
    pub seed: u64,
    pub record_wall_time: bool,
}

/// Fully resolved experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskSection,
    pub model: ModelSection,
    pub train: TrainSection,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        resolve(raw)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn task_kind(&self) -> TaskKind {
        match self.task.name {
            TaskName::Copy => TaskKind::Copy {
                t0: self.task.t0.expect("resolved"),
            },
            TaskName::Adding => TaskKind::Adding {
                steps: self.task.steps.expect("resolved"),
            },
            TaskName::Mnist => TaskKind::Mnist { permuted: false },
            TaskName::Pmnist => TaskKind::Mnist { permuted: true },
            TaskName::Ptb => TaskKind::Ptb,
        }
    }

    pub fn rnn_config(&self) -> RnnConfig {
        let (mode, loss) = match self.task.name {
            TaskName::Copy => (Mode::ManyToMany, LossKind::CrossEntropy),
            TaskName::Adding => (Mode::ManyToOne, LossKind::Mse),
            TaskName::Mnist | TaskName::Pmnist => (Mode::ManyToOne, LossKind::CrossEntropy),
            TaskName::Ptb => (Mode::ManyToMany, LossKind::Bpc),
        };
        RnnConfig {
            activation: self.model.activation,
            mode,
            loss,
        }
    }

    pub fn strategy(&self) -> Result<StrategyConfig, CliError> {
        let t = &self.train;
        let bits = || t.bits.ok_or_else(|| config_err(format!("strategy {:?} needs `bits`", t.strategy)));
        let strategy = match t.strategy {
            StrategyName::FullPrecision => Strategy::FullPrecision { ortho: t.ortho },
            StrategyName::SteProjunn => Strategy::SteProjunn { bits: bits()? },
            StrategyName::SteBjorck => Strategy::SteBjorck { bits: bits()? },
            StrategyName::StePen => Strategy::StePen {
                bits: bits()?,
                lambda: t.lambda,
            },
            StrategyName::Ptq => Strategy::Ptq { bits: bits()? },
        };
        let cfg = StrategyConfig {
            strategy,
            identity_offset: t.identity_offset,
            bjorck: BjorckConfig {
                iterations: t.bjorck_iterations,
                ..BjorckConfig::default()
            },
        };
        cfg.validate().map_err(|e| config_err(e.to_string()))?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            optimizer: OptimizerConfig {
                kind: t.optimizer,
                lr: t.lr,
                recurrent_lr_divider: t.recurrent_lr_divider,
                clip_norm: t.clip_norm,
            },
            schedule: if t.lr_gamma == 1.0 {
                Schedule::Constant
            } else {
                Schedule::Step {
                    gamma: t.lr_gamma,
                    every: t.lr_every,
                }
            },
            seed: t.seed,
            max_steps_per_epoch: t.max_steps_per_epoch,
            eval_batch_size: t.eval_batch_size,
            record_wall_time: t.record_wall_time,
        }
    }

    pub fn task_label(&self) -> String {
        serde_variant(&self.task.name)
    }

    pub fn strategy_label(&self) -> String {
        serde_variant(&self.train.strategy)
    }

    /// `<task>-<strategy>[-k<bits>]-s<seed>`
    pub fn default_run_id(&self) -> String {
        let task = self.task_label();
        let strategy = self.strategy_label();
        match self.train.bits {
            Some(k) if self.train.strategy != StrategyName::FullPrecision => {
                format!("{task}-{strategy}-k{k}-s{}", self.train.seed)
            }
            _ => format!("{task}-{strategy}-s{}", self.train.seed),
        }
    }

    /// Dataset directory for file-backed tasks.
    pub fn data_dir(&self, sub: &str) -> Result<PathBuf, CliError> {
        if let Some(d) = &self.task.data_dir {
            return Ok(d.clone());
        }
        match std::env::var_os(DATA_ENV) {
            Some(root) => Ok(PathBuf::from(root).join(sub)),
            None => Err(CliError::MissingData(format!(
                "set task.data_dir or {DATA_ENV} to locate the {sub} files"
            ))),
        }
    }
}

fn serde_variant<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => unreachable!("unit variants serialize as strings"),
    }
}

struct TaskDefaults {
    n_h: usize,
    epochs: usize,
    batch_size: usize,
    lr_gamma: f64,
    lr_every: usize,
}

fn task_defaults(task: TaskName) -> TaskDefaults {
    match task {
        TaskName::Copy => TaskDefaults {
            n_h: 256,
            epochs: 10,
            batch_size: 128,
            lr_gamma: 0.9,
            lr_every: 1,
        },
        TaskName::Adding => TaskDefaults {
            n_h: 170,
            epochs: 50,
            batch_size: 50,
            lr_gamma: 0.94,
            lr_every: 1,
        },
        TaskName::Mnist | TaskName::Pmnist => TaskDefaults {
            n_h: 170,
            epochs: 200,
            batch_size: 128,
            lr_gamma: 0.2,
            lr_every: 60,
        },
        TaskName::Ptb => TaskDefaults {
            n_h: 1024,
            epochs: 60,
            batch_size: 128,
            lr_gamma: 0.2,
            lr_every: 20,
        },
    }
}

fn resolve(raw: RawConfig) -> Result<ExperimentConfig, CliError> {
    let RawConfig { task, model, train } = raw;
    let name = task.name.ok_or_else(|| config_err("[task] needs a `name`"))?;
    let d = task_defaults(name);
    let strategy = train.strategy.unwrap_or(StrategyName::SteBjorck);
    let ortho = train.ortho.unwrap_or(OrthoMethod::Bjorck);
    let projunn = strategy.uses_projunn(ortho);
    let pen = strategy == StrategyName::StePen;

    let synthetic = matches!(name, TaskName::Copy | TaskName::Adding);
    let task = TaskSection {
        name,
        t0: (name == TaskName::Copy).then(|| task.t0.unwrap_or(1000)),
        steps: (name == TaskName::Adding).then(|| task.steps.unwrap_or(750)),
        perm_seed: (name == TaskName::Pmnist).then(|| task.perm_seed.unwrap_or(0)),
        seq_len: (name == TaskName::Ptb).then(|| task.seq_len.unwrap_or(qornn::tasks::PTB_SEQ_LEN)),
        data_dir: if synthetic { None } else { task.data_dir },
        train_samples: match name {
            TaskName::Copy => Some(task.train_samples.unwrap_or(512_000)),
            TaskName::Adding => Some(task.train_samples.unwrap_or(100_000)),
            _ => task.train_samples,
        },
        test_samples: match name {
            TaskName::Copy => Some(task.test_samples.unwrap_or(100)),
            TaskName::Adding => Some(task.test_samples.unwrap_or(2000)),
            _ => task.test_samples,
        },
    };

    let activation = model.activation.unwrap_or(match name {
        TaskName::Copy => Activation::ModRelu,
        TaskName::Adding => Activation::Relu,
        _ if projunn => Activation::ModRelu,
        _ => Activation::Relu,
    });
    let init = model.init.unwrap_or(match name {
        TaskName::Adding => InitKind::Identity,
        TaskName::Copy if projunn => InitKind::Henaff,
        _ => InitKind::HaarOrthogonal,
    });
    let model = ModelSection {
        n_h: model.n_h.unwrap_or(d.n_h),
        activation,
        init,
    };

    let (default_lr, default_divider) = match (name, projunn) {
        (TaskName::Copy, true) => (7e-4, 32.0),
        (TaskName::Copy, false) => (1e-4, 1.0),
        (TaskName::Adding, true) => (1e-4, 32.0),
        (TaskName::Adding, false) => (1e-3, 1.0),
        (TaskName::Ptb, true) => (1e-3, 8.0),
        _ => (1e-3, 1.0),
    };
    // STE-pen on pixel MNIST keeps a constant rate and a smaller batch.
    let pen_mnist = pen && matches!(name, TaskName::Mnist | TaskName::Pmnist);
    let train = TrainSection {
        strategy,
        bits: match strategy {
            StrategyName::FullPrecision => None,
            _ => Some(train.bits.unwrap_or(8)),
        },
        ortho,
        lambda: train.lambda.unwrap_or(0.1),
        identity_offset: train.identity_offset.unwrap_or(false),
        bjorck_iterations: train.bjorck_iterations.unwrap_or(BjorckConfig::default().iterations),
        optimizer: train
            .optimizer
            .unwrap_or(if projunn { OptimizerKind::Rmsprop } else { OptimizerKind::Adam }),
        lr: train.lr.unwrap_or(default_lr),
        recurrent_lr_divider: train.recurrent_lr_divider.unwrap_or(default_divider),
        clip_norm: train.clip_norm,
        lr_gamma: train.lr_gamma.unwrap_or(if pen_mnist { 1.0 } else { d.lr_gamma }),
        lr_every: train.lr_every.unwrap_or(d.lr_every),
        epochs: train.epochs.unwrap_or(d.epochs),
        batch_size: train.batch_size.unwrap_or(if pen_mnist { 64 } else { d.batch_size }),
        eval_batch_size: train.eval_batch_size.unwrap_or(500),
        max_steps_per_epoch: train.max_steps_per_epoch,
        seed: train.seed.unwrap_or(0),
        record_wall_time: train.record_wall_time.unwrap_or(true),
    };
    let cfg = ExperimentConfig { task, model, train };
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    if cfg.model.n_h == 0 {
        return Err(config_err("model.n_h must be ≥ 1"));
    }
    if cfg.model.init == InitKind::Henaff && cfg.model.n_h % 2 != 0 {
        return Err(config_err("Henaff initialization needs an even n_h"));
    }
    if cfg.train.batch_size == 0 || cfg.train.eval_batch_size == 0 {
        return Err(config_err("batch sizes must be ≥ 1"));
    }
    if cfg.train.lr_every == 0 {
        return Err(config_err("train.lr_every must be ≥ 1"));
    }
    if !(cfg.train.lr_gamma > 0.0) {
        return Err(config_err("train.lr_gamma must be positive"));
    }
    for (key, v) in [("task.train_samples", cfg.task.train_samples), ("task.test_samples", cfg.task.test_samples)] {
        if v == Some(0) {
            return Err(config_err(format!("{key} must be ≥ 1")));
        }
    }
    match cfg.task.name {
        TaskName::Copy if cfg.task.t0 == Some(0) => return Err(config_err("task.t0 must be ≥ 1")),
        TaskName::Adding if cfg.task.steps.is_some_and(|s| s < 2) => {
            return Err(config_err("task.steps must be ≥ 2"))
        }
        _ => {}
    }
    cfg.train_config().optimizer.validate().map_err(|e| config_err(e.to_string()))?;
    cfg.strategy()?;
    Ok(())
}
