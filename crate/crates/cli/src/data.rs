use qornn::tasks::{load_pixel_mnist, load_ptb_char, AddingTask, CopyTask, Dataset, MnistDataset, Split};

use crate::config::{ExperimentConfig, TaskName};
use crate::error::{CliError, CliResult};

/// Seed of the generated test sets, fixed so that runs with different model
/// seeds are compared on the same sequences.
const TEST_SEED: u64 = 0x7e57;

/// Datasets of one experiment. `calibration` is train plus validation where
/// the task has one.
pub struct TaskData {
    pub train: Box<dyn Dataset>,
    pub eval: Box<dyn Dataset>,
    pub calibration: Vec<Box<dyn Dataset>>,
}

impl TaskData {
    pub fn calibration_refs(&self) -> Vec<&dyn Dataset> {
        self.calibration.iter().map(|d| d.as_ref()).collect()
    }
}

fn missing(err: qornn::Error) -> CliError {
    match err {
        qornn::Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => CliError::MissingData(e.to_string()),
        other => CliError::Core(other),
    }
}

fn truncated(mut d: MnistDataset, n: Option<usize>) -> MnistDataset {
    if let Some(n) = n {
        d.truncate(n);
    }
    d
}

/// Training data is generated from the run seed, test data from a fixed one.
pub fn load_task(cfg: &ExperimentConfig) -> CliResult<TaskData> {
    let data_seed = cfg.train.seed;
    let t = &cfg.task;
    let train_n = t.train_samples;
    let test_n = t.test_samples;
    Ok(match t.name {
        TaskName::Copy => {
            let t0 = t.t0.expect("resolved");
            TaskData {
                train: Box::new(CopyTask::new(t0, train_n.expect("resolved"), data_seed)),
                eval: Box::new(CopyTask::new(t0, test_n.expect("resolved"), TEST_SEED)),
                calibration: vec![Box::new(CopyTask::new(t0, train_n.expect("resolved"), data_seed))],
            }
        }
        TaskName::Adding => {
            let steps = t.steps.expect("resolved");
            TaskData {
                train: Box::new(AddingTask::new(steps, train_n.expect("resolved"), data_seed)?),
                eval: Box::new(AddingTask::new(steps, test_n.expect("resolved"), TEST_SEED)?),
                calibration: vec![Box::new(AddingTask::new(steps, train_n.expect("resolved"), data_seed)?)],
            }
        }
        TaskName::Mnist | TaskName::Pmnist => {
            let dir = cfg.data_dir("mnist")?;
            let permuted = t.name == TaskName::Pmnist;
            let seed = t.perm_seed.unwrap_or(0);
            let load = |split| load_pixel_mnist(&dir, split, permuted, seed).map_err(missing);
            TaskData {
                train: Box::new(truncated(load(Split::Train)?, train_n)),
                eval: Box::new(truncated(load(Split::Test)?, test_n)),
                calibration: vec![Box::new(truncated(load(Split::Train)?, train_n))],
            }
        }
        TaskName::Ptb => {
            let dir = cfg.data_dir("ptb")?;
            let corpus = load_ptb_char(&dir, t.seq_len.expect("resolved")).map_err(missing)?;
            let mut train = corpus.train;
            let mut test = corpus.test;
            if let Some(n) = train_n {
                train.truncate(n);
            }
            if let Some(n) = test_n {
                test.truncate(n);
            }
            TaskData {
                calibration: vec![Box::new(train.clone()), Box::new(corpus.valid)],
                train: Box::new(train),
                eval: Box::new(test),
            }
        }
    })
}

/// The first `len` samples of another dataset.
pub struct Prefix<'a> {
    inner: &'a dyn Dataset,
    len: usize,
}

impl<'a> Prefix<'a> {
    pub fn new(inner: &'a dyn Dataset, len: usize) -> Self {
        Prefix {
            len: len.min(inner.len()),
            inner,
        }
    }
}

impl Dataset for Prefix<'_> {
    fn len(&self) -> usize {
        self.len
    }

    fn n_i(&self) -> usize {
        self.inner.n_i()
    }

    fn n_o(&self) -> usize {
        self.inner.n_o()
    }

    fn mode(&self) -> qornn::rnn::Mode {
        self.inner.mode()
    }

    fn loss(&self) -> qornn::rnn::LossKind {
        self.inner.loss()
    }

    fn batch(&self, indices: &[usize]) -> qornn::Result<qornn::tasks::TaskBatch> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len) {
            return Err(qornn::Error::InvalidArgument(format!("index {i} beyond prefix of {}", self.len)));
        }
        self.inner.batch(indices)
    }
}
