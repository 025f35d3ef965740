//! Benchmark data: the copy and adding generators, pixel MNIST and
//! character-level Penn Treebank loaders, and the naive baselines.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{format_g17, Matrix, RngState};
use crate::rnn::{LossKind, Mask, Mode, Targets};

/// A block of sequences: inputs per step (`B × n_i`), targets and mask per
/// output step.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBatch {
    pub inputs: Vec<Matrix>,
    pub targets: Targets,
    pub mask: Mask,
}

impl TaskBatch {
    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, Matrix::rows)
    }

    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    /// One line per `(sample, step)`: inputs, then target and mask when the
    /// step carries an output.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let n_i = self.inputs.first().map_or(0, Matrix::cols);
        let out_offset = self.steps() - self.targets.steps();
        let mut header = vec!["sample".to_string(), "step".to_string()];
        header.extend((0..n_i).map(|j| format!("x{j}")));
        header.extend(["target".to_string(), "mask".to_string()]);
        writeln!(out, "{}", header.join(","))?;
        for b in 0..self.batch_size() {
            for (t, x) in self.inputs.iter().enumerate() {
                let mut fields = vec![b.to_string(), (t + 1).to_string()];
                fields.extend(x.row(b).iter().map(|&v| format_g17(v)));
                if t >= out_offset {
                    let s = t - out_offset;
                    fields.push(match &self.targets {
                        Targets::Classes(c) => c[s][b].to_string(),
                        Targets::Values(v) => v[s].row(b).iter().map(|&x| format_g17(x)).collect::<Vec<_>>().join(";"),
                    });
                    fields.push(u8::from(self.mask[s][b]).to_string());
                } else {
                    fields.extend([String::new(), String::new()]);
                }
                writeln!(out, "{}", fields.join(","))?;
            }
        }
        Ok(())
    }
}

/// Indexable collection of sequences.
pub trait Dataset {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn n_i(&self) -> usize;
    fn n_o(&self) -> usize;
    fn mode(&self) -> Mode;
    fn loss(&self) -> LossKind;

    fn batch(&self, indices: &[usize]) -> Result<TaskBatch>;
}

fn check_indices(indices: &[usize], len: usize) -> Result<()> {
    if indices.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if let Some(&i) = indices.iter().find(|&&i| i >= len) {
        return Err(Error::invalid(format!("sample {i} out of range for {len} samples")));
    }
    Ok(())
}

fn one_hot_steps(tokens: &[Vec<usize>], steps: usize, width: usize) -> Vec<Matrix> {
    let batch = tokens.len();
    (0..steps)
        .map(|t| {
            let mut m = Matrix::zeros(batch, width);
            for (b, seq) in tokens.iter().enumerate() {
                if let Some(&k) = seq.get(t) {
                    m[(b, k)] = 1.0;
                }
            }
            m
        })
        .collect()
}

pub const COPY_SYMBOLS: usize = 8;
pub const COPY_MEMORY: usize = 10;
/// Input alphabet: blank (0), the symbols (1..=8) and the delimiter (9).
pub const COPY_N_I: usize = COPY_SYMBOLS + 2;
/// Output alphabet: blank and the symbols.
pub const COPY_N_O: usize = COPY_SYMBOLS + 1;
pub const COPY_DELIMITER: usize = COPY_SYMBOLS + 1;

/// Symbols to memorize for one copy sequence, in `1..=8`.
pub fn copy_sample(rng: &mut RngState) -> [usize; COPY_MEMORY] {
    std::array::from_fn(|_| rng.index(1, COPY_SYMBOLS + 1))
}

/// Input and target token sequences (length `T₀ + 20`) for memorized
/// symbols `s`.
pub fn copy_sequences(t0: usize, s: &[usize; COPY_MEMORY]) -> (Vec<usize>, Vec<usize>) {
    let steps = t0 + 2 * COPY_MEMORY;
    let mut input = vec![0; steps];
    input[..COPY_MEMORY].copy_from_slice(s);
    // 1-based position T₀ + 11.
    input[t0 + COPY_MEMORY] = COPY_DELIMITER;
    let mut target = vec![0; steps];
    target[t0 + COPY_MEMORY..].copy_from_slice(s);
    (input, target)
}

fn copy_batch(t0: usize, samples: &[[usize; COPY_MEMORY]]) -> TaskBatch {
    let (inputs, targets): (Vec<_>, Vec<_>) = samples.iter().map(|s| copy_sequences(t0, s)).unzip();
    let steps = t0 + 2 * COPY_MEMORY;
    let classes = (0..steps).map(|t| targets.iter().map(|seq| seq[t]).collect()).collect();
    TaskBatch {
        inputs: one_hot_steps(&inputs, steps, COPY_N_I),
        targets: Targets::Classes(classes),
        mask: vec![vec![true; samples.len()]; steps],
    }
}

/// A fresh batch of copy sequences drawn from `rng`.
pub fn gen_copy_task(t0: usize, batch: usize, rng: &mut RngState) -> TaskBatch {
    let samples: Vec<_> = (0..batch).map(|_| copy_sample(rng)).collect();
    copy_batch(t0, &samples)
}

/// `len` copy sequences; sample `i` is drawn from stream `i` of `seed`.
#[derive(Clone, Debug)]
pub struct CopyTask {
    pub t0: usize,
    pub len: usize,
    root: RngState,
}

impl CopyTask {
    pub fn new(t0: usize, len: usize, seed: u64) -> Self {
        CopyTask {
            t0,
            len,
            root: RngState::new(seed),
        }
    }
}

impl Dataset for CopyTask {
    fn len(&self) -> usize {
        self.len
    }

    fn n_i(&self) -> usize {
        COPY_N_I
    }

    fn n_o(&self) -> usize {
        COPY_N_O
    }

    fn mode(&self) -> Mode {
        Mode::ManyToMany
    }

    fn loss(&self) -> LossKind {
        LossKind::CrossEntropy
    }

    fn batch(&self, indices: &[usize]) -> Result<TaskBatch> {
        check_indices(indices, self.len)?;
        let samples: Vec<_> = indices.iter().map(|&i| copy_sample(&mut self.root.fork(i as u64))).collect();
        Ok(copy_batch(self.t0, &samples))
    }
}

/// Values in channel 0 and the two marked (0-based) positions.
fn adding_sample(steps: usize, rng: &mut RngState) -> (Vec<f64>, usize, usize) {
    let values = (0..steps).map(|_| rng.uniform()).collect();
    let half = steps / 2;
    let first = rng.index(0, half);
    let second = rng.index(half, steps);
    (values, first, second)
}

fn adding_batch(steps: usize, samples: &[(Vec<f64>, usize, usize)]) -> TaskBatch {
    let batch = samples.len();
    let inputs = (0..steps)
        .map(|t| {
            let mut m = Matrix::zeros(batch, 2);
            for (b, (values, i, j)) in samples.iter().enumerate() {
                m[(b, 0)] = values[t];
                m[(b, 1)] = if t == *i || t == *j { 1.0 } else { 0.0 };
            }
            m
        })
        .collect();
    let target = Matrix::from_fn(batch, 1, |b, _| {
        let (values, i, j) = &samples[b];
        values[*i] + values[*j]
    });
    TaskBatch {
        inputs,
        targets: Targets::Values(vec![target]),
        mask: vec![vec![true; batch]],
    }
}

fn check_adding_len(steps: usize) -> Result<()> {
    if steps < 2 || steps % 2 != 0 {
        return Err(Error::invalid(format!("adding task needs an even length ≥ 2, got {steps}")));
    }
    Ok(())
}

pub fn gen_adding_task(steps: usize, batch: usize, rng: &mut RngState) -> Result<TaskBatch> {
    check_adding_len(steps)?;
    let samples: Vec<_> = (0..batch).map(|_| adding_sample(steps, rng)).collect();
    Ok(adding_batch(steps, &samples))
}

#[derive(Clone, Debug)]
pub struct AddingTask {
    pub steps: usize,
    pub len: usize,
    root: RngState,
}

impl AddingTask {
    pub fn new(steps: usize, len: usize, seed: u64) -> Result<Self> {
        check_adding_len(steps)?;
        Ok(AddingTask {
            steps,
            len,
            root: RngState::new(seed),
        })
    }
}

impl Dataset for AddingTask {
    fn len(&self) -> usize {
        self.len
    }

    fn n_i(&self) -> usize {
        2
    }

    fn n_o(&self) -> usize {
        1
    }

    fn mode(&self) -> Mode {
        Mode::ManyToOne
    }

    fn loss(&self) -> LossKind {
        LossKind::Mse
    }

    fn batch(&self, indices: &[usize]) -> Result<TaskBatch> {
        check_indices(indices, self.len)?;
        let samples: Vec<_> = indices
            .iter()
            .map(|&i| adding_sample(self.steps, &mut self.root.fork(i as u64)))
            .collect();
        Ok(adding_batch(self.steps, &samples))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TaskKind {
    Copy { t0: usize },
    Adding { steps: usize },
    Mnist { permuted: bool },
    Ptb,
}

/// Loss of the best input-independent predictor: `10·ln 8/(T₀+20)` for the
/// copy task, `1/6` for the adding task.
pub fn naive_baseline(task: TaskKind) -> Result<f64> {
    match task {
        TaskKind::Copy { t0 } => {
            Ok(COPY_MEMORY as f64 * (COPY_SYMBOLS as f64).ln() / (t0 + 2 * COPY_MEMORY) as f64)
        }
        TaskKind::Adding { .. } => Ok(1.0 / 6.0),
        other => Err(Error::Unsupported(format!("no naive baseline for {other:?}"))),
    }
}

pub const MNIST_PIXELS: usize = 784;
const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

fn read_u32_be<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_be_bytes(b))
}

fn truncated(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::format("truncated file")
    } else {
        Error::Io(e)
    }
}

/// IDX image file: `(count, rows·cols pixels per image, pixel bytes)`.
pub fn read_idx_images<R: Read>(mut r: R) -> Result<(usize, usize, Vec<u8>)> {
    let magic = read_u32_be(&mut r)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(format!("bad IDX image magic {magic:#010x}")));
    }
    let count = read_u32_be(&mut r)? as usize;
    let pixels = read_u32_be(&mut r)? as usize * read_u32_be(&mut r)? as usize;
    let mut data = vec![0u8; count * pixels];
    r.read_exact(&mut data).map_err(truncated)?;
    Ok((count, pixels, data))
}

pub fn read_idx_labels<R: Read>(mut r: R) -> Result<Vec<u8>> {
    let magic = read_u32_be(&mut r)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(format!("bad IDX label magic {magic:#010x}")));
    }
    let count = read_u32_be(&mut r)? as usize;
    let mut data = vec![0u8; count];
    r.read_exact(&mut data).map_err(truncated)?;
    Ok(data)
}

/// Fixed pixel permutation drawn from `seed`.
pub fn pixel_permutation(seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..MNIST_PIXELS).collect();
    RngState::new(seed).shuffle(&mut perm);
    perm
}

/// `out[i] = x[perm[i]]`
pub fn permute<T: Copy>(x: &[T], perm: &[usize]) -> Vec<T> {
    perm.iter().map(|&p| x[p]).collect()
}

pub fn unpermute<T: Copy + Default>(y: &[T], perm: &[usize]) -> Vec<T> {
    let mut x = vec![T::default(); y.len()];
    for (i, &p) in perm.iter().enumerate() {
        x[p] = y[i];
    }
    x
}

/// Pixel-by-pixel MNIST: one 784-step sequence of scalars per image.
#[derive(Clone, Debug)]
pub struct MnistDataset {
    images: Vec<u8>,
    labels: Vec<u8>,
    perm: Option<Vec<usize>>,
}

impl MnistDataset {
    pub fn new(images: Vec<u8>, labels: Vec<u8>, perm: Option<Vec<usize>>) -> Result<Self> {
        if images.len() != labels.len() * MNIST_PIXELS {
            return Err(Error::format(format!(
                "{} labels for {} pixels",
                labels.len(),
                images.len()
            )));
        }
        if let Some(p) = &perm {
            let mut seen = vec![false; MNIST_PIXELS];
            if p.len() != MNIST_PIXELS || !p.iter().all(|&i| i < MNIST_PIXELS && !std::mem::replace(&mut seen[i], true)) {
                return Err(Error::invalid("pixel order is not a permutation of 0..784"));
            }
        }
        Ok(MnistDataset { images, labels, perm })
    }

    /// Keeps only the first `n` images.
    pub fn truncate(&mut self, n: usize) {
        self.labels.truncate(n);
        self.images.truncate(n * MNIST_PIXELS);
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Pixel sequence of image `i` in `[0, 1]`, after the permutation.
    pub fn sequence(&self, i: usize) -> Vec<f64> {
        let img = &self.images[i * MNIST_PIXELS..(i + 1) * MNIST_PIXELS];
        let ordered = match &self.perm {
            Some(p) => permute(img, p),
            None => img.to_vec(),
        };
        ordered.into_iter().map(|v| f64::from(v) / 255.0).collect()
    }
}

impl Dataset for MnistDataset {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn n_i(&self) -> usize {
        1
    }

    fn n_o(&self) -> usize {
        10
    }

    fn mode(&self) -> Mode {
        Mode::ManyToOne
    }

    fn loss(&self) -> LossKind {
        LossKind::CrossEntropy
    }

    fn batch(&self, indices: &[usize]) -> Result<TaskBatch> {
        check_indices(indices, self.len())?;
        let seqs: Vec<Vec<f64>> = indices.iter().map(|&i| self.sequence(i)).collect();
        let inputs = (0..MNIST_PIXELS)
            .map(|t| Matrix::from_fn(seqs.len(), 1, |b, _| seqs[b][t]))
            .collect();
        Ok(TaskBatch {
            inputs,
            targets: Targets::Classes(vec![indices.iter().map(|&i| usize::from(self.labels[i])).collect()]),
            mask: vec![vec![true; indices.len()]],
        })
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Loads the standard IDX files (`train-images-idx3-ubyte`,
/// `t10k-labels-idx1-ubyte`, …) from `dir`. The test split is `t10k`; there
/// is no separate validation split.
pub fn load_pixel_mnist(dir: &Path, split: Split, permuted: bool, perm_seed: u64) -> Result<MnistDataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
        Split::Valid => return Err(Error::Unsupported("MNIST has no validation split".into())),
    };
    let (count, pixels, images) = read_idx_images(open(&dir.join(format!("{prefix}-images-idx3-ubyte")))?)?;
    if pixels != MNIST_PIXELS {
        return Err(Error::format(format!("expected 28x28 images, got {pixels} pixels")));
    }
    let labels = read_idx_labels(open(&dir.join(format!("{prefix}-labels-idx1-ubyte")))?)?;
    if labels.len() != count {
        return Err(Error::format(format!("{count} images but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::format(format!("label {bad} outside 0..=9")));
    }
    MnistDataset::new(images, labels, permuted.then(|| pixel_permutation(perm_seed)))
}

pub const PTB_ALPHABET: usize = 50;
pub const PTB_SEQ_LEN: usize = 150;

/// Splits a line into symbols. Lines that are single characters separated
/// by spaces (the `ptb.char.*` layout, `_` marking word gaps) yield those
/// characters; anything else is read character by character.
pub fn ptb_symbols(line: &str) -> Vec<char> {
    let line = line.trim();
    let spaced = line.split(' ').all(|tok| tok.chars().count() == 1);
    if spaced {
        line.split(' ').filter_map(|tok| tok.chars().next()).collect()
    } else {
        line.chars().collect()
    }
}

/// Character-level sentences encoded over a fixed alphabet.
#[derive(Clone, Debug)]
pub struct PtbDataset {
    sequences: Vec<Vec<usize>>,
    n_symbols: usize,
    seq_len: usize,
}

impl PtbDataset {
    /// Encodes each sentence; sentences longer than `seq_len + 1` symbols
    /// are cut into consecutive windows that overlap by one symbol.
    pub fn from_text(text: &str, alphabet: &[char], seq_len: usize) -> Result<Self> {
        let mut sequences = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            let encoded = ptb_symbols(line)
                .into_iter()
                .map(|c| {
                    alphabet
                        .binary_search(&c)
                        .map_err(|_| Error::format(format!("unknown character {c:?} on line {}", line_no + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            if encoded.len() < 2 {
                continue;
            }
            let mut start = 0;
            while start + 1 < encoded.len() {
                let end = (start + seq_len + 1).min(encoded.len());
                sequences.push(encoded[start..end].to_vec());
                start = end - 1;
            }
        }
        Ok(PtbDataset {
            sequences,
            n_symbols: alphabet.len(),
            seq_len,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Number of predicted characters.
    pub fn characters(&self) -> usize {
        self.sequences.iter().map(|s| s.len() - 1).sum()
    }

    pub fn truncate(&mut self, n: usize) {
        self.sequences.truncate(n);
    }
}

impl Dataset for PtbDataset {
    fn len(&self) -> usize {
        self.sequences.len()
    }

    fn n_i(&self) -> usize {
        self.n_symbols
    }

    fn n_o(&self) -> usize {
        self.n_symbols
    }

    fn mode(&self) -> Mode {
        Mode::ManyToMany
    }

    fn loss(&self) -> LossKind {
        LossKind::Bpc
    }

    /// Padded steps get an all-zero input and are masked out.
    fn batch(&self, indices: &[usize]) -> Result<TaskBatch> {
        check_indices(indices, self.len())?;
        let inputs: Vec<Vec<usize>> = indices
            .iter()
            .map(|&i| {
                let s = &self.sequences[i];
                s[..s.len() - 1].to_vec()
            })
            .collect();
        let mut classes = vec![vec![0; indices.len()]; self.seq_len];
        let mut mask = vec![vec![false; indices.len()]; self.seq_len];
        for (b, &i) in indices.iter().enumerate() {
            for (t, &c) in self.sequences[i][1..].iter().enumerate() {
                classes[t][b] = c;
                mask[t][b] = true;
            }
        }
        Ok(TaskBatch {
            inputs: one_hot_steps(&inputs, self.seq_len, self.n_symbols),
            targets: Targets::Classes(classes),
            mask,
        })
    }
}

#[derive(Clone, Debug)]
pub struct PtbCorpus {
    /// Sorted symbols; index is the one-hot position.
    pub alphabet: Vec<char>,
    pub train: PtbDataset,
    pub valid: PtbDataset,
    pub test: PtbDataset,
}

/// Alphabet of the training text, which must have `expected` symbols.
pub fn ptb_alphabet(train_text: &str, expected: usize) -> Result<Vec<char>> {
    let set: BTreeSet<char> = train_text.lines().flat_map(ptb_symbols).collect();
    if set.len() != expected {
        return Err(Error::format(format!(
            "training text has {} distinct characters, expected {expected}",
            set.len()
        )));
    }
    Ok(set.into_iter().collect())
}

pub fn ptb_from_texts(train: &str, valid: &str, test: &str, seq_len: usize) -> Result<PtbCorpus> {
    let alphabet = ptb_alphabet(train, PTB_ALPHABET)?;
    Ok(PtbCorpus {
        train: PtbDataset::from_text(train, &alphabet, seq_len)?,
        valid: PtbDataset::from_text(valid, &alphabet, seq_len)?,
        test: PtbDataset::from_text(test, &alphabet, seq_len)?,
        alphabet,
    })
}

/// Loads `ptb.char.{train,valid,test}.txt` from `dir`, falling back to
/// `ptb.{train,valid,test}.txt`.
pub fn load_ptb_char(dir: &Path, seq_len: usize) -> Result<PtbCorpus> {
    let read = |split: &str| -> Result<String> {
        let char_path = dir.join(format!("ptb.char.{split}.txt"));
        let path = if char_path.exists() {
            char_path
        } else {
            dir.join(format!("ptb.{split}.txt"))
        };
        let mut s = String::new();
        open(&path)?.read_to_string(&mut s)?;
        Ok(s)
    };
    ptb_from_texts(&read("train")?, &read("valid")?, &read("test")?, seq_len)
}
