//! Synthetic seq2seq tasks, JSONL ingestion and mixed-task batching.
//!
//! Token layout for a vocabulary of size `V`:
//!
//! | ids            | role                                   |
//! |----------------|----------------------------------------|
//! | 0, 1, 2        | pad, bos, eos                          |
//! | 3 .. V-8       | content tokens                         |
//! | V-8, V-7       | separator, mask                        |
//! | V-6 .. V       | label tokens (classification outputs)  |
//!
//! Labels are ordinary generated tokens, so every task is text-to-text.
//!
//! Task relatedness: copy, reverse and sort all emit the input's tokens
//! (identity skills, differing only in order); parity and pattern
//! classification both read token identity and emit one label; entailment
//! checks token membership across a separator, which leans on copy-like
//! identity matching. See [`TaskKind::related`].

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Token counted by `parity_classify`.
pub const PARITY_TOKEN: usize = 3;

const RESERVED_TAIL: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < 3 + RESERVED_TAIL + 4 {
            return Err(Error::Config(format!("vocabulary of {size} leaves too few content tokens")));
        }
        Ok(Self { size })
    }

    pub fn content(&self) -> std::ops::Range<usize> {
        3..self.size - RESERVED_TAIL
    }

    pub fn sep(&self) -> usize {
        self.size - 8
    }

    pub fn mask(&self) -> usize {
        self.size - 7
    }

    /// Label token `k` in `0..6`.
    pub fn label(&self, k: usize) -> usize {
        assert!(k < 6, "label index {k} out of range");
        self.size - 6 + k
    }

    pub fn contains(&self, token: usize) -> bool {
        token < self.size
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self { size: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub input_tokens: Vec<usize>,
    pub target_tokens: Vec<usize>,
    pub task_id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
    ParityClassify,
    PatternClassify,
    EntailToy,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::Copy,
        TaskKind::Reverse,
        TaskKind::Sort,
        TaskKind::ParityClassify,
        TaskKind::PatternClassify,
        TaskKind::EntailToy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Sort => "sort",
            TaskKind::ParityClassify => "parity_classify",
            TaskKind::PatternClassify => "pattern_classify",
            TaskKind::EntailToy => "entail_toy",
        }
    }

    pub fn is_classification(self) -> bool {
        matches!(self, TaskKind::ParityClassify | TaskKind::PatternClassify | TaskKind::EntailToy)
    }

    /// Symmetric relatedness graph among kinds.
    pub fn related(self, other: TaskKind) -> bool {
        use TaskKind::*;
        let edge = |a, b| (self == a && other == b) || (self == b && other == a);
        edge(Copy, Sort)
            || edge(Copy, Reverse)
            || edge(Sort, Reverse)
            || edge(ParityClassify, PatternClassify)
            || edge(EntailToy, Copy)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Generator { kind: TaskKind, size: usize, seed: u64 },
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub task_id: String,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
    pub source: DatasetSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub task_id: String,
    pub sizes: SplitSizes,
    pub source: DatasetSource,
}

impl TaskDataset {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            task_id: self.task_id.clone(),
            sizes: SplitSizes {
                train: self.train.len(),
                dev: self.dev.len(),
                test: self.test.len(),
            },
            source: self.source.clone(),
        }
    }

    /// Same data under a different task id.
    pub fn renamed(&self, task_id: &str) -> Self {
        let relabel = |xs: &[Example]| {
            xs.iter()
                .map(|e| Example {
                    task_id: task_id.to_string(),
                    ..e.clone()
                })
                .collect()
        };
        Self {
            task_id: task_id.to_string(),
            train: relabel(&self.train),
            dev: relabel(&self.dev),
            test: relabel(&self.test),
            source: self.source.clone(),
        }
    }

    /// Keeps at most `n` training examples (dev/test untouched).
    pub fn with_train_limit(mut self, n: usize) -> Self {
        self.train.truncate(n);
        self
    }
}

/// Length and vocabulary settings for synthetic generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenOptions {
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Restricts seq2seq content tokens to the first `n` content ids (0 = all).
    pub content_tokens: usize,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            min_len: 3,
            max_len: 8,
            content_tokens: 0,
        }
    }
}

impl GenOptions {
    fn content(&self, vocab: &Vocab) -> std::ops::Range<usize> {
        let r = vocab.content();
        if self.content_tokens == 0 {
            r
        } else {
            r.start..(r.start + self.content_tokens).min(r.end)
        }
    }
}

pub fn gen_synthetic_task(kind: TaskKind, size: usize, seed: u64) -> Result<TaskDataset> {
    gen_synthetic_task_with(kind, size, seed, &GenOptions::default())
}

/// Deterministic dataset of `size` distinct examples, split 80/10/10.
pub fn gen_synthetic_task_with(kind: TaskKind, size: usize, seed: u64, opts: &GenOptions) -> Result<TaskDataset> {
    if size < 12 {
        return Err(Error::Config(format!("synthetic task size {size} < 12")));
    }
    if opts.min_len == 0 || opts.min_len > opts.max_len {
        return Err(Error::Config(format!("bad length range {}..={}", opts.min_len, opts.max_len)));
    }
    let vocab = Vocab::new(opts.vocab_size)?;
    let mut rng = Rng::new(seed);
    let mut seen = HashSet::with_capacity(size);
    let mut examples = Vec::with_capacity(size);
    let mut attempts = 0usize;
    while examples.len() < size {
        attempts += 1;
        if attempts > size * 200 {
            return Err(Error::Data(format!(
                "could not draw {size} distinct `{kind}` examples with lengths {}..={}",
                opts.min_len, opts.max_len
            )));
        }
        let (input, target) = draw_example(kind, &vocab, opts, &mut rng);
        if seen.insert(input.clone()) {
            examples.push(Example {
                input_tokens: input,
                target_tokens: target,
                task_id: kind.as_str().to_string(),
            });
        }
    }
    rng.shuffle(&mut examples);
    let n_dev = size / 10;
    let n_test = size / 10;
    let n_train = size - n_dev - n_test;
    let test = examples.split_off(n_train + n_dev);
    let dev = examples.split_off(n_train);
    Ok(TaskDataset {
        task_id: kind.as_str().to_string(),
        train: examples,
        dev,
        test,
        source: DatasetSource::Generator { kind, size, seed },
    })
}

fn draw_sequence(range: &std::ops::Range<usize>, len: usize, rng: &mut Rng) -> Vec<usize> {
    (0..len).map(|_| rng.between(range.start, range.end - 1)).collect()
}

/// One `(input, target)` pair of `kind`; targets end with `eos`.
pub fn draw_example(kind: TaskKind, vocab: &Vocab, opts: &GenOptions, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let content = opts.content(vocab);
    let len = rng.between(opts.min_len, opts.max_len);
    let with_eos = |mut v: Vec<usize>| {
        v.push(EOS);
        v
    };
    match kind {
        TaskKind::Copy => {
            let x = draw_sequence(&content, len, rng);
            (x.clone(), with_eos(x))
        }
        TaskKind::Reverse => {
            let x = draw_sequence(&content, len, rng);
            (x.clone(), with_eos(x.iter().rev().copied().collect()))
        }
        TaskKind::Sort => {
            let x = draw_sequence(&content, len, rng);
            let mut y = x.clone();
            y.sort_unstable();
            (x, with_eos(y))
        }
        TaskKind::ParityClassify => {
            let others = (PARITY_TOKEN + 1)..content.end.max(PARITY_TOKEN + 2);
            let x: Vec<usize> = (0..len)
                .map(|_| {
                    if rng.uniform() < 0.3 {
                        PARITY_TOKEN
                    } else {
                        rng.between(others.start, others.end - 1)
                    }
                })
                .collect();
            let count = x.iter().filter(|&&t| t == PARITY_TOKEN).count();
            let label = if count % 2 == 0 { vocab.label(0) } else { vocab.label(1) };
            (x, vec![label, EOS])
        }
        TaskKind::PatternClassify => {
            let len = len.max(2);
            let mut x = draw_sequence(&content, len, rng);
            let want_match = rng.uniform() < 0.5;
            if want_match {
                x[len - 1] = x[0];
            } else if x[len - 1] == x[0] {
                x[len - 1] = content.start + (x[0] - content.start + 1) % content.len();
            }
            let label = if x[0] == x[len - 1] { vocab.label(2) } else { vocab.label(3) };
            (x, vec![label, EOS])
        }
        TaskKind::EntailToy => {
            let premise = draw_sequence(&content, len, rng);
            let h_len = rng.between(1, 3.min(len));
            let entail = rng.uniform() < 0.5;
            let hypothesis: Vec<usize> = if entail {
                (0..h_len).map(|_| premise[rng.below(premise.len())]).collect()
            } else {
                let absent: Vec<usize> = content.clone().filter(|t| !premise.contains(t)).collect();
                let mut h: Vec<usize> = (0..h_len).map(|_| premise[rng.below(premise.len())]).collect();
                let slot = rng.below(h_len);
                h[slot] = absent[rng.below(absent.len())];
                h
            };
            let holds = hypothesis.iter().all(|t| premise.contains(t));
            let mut x = premise;
            x.push(vocab.sep());
            x.extend(hypothesis);
            let label = if holds { vocab.label(4) } else { vocab.label(5) };
            (x, vec![label, EOS])
        }
    }
}

/// A corrupted/clean pair for backbone denoising: a random content sequence
/// with tokens replaced by the mask token at rate `mask_prob`; the target is
/// the clean sequence.
pub fn denoising_example(vocab: &Vocab, opts: &GenOptions, mask_prob: f64, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let content = opts.content(vocab);
    let len = rng.between(opts.min_len, opts.max_len);
    let clean = draw_sequence(&content, len, rng);
    let corrupted = clean
        .iter()
        .map(|&t| if rng.uniform() < mask_prob { vocab.mask() } else { t })
        .collect();
    let mut target = clean;
    target.push(EOS);
    (corrupted, target)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    task_id: String,
    input_tokens: Vec<usize>,
    target_tokens: Vec<usize>,
    split: String,
}

/// Reads a single-task JSONL file, validating every record against
/// `vocab_size` and `max_input_len`.
pub fn load_jsonl(path: &Path, vocab_size: usize, max_input_len: usize) -> Result<TaskDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let fail = |line: usize, message: String| Error::Ingestion {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut task_id: Option<String> = None;
    let (mut train, mut dev, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| fail(lineno, e.to_string()))?;
        if let Some(&t) = rec.input_tokens.iter().chain(&rec.target_tokens).find(|&&t| t >= vocab_size) {
            return Err(fail(lineno, format!("token {t} outside vocabulary of size {vocab_size}")));
        }
        if rec.input_tokens.is_empty() {
            return Err(fail(lineno, "empty input_tokens".into()));
        }
        if rec.input_tokens.len() > max_input_len {
            return Err(fail(lineno, format!("input length {} exceeds {max_input_len}", rec.input_tokens.len())));
        }
        if rec.target_tokens.last() != Some(&EOS) {
            return Err(fail(lineno, "target_tokens must end with eos".into()));
        }
        match &task_id {
            None => task_id = Some(rec.task_id.clone()),
            Some(t) if *t != rec.task_id => {
                return Err(fail(lineno, format!("task_id `{}` differs from `{t}`", rec.task_id)));
            }
            _ => {}
        }
        let split = match rec.split.as_str() {
            "train" => &mut train,
            "dev" => &mut dev,
            "test" => &mut test,
            other => return Err(fail(lineno, format!("bad split tag `{other}`"))),
        };
        split.push(Example {
            input_tokens: rec.input_tokens,
            target_tokens: rec.target_tokens,
            task_id: rec.task_id,
        });
    }
    let task_id = task_id.ok_or_else(|| Error::Data(format!("{} holds no records", path.display())))?;
    Ok(TaskDataset {
        task_id,
        train,
        dev,
        test,
        source: DatasetSource::File(path.to_path_buf()),
    })
}

pub fn save_jsonl(dataset: &TaskDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for split in [Split::Train, Split::Dev, Split::Test] {
        for ex in dataset.split(split) {
            let rec = Record {
                task_id: ex.task_id.clone(),
                input_tokens: ex.input_tokens.clone(),
                target_tokens: ex.target_tokens.clone(),
                split: split.as_str().to_string(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Padded mini-batch; instances may come from different tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
    pub targets: Vec<Vec<usize>>,
    pub target_lens: Vec<usize>,
    pub task_ids: Vec<String>,
}

impl Batch {
    pub fn from_examples(examples: &[&Example]) -> Self {
        let in_len = examples.iter().map(|e| e.input_tokens.len()).max().unwrap_or(0);
        let out_len = examples.iter().map(|e| e.target_tokens.len()).max().unwrap_or(0);
        let pad = |v: &[usize], n: usize| {
            let mut p = v.to_vec();
            p.resize(n, PAD);
            p
        };
        Batch {
            inputs: examples.iter().map(|e| pad(&e.input_tokens, in_len)).collect(),
            mask: examples
                .iter()
                .map(|e| (0..in_len).map(|i| i < e.input_tokens.len()).collect())
                .collect(),
            targets: examples.iter().map(|e| pad(&e.target_tokens, out_len)).collect(),
            target_lens: examples.iter().map(|e| e.target_tokens.len()).collect(),
            task_ids: examples.iter().map(|e| e.task_id.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Target of instance `i` without padding.
    pub fn target(&self, i: usize) -> &[usize] {
        &self.targets[i][..self.target_lens[i]]
    }

    /// Reconstructs instance `i` as an [`Example`].
    pub fn example(&self, i: usize) -> Example {
        let n = self.mask[i].iter().filter(|&&m| m).count();
        Example {
            input_tokens: self.inputs[i][..n].to_vec(),
            target_tokens: self.target(i).to_vec(),
            task_id: self.task_ids[i].clone(),
        }
    }
}

/// One epoch of training batches over `tasks`.
///
/// Mixed: the concatenated pool is shuffled once and chunked, so batches mix
/// tasks. Not mixed: each task is shuffled and chunked on its own and the
/// per-task batches follow in task order. The last partial batch is kept.
pub fn make_batches(tasks: &[&TaskDataset], batch_size: usize, seed: u64, mixed: bool) -> Result<BatchStream> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be ≥ 1".into()));
    }
    let mut rng = Rng::new(seed);
    let mut batches = Vec::new();
    if mixed {
        let mut pool: Vec<Example> = tasks.iter().flat_map(|t| t.train.iter().cloned()).collect();
        rng.shuffle(&mut pool);
        for chunk in pool.chunks(batch_size) {
            batches.push(Batch::from_examples(&chunk.iter().collect::<Vec<_>>()));
        }
    } else {
        for t in tasks {
            let mut pool = t.train.clone();
            rng.shuffle(&mut pool);
            for chunk in pool.chunks(batch_size) {
                batches.push(Batch::from_examples(&chunk.iter().collect::<Vec<_>>()));
            }
        }
    }
    Ok(BatchStream {
        inner: batches.into_iter(),
    })
}

/// Batches drawn with replacement, task `τ` chosen with probability
/// ∝ `n_τ^(1/temperature)`. Temperature 1 reproduces size-proportional
/// sampling; larger values flatten toward uniform over tasks.
pub fn make_balanced_batches(
    tasks: &[&TaskDataset],
    batch_size: usize,
    n_batches: usize,
    temperature: f64,
    seed: u64,
) -> Result<BatchStream> {
    if batch_size == 0 || temperature <= 0.0 {
        return Err(Error::Config("batch_size ≥ 1 and temperature > 0 required".into()));
    }
    let weights: Vec<f64> = tasks.iter().map(|t| (t.train.len() as f64).powf(1.0 / temperature)).collect();
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Data("no training examples to sample".into()));
    }
    let mut rng = Rng::new(seed);
    let mut batches = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let mut picked = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let mut u = rng.uniform() * total;
            let mut k = 0;
            while k + 1 < weights.len() && u >= weights[k] {
                u -= weights[k];
                k += 1;
            }
            let train = &tasks[k].train;
            picked.push(&train[rng.below(train.len())]);
        }
        batches.push(Batch::from_examples(&picked));
    }
    Ok(BatchStream {
        inner: batches.into_iter(),
    })
}

pub struct BatchStream {
    inner: std::vec::IntoIter<Batch>,
}

impl Iterator for BatchStream {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        self.inner.next()
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.inner.size_hint()
    }
}

impl ExactSizeIterator for BatchStream {}
