//! MNIST ingestion, Split MNIST task construction, and same-class pair
//! sampling.

pub mod idx;

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Number of Split MNIST tasks.
pub const SPLIT_MNIST_TASKS: usize = 5;

/// A labeled sample set stored column-wise: one input row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    inputs: Array2<f64>,
    labels: Vec<usize>,
    digits: Vec<u8>,
    source_index: Vec<usize>,
}

/// Borrowed view of one sample.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub pixels: ArrayView1<'a, f64>,
    pub digit: u8,
    pub class_id: usize,
    pub source_index: usize,
}

impl Samples {
    /// MNIST samples: class id is digit parity (0 even, 1 odd).
    pub fn from_mnist(inputs: Array2<f64>, digits: Vec<u8>) -> Result<Self> {
        if inputs.nrows() != digits.len() {
            return Err(Error::dim("labels per image", inputs.nrows(), digits.len()));
        }
        let labels = digits.iter().map(|&d| usize::from(d % 2)).collect();
        let source_index = (0..digits.len()).collect();
        Ok(Self {
            inputs,
            labels,
            digits,
            source_index,
        })
    }

    /// Generic labeled data (toy sets, synthetic data). Digits mirror labels.
    pub fn from_labeled(inputs: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::dim("labels per input", inputs.nrows(), labels.len()));
        }
        let digits = labels.iter().map(|&l| l.min(255) as u8).collect();
        let source_index = (0..labels.len()).collect();
        Ok(Self {
            inputs,
            labels,
            digits,
            source_index,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn inputs(&self) -> ArrayView2<'_, f64> {
        self.inputs.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn digits(&self) -> &[u8] {
        &self.digits
    }

    pub fn source_indices(&self) -> &[usize] {
        &self.source_index
    }

    pub fn get(&self, i: usize) -> Sample<'_> {
        Sample {
            pixels: self.inputs.row(i),
            digit: self.digits[i],
            class_id: self.labels[i],
            source_index: self.source_index[i],
        }
    }

    /// Number of distinct classes, i.e. `max label + 1`.
    pub fn class_count(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Copies the given rows into a new sample set, keeping provenance.
    pub fn select(&self, rows: &[usize]) -> Samples {
        Samples {
            inputs: self.inputs.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            digits: rows.iter().map(|&r| self.digits[r]).collect(),
            source_index: rows.iter().map(|&r| self.source_index[r]).collect(),
        }
    }

    /// First `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Samples {
        let rows: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&rows)
    }

    pub fn gather_inputs(&self, rows: &[usize]) -> Array2<f64> {
        self.inputs.select(Axis(0), rows)
    }

    /// Row indices grouped by class, in ascending class order.
    pub fn class_index(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            map.entry(l).or_default().push(i);
        }
        map
    }

    pub fn concat(parts: &[&Samples]) -> Result<Samples> {
        let first = parts.first().ok_or_else(|| Error::Empty("no sample sets to concatenate".into()))?;
        let views: Vec<_> = parts.iter().map(|s| s.inputs.view()).collect();
        let inputs = ndarray::concatenate(Axis(0), &views).map_err(|_| Error::dim("input width", first.dim(), 0))?;
        Ok(Samples {
            inputs,
            labels: parts.iter().flat_map(|s| s.labels.iter().copied()).collect(),
            digits: parts.iter().flat_map(|s| s.digits.iter().copied()).collect(),
            source_index: parts.iter().flat_map(|s| s.source_index.iter().copied()).collect(),
        })
    }
}

/// One task of a sequence: its training and test samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task_id: usize,
    /// Digits covered by this task (empty for non-MNIST data).
    pub digits: Vec<u8>,
    pub train: Samples,
    pub test: Samples,
}

impl TaskDataset {
    pub fn new(task_id: usize, train: Samples, test: Samples) -> Self {
        let mut digits: Vec<u8> = train.digits().to_vec();
        digits.sort_unstable();
        digits.dedup();
        Self {
            task_id,
            digits,
            train,
            test,
        }
    }

    /// Caps train/test sizes, keeping the first samples of each.
    pub fn truncated(&self, max_train: Option<usize>, max_test: Option<usize>) -> TaskDataset {
        TaskDataset {
            task_id: self.task_id,
            digits: self.digits.clone(),
            train: max_train.map_or_else(|| self.train.clone(), |n| self.train.head(n)),
            test: max_test.map_or_else(|| self.test.clone(), |n| self.test.head(n)),
        }
    }
}

/// Loads the four standard MNIST files (raw or gzip) from `dir`.
pub fn load_mnist(dir: &Path) -> Result<(Samples, Samples)> {
    let read_pair = |img: &str, lbl: &str| -> Result<Samples> {
        let images = idx::parse_idx_images(&idx::read_maybe_gz(&idx::find_file(dir, img)?)?)?;
        let labels = idx::parse_idx_labels(&idx::read_maybe_gz(&idx::find_file(dir, lbl)?)?)?;
        Samples::from_mnist(images, labels)
    };
    let train = read_pair("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    let test = read_pair("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    Ok((train, test))
}

/// Partitions MNIST into five binary tasks: task `t` holds digits `2t` and
/// `2t + 1`, labeled by parity.
pub fn build_split_mnist(train: &Samples, test: &Samples) -> Vec<TaskDataset> {
    let rows_for = |set: &Samples, t: usize| -> Vec<usize> {
        set.digits()
            .iter()
            .enumerate()
            .filter(|(_, &d)| usize::from(d) / 2 == t)
            .map(|(i, _)| i)
            .collect()
    };
    (0..SPLIT_MNIST_TASKS)
        .map(|t| TaskDataset {
            task_id: t,
            digits: vec![2 * t as u8, 2 * t as u8 + 1],
            train: train.select(&rows_for(train, t)),
            test: test.select(&rows_for(test, t)),
        })
        .collect()
}

/// A batch of same-class pairs. Rows `2i` and `2i + 1` of `inputs` are the
/// two members of pair `i`.
#[derive(Debug, Clone)]
pub struct PairBatch {
    /// `(row a, row b, class)` indices into the task's training set.
    pub pairs: Vec<(usize, usize, usize)>,
    pub inputs: Array2<f64>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Draws same-class pairs from one sample set.
#[derive(Debug, Clone)]
pub struct PairSampler<'a> {
    samples: &'a Samples,
    classes: Vec<Vec<usize>>,
}

impl<'a> PairSampler<'a> {
    pub fn new(samples: &'a Samples) -> Result<Self> {
        let index = samples.class_index();
        if index.is_empty() {
            return Err(Error::Empty("no samples to pair".into()));
        }
        for (&class, rows) in &index {
            if rows.len() < 2 {
                return Err(Error::ClassTooSmall {
                    class,
                    count: rows.len(),
                    required: 2,
                });
            }
        }
        Ok(Self {
            samples,
            classes: index.into_values().collect(),
        })
    }

    /// `n_pairs` pairs: class uniform, then two distinct members of it.
    pub fn sample(&self, n_pairs: usize, rng: &mut Rng) -> PairBatch {
        let mut pairs = Vec::with_capacity(n_pairs);
        let mut rows = Vec::with_capacity(2 * n_pairs);
        for _ in 0..n_pairs {
            let members = &self.classes[rng.below(self.classes.len())];
            let a = rng.below(members.len());
            let mut b = rng.below(members.len() - 1);
            if b >= a {
                b += 1;
            }
            let (ra, rb) = (members[a], members[b]);
            pairs.push((ra, rb, self.samples.labels()[ra]));
            rows.push(ra);
            rows.push(rb);
        }
        PairBatch {
            pairs,
            inputs: self.samples.gather_inputs(&rows),
        }
    }
}

pub fn sample_pairs(task: &TaskDataset, n_pairs: usize, rng: &mut Rng) -> Result<PairBatch> {
    Ok(PairSampler::new(&task.train)?.sample(n_pairs, rng))
}
