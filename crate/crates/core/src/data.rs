//! Domain types shared across the crate: instances with expert annotations,
//! datasets, logit vectors, and the CSV interchange format.
//!
//! A dataset row is `x_0,...,x_{d-1},y,m`: the feature vector, the true
//! label, and the expert's prediction. Class indices are 0-based.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Slack added before flooring `fraction * n`, so that products such as
/// `0.29 * 100 = 28.999999999999996` count as 29.
const FLOOR_SLACK: f64 = 1e-9;

/// `⌊fraction · n⌋`, tolerant of representation error in `fraction`.
pub fn floor_count(fraction: f64, n: usize) -> usize {
    let raw = (fraction * n as f64 + FLOOR_SLACK).floor();
    (raw.max(0.0) as usize).min(n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub features: Vec<f64>,
    pub label: usize,
    pub expert_pred: usize,
}

impl Instance {
    pub fn new(features: Vec<f64>, label: usize, expert_pred: usize) -> Self {
        Self {
            features,
            label,
            expert_pred,
        }
    }

    pub fn expert_correct(&self) -> bool {
        self.label == self.expert_pred
    }
}

/// A validated collection of instances sharing a class count `K` and a
/// feature dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    instances: Vec<Instance>,
    num_classes: usize,
    dim: usize,
}

impl Dataset {
    pub fn new(instances: Vec<Instance>, num_classes: usize, dim: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        for (i, inst) in instances.iter().enumerate() {
            check_instance(inst, num_classes, dim)
                .map_err(|msg| Error::Argument(format!("instance {i}: {msg}")))?;
        }
        Ok(Self {
            instances,
            num_classes,
            dim,
        })
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Builds a dataset from a subset of rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            instances: indices.iter().map(|&i| self.instances[i].clone()).collect(),
            num_classes: self.num_classes,
            dim: self.dim,
        }
    }

    /// Fraction of rows on which the expert's prediction matches the label.
    pub fn expert_accuracy(&self) -> f64 {
        if self.instances.is_empty() {
            return 0.0;
        }
        let correct = self.instances.iter().filter(|i| i.expert_correct()).count();
        correct as f64 / self.instances.len() as f64
    }

    pub(crate) fn require_non_empty(&self) -> Result<()> {
        if self.instances.is_empty() {
            Err(Error::EmptyDataset)
        } else {
            Ok(())
        }
    }
}

fn check_instance(inst: &Instance, num_classes: usize, dim: usize) -> std::result::Result<(), String> {
    if inst.features.len() != dim {
        return Err(format!(
            "expected {dim} features, found {}",
            inst.features.len()
        ));
    }
    if inst.label >= num_classes {
        return Err(format!("label {} out of range for K={num_classes}", inst.label));
    }
    if inst.expert_pred >= num_classes {
        return Err(format!(
            "expert prediction {} out of range for K={num_classes}",
            inst.expert_pred
        ));
    }
    Ok(())
}

/// The `K` class scores and the deferral score produced for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector {
    pub class_scores: Vec<f64>,
    pub defer_score: f64,
}

impl LogitVector {
    pub fn new(class_scores: Vec<f64>, defer_score: f64) -> Result<Self> {
        if class_scores.is_empty() {
            return Err(Error::Argument("logit vector needs at least one class".into()));
        }
        if !defer_score.is_finite() || class_scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("logits must be finite".into()));
        }
        Ok(Self {
            class_scores,
            defer_score,
        })
    }

    /// Splits a raw `K+1` output row; the last entry is the deferral score.
    pub fn from_outputs(outputs: &[f64]) -> Result<Self> {
        match outputs.split_last() {
            Some((&defer, classes)) => Self::new(classes.to_vec(), defer),
            None => Err(Error::Argument("empty output vector".into())),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_scores.len()
    }

    /// All `K+1` scores, deferral score last.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.class_scores.clone();
        v.push(self.defer_score);
        v
    }

    /// Score at augmented index `j`, where `j == K` is the deferral score.
    pub fn get(&self, j: usize) -> f64 {
        if j == self.class_scores.len() {
            self.defer_score
        } else {
            self.class_scores[j]
        }
    }

    pub fn shifted(&self, c: f64) -> LogitVector {
        LogitVector {
            class_scores: self.class_scores.iter().map(|v| v + c).collect(),
            defer_score: self.defer_score + c,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Options for reading the dataset CSV.
#[derive(Debug, Clone, Copy, Default)]
pub struct CsvOptions {
    /// Skip one header line.
    pub header: bool,
}

pub fn load_dataset(path: impl AsRef<Path>, num_classes: usize) -> Result<Dataset> {
    load_dataset_with(path, num_classes, CsvOptions::default())
}

pub fn load_dataset_with(
    path: impl AsRef<Path>,
    num_classes: usize,
    opts: CsvOptions,
) -> Result<Dataset> {
    let path = path.as_ref();
    if num_classes == 0 {
        return Err(Error::Config("num_classes must be positive".into()));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(opts.header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut instances = Vec::new();
    let mut dim: Option<usize> = None;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() < 3 {
            return Err(parse_err(
                line,
                format!("expected at least 3 fields (features, y, m), found {}", record.len()),
            ));
        }
        let d = record.len() - 2;
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(parse_err(
                    line,
                    format!("feature count mismatch: expected {expected}, found {d}"),
                ))
            }
            _ => {}
        }
        let mut features = Vec::with_capacity(d);
        for (j, field) in record.iter().take(d).enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(line, format!("feature {j}: not a number: {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("feature {j}: non-finite value")));
            }
            features.push(v);
        }
        let parse_class = |field: &str, what: &str| -> Result<usize> {
            let v: usize = field
                .parse()
                .map_err(|_| parse_err(line, format!("{what}: not a class index: {field:?}")))?;
            if v >= num_classes {
                return Err(parse_err(
                    line,
                    format!("{what} {v} out of range for K={num_classes}"),
                ));
            }
            Ok(v)
        };
        let label = parse_class(&record[d], "label")?;
        let expert_pred = parse_class(&record[d + 1], "expert prediction")?;
        instances.push(Instance::new(features, label, expert_pred));
    }

    let dim = dim.ok_or(Error::EmptyDataset)?;
    Ok(Dataset {
        instances,
        num_classes,
        dim,
    })
}

/// Writes the dataset as headerless CSV. Floats use the shortest
/// representation that parses back to the same value.
pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_dataset(dataset, &mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_dataset<W: Write>(dataset: &Dataset, out: &mut W) -> std::io::Result<()> {
    for inst in &dataset.instances {
        for v in &inst.features {
            write!(out, "{v},")?;
        }
        writeln!(out, "{},{}", inst.label, inst.expert_pred)?;
    }
    Ok(())
}

/// Shuffles row indices with a seeded generator and cuts them into
/// train/validation/test. Validation and test get `⌊f·N⌋` rows; the
/// remainder goes to train.
pub fn split_dataset(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<DataSplit> {
    if fractions.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
        return Err(Error::Config(format!(
            "split fractions must be positive, got {fractions:?}"
        )));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must sum to 1, got {sum}"
        )));
    }
    let n = dataset.len();
    if n < 3 {
        return Err(Error::Config(format!(
            "need at least 3 rows to split, got {n}"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let n_val = floor_count(fractions[1], n);
    let n_test = floor_count(fractions[2], n);
    let n_train = n - n_val - n_test;

    let (train_idx, rest) = order.split_at(n_train);
    let (val_idx, test_idx) = rest.split_at(n_val);
    Ok(DataSplit {
        train: dataset.subset(train_idx),
        validation: dataset.subset(val_idx),
        test: dataset.subset(test_idx),
    })
}
