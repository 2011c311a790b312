//! Labelled datasets with ±1 labels, teacher-driven generation, CSV
//! ingestion and subset views.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perceptron::Perceptron;
use crate::rng::{stream_rng, Stream};

/// Sign with ties resolved to `+1`.
#[inline]
pub fn sign(v: f64) -> i8 {
    if v >= 0.0 {
        1
    } else {
        -1
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-major feature matrix with one ±1 label per row. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    d: usize,
    features: Vec<f64>,
    labels: Vec<i8>,
}

impl LabeledDataset {
    pub fn new(d: usize, features: Vec<f64>, labels: Vec<i8>) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidArgument("dimension d must be >= 1".into()));
        }
        if labels.is_empty() {
            return Err(Error::InvalidArgument("dataset needs at least one row".into()));
        }
        if features.len() != d * labels.len() {
            return Err(Error::DimensionMismatch {
                expected: d * labels.len(),
                got: features.len(),
            });
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 1 && y != -1) {
            return Err(Error::InvalidArgument(format!("label {bad} is not +1 or -1")));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "feature at row {}, column {}",
                pos / d,
                pos % d
            )));
        }
        Ok(Self { d, features, labels })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn label(&self, i: usize) -> i8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[i8] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.features.chunks_exact(self.d)
    }

    /// Rows multiplied by their label, `y_i * x_i`, flattened row-major.
    pub fn signed_features(&self) -> Vec<f64> {
        self.rows()
            .zip(&self.labels)
            .flat_map(|(row, &y)| row.iter().map(move |v| v * f64::from(y)))
            .collect()
    }

    /// Row indices grouped by label, labels in ascending order (−1 first).
    pub fn indices_by_label(&self) -> BTreeMap<i8, Vec<usize>> {
        let mut map: BTreeMap<i8, Vec<usize>> = BTreeMap::new();
        for (i, &y) in self.labels.iter().enumerate() {
            map.entry(y).or_default().push(i);
        }
        map
    }

    /// Teacher margins `y_i * (T · x_i)` for a unit-norm teacher.
    pub fn teacher_margins(&self, teacher: &Perceptron) -> Result<Vec<f64>> {
        teacher.check_dim(self.d)?;
        Ok(self
            .rows()
            .zip(&self.labels)
            .map(|(x, &y)| f64::from(y) * dot(teacher.weights(), x))
            .collect())
    }

    /// Writes the dataset as CSV with columns `x0..x{d-1}` and `label_column`.
    pub fn write_csv<W: Write>(&self, writer: W, label_column: &str) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.d).map(|j| format!("x{j}")).collect();
        header.push(label_column.to_string());
        w.write_record(&header)?;
        for (row, y) in self.rows().zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(y.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn export_csv(&self, path: impl AsRef<Path>, label_column: &str) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file), label_column)
    }
}

/// Draws `n` standard Gaussian rows in `d` dimensions and labels them with
/// `sign(T · x)`.
pub fn generate_teacher_dataset(d: usize, n: usize, teacher: &Perceptron, seed: u64) -> Result<LabeledDataset> {
    teacher.check_dim(d)?;
    if n == 0 {
        return Err(Error::InvalidArgument("N must be >= 1".into()));
    }
    let mut rng = stream_rng(seed, Stream::Features);
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let start = features.len();
        features.extend((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        labels.push(sign(dot(teacher.weights(), &features[start..])));
    }
    LabeledDataset::new(d, features, labels)
}

/// How a subset was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    RandomPerLabel,
    HardMargin,
    Biased,
    LossTopk,
    GradnormTopk,
    NtkDiagTopk,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::RandomPerLabel => "random_per_label",
            Strategy::HardMargin => "hard_margin",
            Strategy::Biased => "biased",
            Strategy::LossTopk => "loss_topk",
            Strategy::GradnormTopk => "gradnorm_topk",
            Strategy::NtkDiagTopk => "ntk_diag_topk",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Ordered index set into a parent dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetSelection {
    pub strategy: Strategy,
    #[serde(rename = "P")]
    pub p: usize,
    pub seed: u64,
    pub theta: Option<f64>,
    pub indices: Vec<usize>,
}

impl SubsetSelection {
    /// Builds a selection, rejecting duplicate indices.
    pub fn new(strategy: Strategy, seed: u64, theta: Option<f64>, indices: Vec<usize>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        if let Some(dup) = indices.iter().find(|&&i| !seen.insert(i)) {
            return Err(Error::InvalidArgument(format!("duplicate index {dup} in selection")));
        }
        Ok(Self {
            strategy,
            p: indices.len(),
            seed,
            theta,
            indices,
        })
    }

    pub fn validate_for(&self, n: usize) -> Result<()> {
        if self.p != self.indices.len() {
            return Err(Error::InvalidArgument(format!(
                "selection declares P = {} but holds {} indices",
                self.p,
                self.indices.len()
            )));
        }
        if let Some(&bad) = self.indices.iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange { index: bad, len: n });
        }
        Ok(())
    }

    /// Count of selected rows per label.
    pub fn label_counts(&self, ds: &LabeledDataset) -> BTreeMap<i8, usize> {
        let mut counts = BTreeMap::new();
        for &i in &self.indices {
            *counts.entry(ds.label(i)).or_insert(0) += 1;
        }
        counts
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let sel: SubsetSelection = serde_json::from_str(s)?;
        Self::new(sel.strategy, sel.seed, sel.theta, sel.indices)
    }
}

/// Rows of `ds` at the given positions, in order.
pub fn take_indices(ds: &LabeledDataset, indices: &[usize]) -> Result<LabeledDataset> {
    let d = ds.d();
    let mut features = Vec::with_capacity(indices.len() * d);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        if i >= ds.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: ds.len(),
            });
        }
        features.extend_from_slice(ds.row(i));
        labels.push(ds.label(i));
    }
    LabeledDataset::new(d, features, labels)
}

pub fn take_subset(ds: &LabeledDataset, sel: &SubsetSelection) -> Result<LabeledDataset> {
    sel.validate_for(ds.len())?;
    take_indices(ds, &sel.indices)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IngestOptions {
    /// Rescale every feature column to zero mean and unit variance.
    pub standardize: bool,
}

/// Reads a CSV file with a header row. Every column other than
/// `label_column` must be numeric. The two label values are mapped to −1/+1
/// in lexicographic order.
pub fn ingest_csv(path: impl AsRef<Path>, label_column: &str, opts: IngestOptions) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_csv_reader(file, label_column, opts)
}

pub fn ingest_csv_reader<R: Read>(reader: R, label_column: &str, opts: IngestOptions) -> Result<LabeledDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::MissingColumn(label_column.to_string()))?;
    let d = headers.len() - 1;

    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        for (col, cell) in record.iter().enumerate() {
            if col == label_idx {
                raw_labels.push(cell.trim().to_string());
                continue;
            }
            let v: f64 = cell.trim().parse().map_err(|_| Error::NonNumericCell {
                row,
                column: headers[col].to_string(),
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonNumericCell {
                    row,
                    column: headers[col].to_string(),
                    value: cell.to_string(),
                });
            }
            features.push(v);
        }
    }

    let distinct: BTreeSet<&str> = raw_labels.iter().map(String::as_str).collect();
    if distinct.len() != 2 {
        return Err(Error::LabelValues {
            values: distinct.into_iter().map(str::to_string).collect(),
        });
    }
    let negative = *distinct.iter().next().expect("two values");
    let labels = raw_labels
        .iter()
        .map(|v| if v == negative { -1 } else { 1 })
        .collect::<Vec<i8>>();

    if opts.standardize {
        standardize_columns(&mut features, d);
    }
    LabeledDataset::new(d, features, labels)
}

fn standardize_columns(features: &mut [f64], d: usize) {
    let n = features.len() / d;
    if n == 0 {
        return;
    }
    for j in 0..d {
        let mean = (0..n).map(|i| features[i * d + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (features[i * d + j] - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        for i in 0..n {
            let v = &mut features[i * d + j];
            *v -= mean;
            if std > 0.0 {
                *v /= std;
            }
        }
    }
}
