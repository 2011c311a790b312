//! Hard-Bench construction: score every sample with an early-stopped
//! predictor, keep the `k` hardest per label, and compare a freshly trained
//! model against Random-Bench baselines.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{dot, take_subset, LabeledDataset, Strategy, SubsetSelection};
use crate::error::{Error, Result};
use crate::nnet::{self, Activation, DifficultyScore, EvalMetrics, MlpModel, ScoreOptions, TrainConfig};
use crate::perceptron::{train_max_margin, MaxMarginConfig, Perceptron};
use crate::rng::{derive_seed, stream_rng, Stream};

/// Difficulty score that drives the top-k selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Loss,
    /// Norm of the loss gradient with respect to the parameters.
    Gradnorm,
    /// Squared norm of the output gradient (empirical NTK diagonal).
    NtkDiag,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Loss => "loss",
            Metric::Gradnorm => "gradnorm",
            Metric::NtkDiag => "ntk_diag",
        }
    }

    pub fn strategy(self) -> Strategy {
        match self {
            Metric::Loss => Strategy::LossTopk,
            Metric::Gradnorm => Strategy::GradnormTopk,
            Metric::NtkDiag => Strategy::NtkDiagTopk,
        }
    }

    pub fn value(self, s: &DifficultyScore) -> f64 {
        match self {
            Metric::Loss => s.loss_score,
            Metric::Gradnorm => s.gradnorm,
            Metric::NtkDiag => s.ntk_diag,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Network family shared by the predictor and the evaluated students.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_hidden: usize,
    pub activation: Activation,
    pub train: TrainConfig,
}

impl ModelConfig {
    pub fn predictor_default() -> Self {
        Self {
            d_hidden: 64,
            activation: Activation::Tanh,
            train: TrainConfig {
                epochs: 1,
                lr: 0.1,
                batch_size: 32,
            },
        }
    }

    pub fn student_default() -> Self {
        Self {
            d_hidden: 64,
            activation: Activation::Tanh,
            train: TrainConfig {
                epochs: 100,
                lr: 0.1,
                batch_size: 8,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub metric: Metric,
    /// Examples per label.
    pub k: usize,
    pub predictor: ModelConfig,
    /// Score at the untrained initialization instead of after training.
    #[serde(default)]
    pub at_init: bool,
    #[serde(default)]
    pub score: ScoreOptions,
}

impl BenchSpec {
    pub fn new(metric: Metric, k: usize) -> Self {
        Self {
            metric,
            k,
            predictor: ModelConfig::predictor_default(),
            at_init: false,
            score: ScoreOptions::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        if self.predictor.train.epochs == 0 {
            return Err(Error::InvalidArgument("predictor epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Trains (unless `at_init`) the predictor on `ds` and scores every row.
pub fn score_with_predictor(
    ds: &LabeledDataset,
    spec: &BenchSpec,
    seed: u64,
) -> Result<(MlpModel, Vec<DifficultyScore>)> {
    spec.validate()?;
    let init = MlpModel::init(ds.d(), spec.predictor.d_hidden, 2, spec.predictor.activation, seed)?;
    let model = if spec.at_init {
        init
    } else {
        nnet::train(&init, ds, &spec.predictor.train, seed)?
    };
    let scores = nnet::score_dataset(&model, ds, &spec.score)?;
    Ok((model, scores))
}

fn check_label_sizes(groups: &BTreeMap<i8, Vec<usize>>, k: usize) -> Result<()> {
    for (&label, members) in groups {
        if members.len() < k {
            return Err(Error::LabelTooSmall {
                label,
                available: members.len(),
                k,
            });
        }
    }
    Ok(())
}

/// Per label (ascending), the `k` highest-scoring rows by descending score,
/// ties broken by ascending index.
pub fn select_top_k(labels: &[i8], scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if labels.len() != scores.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: scores.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("score of row {i}")));
    }
    let mut groups: BTreeMap<i8, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        groups.entry(y).or_default().push(i);
    }
    check_label_sizes(&groups, k)?;
    let mut out = Vec::with_capacity(k * groups.len());
    for (_, mut members) in groups {
        members.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        out.extend_from_slice(&members[..k]);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardBench {
    pub selection: SubsetSelection,
    pub predictor_seed: u64,
    pub predictor: MlpModel,
}

/// Algorithm: train the predictor, score all rows, keep the top `k` per label.
pub fn build_hard_bench(ds: &LabeledDataset, spec: &BenchSpec, seed: u64) -> Result<HardBench> {
    spec.validate()?;
    check_label_sizes(&ds.indices_by_label(), spec.k)?;
    let (predictor, scores) = score_with_predictor(ds, spec, seed)?;
    let values: Vec<f64> = scores.iter().map(|s| spec.metric.value(s)).collect();
    let indices = select_top_k(ds.labels(), &values, spec.k)?;
    Ok(HardBench {
        selection: SubsetSelection::new(spec.metric.strategy(), seed, None, indices)?,
        predictor_seed: seed,
        predictor,
    })
}

/// Selections for several `k` from one set of scores.
pub fn hard_bench_sweep(
    ds: &LabeledDataset,
    spec: &BenchSpec,
    ks: &[usize],
    seed: u64,
) -> Result<Vec<SubsetSelection>> {
    spec.validate()?;
    let groups = ds.indices_by_label();
    for &k in ks {
        check_label_sizes(&groups, k)?;
    }
    let (_, scores) = score_with_predictor(ds, spec, seed)?;
    let values: Vec<f64> = scores.iter().map(|s| spec.metric.value(s)).collect();
    ks.iter()
        .map(|&k| {
            SubsetSelection::new(
                spec.metric.strategy(),
                seed,
                None,
                select_top_k(ds.labels(), &values, k)?,
            )
        })
        .collect()
}

/// `k` uniform rows per label (ascending label order), one selection per seed.
pub fn build_random_bench(ds: &LabeledDataset, k: usize, seeds: &[u64]) -> Result<Vec<SubsetSelection>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let groups = ds.indices_by_label();
    check_label_sizes(&groups, k)?;
    seeds
        .iter()
        .map(|&seed| {
            let mut rng = stream_rng(seed, Stream::Sampling);
            let mut indices = Vec::with_capacity(k * groups.len());
            for members in groups.values() {
                indices.extend(
                    index::sample(&mut rng, members.len(), k)
                        .into_iter()
                        .map(|j| members[j]),
                );
            }
            SubsetSelection::new(Strategy::RandomPerLabel, seed, None, indices)
        })
        .collect()
}

/// Fails if any index appears in both lists.
pub fn check_disjoint(train: &[usize], test: &[usize]) -> Result<()> {
    let set: std::collections::BTreeSet<usize> = train.iter().copied().collect();
    if let Some(i) = test.iter().find(|i| set.contains(i)) {
        return Err(Error::InvalidArgument(format!(
            "row {i} is in both the training subset and the test set"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchMetrics {
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub per_seed: Vec<EvalMetrics>,
}

/// Trains a fresh model per seed on `train` and averages test metrics.
/// Student initializations are derived from, never equal to, the seeds so
/// they cannot coincide with a predictor initialized from the same seed.
pub fn evaluate_bench(
    train: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &ModelConfig,
    seeds: &[u64],
) -> Result<BenchMetrics> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("evaluate_bench needs at least one seed".into()));
    }
    if train.d() != test.d() {
        return Err(Error::DimensionMismatch {
            expected: train.d(),
            got: test.d(),
        });
    }
    let per_seed: Vec<EvalMetrics> = seeds
        .par_iter()
        .map(|&seed| {
            let s = derive_seed(seed, &[0x57]);
            let init = MlpModel::init(train.d(), cfg.d_hidden, 2, cfg.activation, s)?;
            let model = nnet::train(&init, train, &cfg.train, s)?;
            nnet::evaluate(&model, test)
        })
        .collect::<Result<_>>()?;
    let n = per_seed.len() as f64;
    Ok(BenchMetrics {
        test_accuracy: per_seed.iter().map(|m| m.accuracy).sum::<f64>() / n,
        test_loss: per_seed.iter().map(|m| m.loss).sum::<f64>() / n,
        per_seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub d: usize,
    pub n_per_class: usize,
    pub n_test_per_class: usize,
    /// Distance between the two class centers.
    pub separation: f64,
    /// Share of each class drawn around the other class's center.
    pub outlier_fraction: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            d: 10,
            n_per_class: 500,
            n_test_per_class: 500,
            separation: 4.0,
            outlier_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlobTask {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    /// `true` for training rows that sit in the other class's blob.
    pub outlier: Vec<bool>,
}

/// Two unit-variance Gaussian blobs centered at `±separation/2` on the
/// first axis. In the training split the first `outlier_fraction` of each
/// class is drawn around the opposite center; the test split is clean.
/// Rows alternate labels `+1, −1`.
pub fn blob_with_outliers(spec: &BlobSpec, seed: u64) -> Result<BlobTask> {
    if spec.d == 0 || spec.n_per_class == 0 || spec.n_test_per_class == 0 {
        return Err(Error::InvalidArgument("blob sizes must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&spec.outlier_fraction) {
        return Err(Error::InvalidArgument(format!(
            "outlier_fraction must be in [0, 1), got {}",
            spec.outlier_fraction
        )));
    }
    let n_out = (spec.outlier_fraction * spec.n_per_class as f64).round() as usize;
    let half = spec.separation / 2.0;
    let draw = |n: usize, outliers: usize, stream_seed: u64| -> Result<(LabeledDataset, Vec<bool>)> {
        let mut rng = stream_rng(stream_seed, Stream::Features);
        let mut features = Vec::with_capacity(2 * n * spec.d);
        let mut labels = Vec::with_capacity(2 * n);
        let mut flags = Vec::with_capacity(2 * n);
        for i in 0..n {
            for y in [1i8, -1] {
                let is_out = i < outliers;
                let center = if is_out {
                    -f64::from(y) * half
                } else {
                    f64::from(y) * half
                };
                for j in 0..spec.d {
                    let z: f64 = rng.sample(StandardNormal);
                    features.push(if j == 0 { center + z } else { z });
                }
                labels.push(y);
                flags.push(is_out);
            }
        }
        Ok((LabeledDataset::new(spec.d, features, labels)?, flags))
    };
    let (train, outlier) = draw(spec.n_per_class, n_out, derive_seed(seed, &[1]))?;
    let (test, _) = draw(spec.n_test_per_class, 0, derive_seed(seed, &[2]))?;
    Ok(BlobTask { train, test, outlier })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    /// `hard` or `random`.
    pub bench_type: String,
    pub metric: Option<Metric>,
    pub k: usize,
    pub seed: u64,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub selection: SubsetSelection,
    pub student_seeds: Vec<u64>,
}

impl BenchResult {
    pub fn metric_label(&self) -> &'static str {
        self.metric.map_or("none", Metric::as_str)
    }
}

pub fn write_results_csv<W: std::io::Write>(results: &[BenchResult], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["bench_type", "metric", "k", "seed", "test_accuracy", "test_loss"])?;
    for r in results {
        w.write_record([
            r.bench_type.clone(),
            r.metric_label().to_string(),
            r.k.to_string(),
            r.seed.to_string(),
            r.test_accuracy.to_string(),
            r.test_loss.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

/// One seed of the full pipeline: hard selections for each metric and each
/// `k`, and a Random-Bench selection per `k`, each evaluated on `test`.
pub fn run_bench_seed(
    train: &LabeledDataset,
    test: &LabeledDataset,
    metrics: &[Metric],
    ks: &[usize],
    predictor: &ModelConfig,
    student: &ModelConfig,
    student_seeds: &[u64],
    at_init: bool,
    seed: u64,
) -> Result<Vec<BenchResult>> {
    let mut out = Vec::new();
    for &metric in metrics {
        let spec = BenchSpec {
            metric,
            k: ks.iter().copied().max().unwrap_or(1),
            predictor: *predictor,
            at_init,
            score: ScoreOptions::default(),
        };
        let sels = hard_bench_sweep(train, &spec, ks, seed)?;
        for (sel, &k) in sels.into_iter().zip(ks) {
            let sub = take_subset(train, &sel)?;
            let m = evaluate_bench(&sub, test, student, student_seeds)?;
            out.push(BenchResult {
                bench_type: "hard".into(),
                metric: Some(metric),
                k,
                seed,
                test_accuracy: m.test_accuracy,
                test_loss: m.test_loss,
                selection: sel,
                student_seeds: student_seeds.to_vec(),
            });
        }
    }
    for &k in ks {
        let sel = build_random_bench(train, k, &[seed])?.remove(0);
        let sub = take_subset(train, &sel)?;
        let m = evaluate_bench(&sub, test, student, student_seeds)?;
        out.push(BenchResult {
            bench_type: "random".into(),
            metric: None,
            k,
            seed,
            test_accuracy: m.test_accuracy,
            test_loss: m.test_loss,
            selection: sel,
            student_seeds: student_seeds.to_vec(),
        });
    }
    Ok(out)
}

/// Logistic-loss scores of a linear predictor, `ln(1 + e^{−s·y·J·x})`.
pub fn linear_loss_scores(predictor: &Perceptron, ds: &LabeledDataset, scale: f64) -> Result<Vec<f64>> {
    predictor.check_dim(ds.d())?;
    Ok((0..ds.len())
        .map(|i| {
            let z = -scale * f64::from(ds.label(i)) * dot(predictor.weights(), ds.row(i));
            if z > 0.0 {
                z + (-z).exp().ln_1p()
            } else {
                z.exp().ln_1p()
            }
        })
        .collect())
}

/// Linear stand-in for a network predictor: the max-margin perceptron fit
/// to the network's own predicted labels on `ds`. If those labels are not
/// linearly separable the best iterate is used.
pub fn linear_surrogate(model: &MlpModel, ds: &LabeledDataset, cfg: MaxMarginConfig) -> Result<Perceptron> {
    let labels: Vec<i8> = (0..ds.len())
        .map(|i| model.predict_label(ds.row(i)))
        .collect::<Result<_>>()?;
    let relabeled = LabeledDataset::new(ds.d(), ds.features().to_vec(), labels)?;
    Ok(train_max_margin(&relabeled, cfg)?.student)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasGapReport {
    /// Angle between predictor and teacher.
    pub gamma: f64,
    /// Angle between the subset-trained max-margin student and the teacher.
    pub subset_angle: f64,
    /// `subset_angle / gamma`; absent when `gamma` is degenerate.
    pub ratio: Option<f64>,
    /// The informal prediction `γ/2`, reported for comparison only.
    pub half_gamma: f64,
    pub note: Option<String>,
}

/// Compares the subset-trained student's angle to the teacher with the
/// predictor's own angle `γ`.
pub fn bias_gap_diagnostic(
    teacher: &Perceptron,
    predictor: &Perceptron,
    selection: &SubsetSelection,
    ds: &LabeledDataset,
    cfg: MaxMarginConfig,
) -> Result<BiasGapReport> {
    teacher.check_dim(ds.d())?;
    let gamma = predictor.angle_to(teacher)?;
    let sub = take_subset(ds, selection)?;
    let student = train_max_margin(&sub, cfg)?.student;
    let subset_angle = student.angle_to(teacher)?;
    let degenerate = gamma < 1e-6;
    Ok(BiasGapReport {
        gamma,
        subset_angle,
        ratio: (!degenerate).then(|| subset_angle / gamma),
        half_gamma: gamma / 2.0,
        note: degenerate.then(|| "predictor already converged; no bias expected".to_string()),
    })
}
