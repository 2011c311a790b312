//! JSON experiment configuration. Every field has a default, so `{}` is a
//! valid config; unknown fields are rejected.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::bench::{BlobSpec, Metric, ModelConfig};
use crate::error::{Error, Result};
use crate::mmd::{KernelSpec, MmdView};
use crate::nnet::ScoreOptions;
use crate::perceptron::MaxMarginConfig;
use crate::sampler::HardMode;
use crate::theory::SaddleOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    SimRandom,
    SimHard,
    SimBiased,
    TheoryCurve,
    MmdOrdering,
    BenchE2e,
    ScoreDataset,
}

/// Subset-selection setting of a simulation cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Random,
    Hard,
    Biased,
}

impl Setting {
    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Random => "random",
            Setting::Hard => "hard",
            Setting::Biased => "biased",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaxMarginOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for MaxMarginOptions {
    fn default() -> Self {
        let c = MaxMarginConfig::default();
        Self {
            tol: c.tol,
            max_iter: c.max_iter,
        }
    }
}

impl MaxMarginOptions {
    pub fn to_config(&self) -> MaxMarginConfig {
        MaxMarginConfig {
            tol: self.tol,
            max_iter: self.max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    /// Fraction `P/N` of the pool that is kept.
    pub keep_fraction: f64,
    /// When set, the curve is the hard-selection prediction for a pool of
    /// `pool_alpha·d` samples (keep fraction `α/pool_alpha` per point).
    pub pool_alpha: Option<f64>,
    /// Geometric grid used instead of the top-level `alphas` when all three
    /// are set.
    pub alpha_min: Option<f64>,
    pub alpha_max: Option<f64>,
    pub points: Option<usize>,
    pub options: SaddleOptions,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            keep_fraction: 1.0,
            pool_alpha: None,
            alpha_min: None,
            alpha_max: None,
            points: None,
            options: SaddleOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundConfig {
    pub margin: f64,
    pub c: f64,
    pub h_size: f64,
    pub delta: f64,
    pub eps_alpha: f64,
    pub eps_h: f64,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            margin: 3.0,
            c: 1.0,
            h_size: 1.0,
            delta: 0.05,
            eps_alpha: 0.0,
            eps_h: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MmdConfig {
    pub d: usize,
    pub n: usize,
    #[serde(rename = "P")]
    pub p: usize,
    pub trials: usize,
    pub thetas_deg: Vec<f64>,
    pub kernel: KernelSpec,
    pub view: MmdView,
    pub balanced: bool,
    pub max_rows: usize,
    /// Adds the itemized bound terms per angle.
    pub bound: Option<BoundConfig>,
}

impl Default for MmdConfig {
    fn default() -> Self {
        Self {
            d: 20,
            n: 5000,
            p: 50,
            trials: 20,
            thetas_deg: vec![0.0, 30.0, 60.0, 85.0],
            kernel: KernelSpec::rbf_median(),
            view: MmdView::SignedInputs,
            balanced: false,
            max_rows: 20_000,
            bound: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Synthetic task used when no `input_csv` is given.
    pub blob: BlobSpec,
    pub input_csv: Option<PathBuf>,
    pub label_column: String,
    pub standardize: bool,
    /// Share of an ingested file held out as the test split.
    pub test_fraction: f64,
    pub metrics: Vec<Metric>,
    pub ks: Vec<usize>,
    pub predictor: ModelConfig,
    pub student: ModelConfig,
    pub student_seeds: Vec<u64>,
    pub at_init: bool,
    pub score: ScoreOptions,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            blob: BlobSpec::default(),
            input_csv: None,
            label_column: "label".into(),
            standardize: false,
            test_fraction: 0.2,
            metrics: vec![Metric::Loss, Metric::Gradnorm],
            ks: vec![16],
            predictor: ModelConfig::predictor_default(),
            student: ModelConfig::student_default(),
            student_seeds: vec![0, 1, 2],
            at_init: false,
            score: ScoreOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Option<ExperimentKind>,
    pub d: usize,
    /// Pool size; `50·d` when absent.
    #[serde(rename = "N")]
    pub n: Option<usize>,
    pub alphas: Vec<f64>,
    /// Simulation settings; derived from `experiment` when empty.
    pub settings: Vec<Setting>,
    pub thetas_deg: Vec<f64>,
    pub hard_mode: HardMode,
    pub balanced: bool,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Worker threads for sweeps; `1` gives the canonical sequential run.
    pub workers: Option<usize>,
    pub max_margin: MaxMarginOptions,
    pub theory: TheoryConfig,
    pub mmd: MmdConfig,
    pub bench: BenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: None,
            d: 200,
            n: None,
            alphas: vec![0.2, 0.5, 1.0, 2.0, 5.0],
            settings: Vec::new(),
            thetas_deg: vec![20.0, 40.0, 60.0],
            hard_mode: HardMode::Smallest,
            balanced: false,
            seeds: (0..20).collect(),
            output_dir: PathBuf::from("hardbench-out"),
            workers: None,
            max_margin: MaxMarginOptions::default(),
            theory: TheoryConfig::default(),
            mmd: MmdConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

/// `points` values spaced geometrically from `lo` to `hi` inclusive.
pub fn geometric_grid(lo: f64, hi: f64, points: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi > lo) || points < 2 {
        return Err(Error::Config(format!(
            "alpha grid needs 0 < alpha-min < alpha-max and at least 2 points, got {lo}, {hi}, {points}"
        )));
    }
    let ratio = (hi / lo).ln() / (points - 1) as f64;
    Ok((0..points)
        .map(|i| {
            if i + 1 == points {
                hi
            } else {
                lo * (ratio * i as f64).exp()
            }
        })
        .collect())
}

pub(crate) fn check_grid(name: &str, grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config(format!("{name} must not be empty")));
    }
    if grid.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
        return Err(Error::Config(format!("{name} must be finite and positive")));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(format!("{name} must be strictly increasing")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn pool_size(&self) -> usize {
        self.n.unwrap_or(50 * self.d)
    }

    /// Settings to simulate: the explicit list, else what `experiment` implies.
    pub fn effective_settings(&self) -> Vec<Setting> {
        if !self.settings.is_empty() {
            let mut s = self.settings.clone();
            s.sort();
            s.dedup();
            return s;
        }
        match self.experiment {
            Some(ExperimentKind::SimRandom) => vec![Setting::Random],
            Some(ExperimentKind::SimBiased) => vec![Setting::Random, Setting::Biased],
            _ => vec![Setting::Random, Setting::Hard],
        }
    }

    /// The theory grid: the explicit geometric grid if configured, else `alphas`.
    pub fn theory_alphas(&self) -> Result<Vec<f64>> {
        match (self.theory.alpha_min, self.theory.alpha_max, self.theory.points) {
            (Some(lo), Some(hi), Some(n)) => geometric_grid(lo, hi, n),
            (None, None, None) => Ok(self.alphas.clone()),
            _ => Err(Error::Config(
                "alpha-min, alpha-max and points must be given together".into(),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("d must be >= 1".into()));
        }
        check_grid("alphas", &self.alphas)?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        if self.thetas_deg.iter().any(|t| !(0.0..=90.0).contains(t)) {
            return Err(Error::Config("thetas_deg must lie in [0, 90]".into()));
        }
        if self.mmd.thetas_deg.iter().any(|t| !(0.0..=90.0).contains(t)) {
            return Err(Error::Config("mmd.thetas_deg must lie in [0, 90]".into()));
        }
        if self.mmd.trials == 0 || self.mmd.p < 2 {
            return Err(Error::Config("mmd needs trials >= 1 and P >= 2".into()));
        }
        if !(self.max_margin.tol > 0.0) {
            return Err(Error::Config("max_margin.tol must be > 0".into()));
        }
        if self.bench.ks.is_empty() || self.bench.ks.contains(&0) {
            return Err(Error::Config("bench.ks must be non-empty and >= 1".into()));
        }
        if self.bench.metrics.is_empty() {
            return Err(Error::Config("bench.metrics must not be empty".into()));
        }
        if self.bench.student_seeds.is_empty() {
            return Err(Error::Config("bench.student_seeds must not be empty".into()));
        }
        if !(self.bench.test_fraction > 0.0 && self.bench.test_fraction < 1.0) {
            return Err(Error::Config("bench.test_fraction must be in (0, 1)".into()));
        }
        self.theory_alphas().and_then(|a| check_grid("theory alphas", &a))?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn sha256(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let c = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.pool_size(), 10_000);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"dd": 3}"#).is_err());
    }

    #[test]
    fn grid_validation() {
        let mut c = ExperimentConfig::default();
        c.alphas = vec![1.0, 1.0];
        assert!(c.validate().is_err());
        c.alphas = vec![0.0, 1.0];
        assert!(c.validate().is_err());
        c.alphas = vec![1.0];
        c.seeds.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn geometric_grid_endpoints() {
        let g = geometric_grid(0.5, 8.0, 12).unwrap();
        assert_eq!(g.len(), 12);
        assert_eq!(g[0], 0.5);
        assert_eq!(g[11], 8.0);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        assert!(geometric_grid(1.0, 1.0, 3).is_err());
    }

    #[test]
    fn settings_follow_experiment() {
        let mut c = ExperimentConfig::default();
        c.experiment = Some(ExperimentKind::SimBiased);
        assert_eq!(c.effective_settings(), vec![Setting::Random, Setting::Biased]);
        c.settings = vec![Setting::Hard, Setting::Random, Setting::Hard];
        assert_eq!(c.effective_settings(), vec![Setting::Random, Setting::Hard]);
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.sha256().unwrap(), b.sha256().unwrap());
        b.seeds = vec![7];
        assert_ne!(a.sha256().unwrap(), b.sha256().unwrap());
    }
}
