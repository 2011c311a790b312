//! Maximum mean discrepancy between empirical samples, the biased-subset
//! ordering experiment, and the computable terms of the distribution-shift
//! generalization bound.

use std::cmp::Ordering;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{dot, LabeledDataset};
use crate::error::{Error, Result};
use crate::perceptron::Perceptron;
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::sampler::sample_biased;

/// Borrowed row-major sample matrix.
#[derive(Debug, Clone, Copy)]
pub struct Samples<'a> {
    data: &'a [f64],
    d: usize,
}

impl<'a> Samples<'a> {
    pub fn new(data: &'a [f64], d: usize) -> Result<Self> {
        if d == 0 || data.len() % d != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} values do not form rows of width {d}",
                data.len()
            )));
        }
        Ok(Self { data, d })
    }

    pub fn n(&self) -> usize {
        self.data.len() / self.d
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeuristicTag {
    #[serde(rename = "median-heuristic")]
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bandwidth {
    Fixed(f64),
    Heuristic(HeuristicTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Rbf,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub bandwidth: Bandwidth,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self::rbf_median()
    }
}

impl KernelSpec {
    pub fn rbf_median() -> Self {
        Self {
            family: KernelFamily::Rbf,
            bandwidth: Bandwidth::Heuristic(HeuristicTag::Median),
        }
    }

    pub fn rbf(sigma: f64) -> Self {
        Self {
            family: KernelFamily::Rbf,
            bandwidth: Bandwidth::Fixed(sigma),
        }
    }

    pub fn linear() -> Self {
        Self {
            family: KernelFamily::Linear,
            bandwidth: Bandwidth::Fixed(1.0),
        }
    }

    /// Fixes the bandwidth; the median heuristic looks at the pooled rows of
    /// `x` and `y`.
    pub fn resolve(&self, x: Samples<'_>, y: Samples<'_>, opts: &MmdOptions) -> Result<ResolvedKernel> {
        match self.family {
            KernelFamily::Linear => Ok(ResolvedKernel::Linear),
            KernelFamily::Rbf => {
                let sigma = match self.bandwidth {
                    Bandwidth::Fixed(s) => s,
                    Bandwidth::Heuristic(HeuristicTag::Median) => {
                        let pooled = pool(x, y)?;
                        median_pairwise_distance(Samples::new(&pooled, x.d())?, opts)?
                    }
                };
                ResolvedKernel::rbf(sigma)
            }
        }
    }
}

/// A kernel with every parameter fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ResolvedKernel {
    Rbf { sigma: f64 },
    Linear,
}

impl ResolvedKernel {
    pub fn rbf(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "rbf bandwidth must be > 0, got {sigma}"
            )));
        }
        Ok(ResolvedKernel::Rbf { sigma })
    }

    #[inline]
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            ResolvedKernel::Rbf { sigma } => {
                let sq: f64 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum();
                (-sq / (2.0 * sigma * sigma)).exp()
            }
            ResolvedKernel::Linear => dot(a, b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdOptions {
    /// Sides with more rows are subsampled (seeded) before any O(n²) work.
    pub max_rows: usize,
    pub seed: u64,
}

impl Default for MmdOptions {
    fn default() -> Self {
        Self {
            max_rows: 20_000,
            seed: 0,
        }
    }
}

fn pool(x: Samples<'_>, y: Samples<'_>) -> Result<Vec<f64>> {
    if x.d() != y.d() {
        return Err(Error::DimensionMismatch {
            expected: x.d(),
            got: y.d(),
        });
    }
    let mut pooled = Vec::with_capacity(x.data.len() + y.data.len());
    pooled.extend_from_slice(x.data);
    pooled.extend_from_slice(y.data);
    Ok(pooled)
}

fn subsample_rows(s: Samples<'_>, max_rows: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, Stream::Subsample);
    let mut picked = index::sample(&mut rng, s.n(), max_rows).into_vec();
    picked.sort_unstable();
    picked.iter().flat_map(|&i| s.row(i).iter().copied()).collect()
}

/// Median of all pairwise Euclidean distances; for an even count the lower
/// of the two central values.
pub fn median_pairwise_distance(s: Samples<'_>, opts: &MmdOptions) -> Result<f64> {
    if s.n() < 2 {
        return Err(Error::InvalidArgument("median heuristic needs at least 2 rows".into()));
    }
    let owned;
    let s = if s.n() > opts.max_rows {
        owned = subsample_rows(s, opts.max_rows, opts.seed);
        Samples::new(&owned, s.d())?
    } else {
        s
    };
    let n = s.n();
    let mut dists: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let a = s.row(i);
            (i + 1..n).map(move |j| {
                let b = s.row(j);
                a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>()
            })
        })
        .collect();
    let mid = (dists.len() - 1) / 2;
    let (_, m, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    let median = m.sqrt();
    if median == 0.0 {
        return Err(Error::Degenerate("median pairwise distance is zero".into()));
    }
    Ok(median)
}

fn self_term(s: Samples<'_>, k: &ResolvedKernel) -> f64 {
    let n = s.n();
    let partial: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let a = s.row(i);
            (i + 1..n).map(|j| k.eval(a, s.row(j))).sum::<f64>()
        })
        .collect();
    2.0 * partial.iter().sum::<f64>() / (n as f64 * (n as f64 - 1.0))
}

fn canonical_order(a: Samples<'_>, b: Samples<'_>) -> Ordering {
    a.n().cmp(&b.n()).then_with(|| {
        a.data
            .iter()
            .zip(b.data)
            .map(|(u, v)| u.to_bits().cmp(&v.to_bits()))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Mean of `k(x, y)` over all pairs, summed in an order that does not depend
/// on which argument comes first.
fn cross_term(x: Samples<'_>, y: Samples<'_>, k: &ResolvedKernel) -> f64 {
    let (outer, inner) = if canonical_order(x, y).is_gt() { (y, x) } else { (x, y) };
    let partial: Vec<f64> = (0..outer.n())
        .into_par_iter()
        .map(|i| {
            let a = outer.row(i);
            (0..inner.n()).map(|j| k.eval(a, inner.row(j))).sum::<f64>()
        })
        .collect();
    partial.iter().sum::<f64>() / (x.n() as f64 * y.n() as f64)
}

/// A fixed reference sample whose self-term is computed once.
#[derive(Debug, Clone)]
pub struct MmdReference {
    data: Vec<f64>,
    d: usize,
    kernel: ResolvedKernel,
    self_term: f64,
}

impl MmdReference {
    pub fn new(y: Samples<'_>, kernel: ResolvedKernel) -> Result<Self> {
        if y.n() < 2 {
            return Err(Error::InvalidArgument("MMD needs at least 2 rows per side".into()));
        }
        Ok(Self {
            self_term: self_term(y, &kernel),
            data: y.data.to_vec(),
            d: y.d(),
            kernel,
        })
    }

    pub fn kernel(&self) -> ResolvedKernel {
        self.kernel
    }

    /// Unbiased MMD² between `x` and the reference.
    pub fn mmd2(&self, x: Samples<'_>) -> Result<f64> {
        if x.d() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: x.d(),
            });
        }
        if x.n() < 2 {
            return Err(Error::InvalidArgument("MMD needs at least 2 rows per side".into()));
        }
        let y = Samples::new(&self.data, self.d)?;
        Ok(self_term(x, &self.kernel) + self.self_term - 2.0 * cross_term(x, y, &self.kernel))
    }
}

/// Unbiased U-statistic estimate of MMD² (may be slightly negative).
pub fn mmd_unbiased(x: Samples<'_>, y: Samples<'_>, kernel: &KernelSpec) -> Result<f64> {
    mmd_unbiased_with(x, y, kernel, &MmdOptions::default())
}

pub fn mmd_unbiased_with(x: Samples<'_>, y: Samples<'_>, kernel: &KernelSpec, opts: &MmdOptions) -> Result<f64> {
    if x.d() != y.d() {
        return Err(Error::DimensionMismatch {
            expected: x.d(),
            got: y.d(),
        });
    }
    if x.n() < 2 || y.n() < 2 {
        return Err(Error::InvalidArgument("MMD needs at least 2 rows per side".into()));
    }
    let (xs, ys);
    let x = if x.n() > opts.max_rows {
        xs = subsample_rows(x, opts.max_rows, derive_seed(opts.seed, &[0]));
        Samples::new(&xs, x.d())?
    } else {
        x
    };
    let y = if y.n() > opts.max_rows {
        ys = subsample_rows(y, opts.max_rows, derive_seed(opts.seed, &[1]));
        Samples::new(&ys, y.d())?
    } else {
        y
    };
    let k = kernel.resolve(x, y, opts)?;
    MmdReference::new(y, k)?.mmd2(x)
}

/// Which representation of a labelled row enters the kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MmdView {
    /// Raw inputs `x`.
    Inputs,
    /// Label-signed inputs `y·x`, so the joint (input, label) distribution
    /// is compared.
    #[default]
    SignedInputs,
}

pub fn view_rows(ds: &LabeledDataset, view: MmdView) -> Vec<f64> {
    match view {
        MmdView::Inputs => ds.features().to_vec(),
        MmdView::SignedInputs => ds.signed_features(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderingConfig {
    pub kernel: KernelSpec,
    pub view: MmdView,
    pub base_seed: u64,
    pub balanced: bool,
    pub options: MmdOptions,
}

impl Default for OrderingConfig {
    fn default() -> Self {
        Self {
            kernel: KernelSpec::rbf_median(),
            view: MmdView::SignedInputs,
            base_seed: 0,
            balanced: false,
            options: MmdOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderingTrial {
    pub theta_deg: f64,
    pub trial: usize,
    pub seed: u64,
    pub mmd2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderingSummary {
    pub theta_deg: f64,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingTable {
    pub kernel: ResolvedKernel,
    pub view: MmdView,
    pub trials: Vec<OrderingTrial>,
    pub summary: Vec<OrderingSummary>,
}

impl OrderingTable {
    pub fn write_trials_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["theta_deg", "trial", "mmd2"])?;
        for t in &self.trials {
            w.write_record([t.theta_deg.to_string(), t.trial.to_string(), t.mmd2.to_string()])?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn write_summary_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["theta_deg", "mean", "std", "n"])?;
        for s in &self.summary {
            w.write_record([
                s.theta_deg.to_string(),
                s.mean.to_string(),
                s.std.to_string(),
                s.n.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn summary_for(&self, theta_deg: f64) -> Option<&OrderingSummary> {
        self.summary.iter().find(|s| s.theta_deg == theta_deg)
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// MMD² between biased subsets and the full dataset for each angle.
///
/// The kernel bandwidth and the full-set self-term are fixed once from the
/// full dataset so every trial is measured with the same kernel. Trial `t`
/// uses the same seed for every angle; `theta = 0` is the uniform baseline.
pub fn mmd_ordering_experiment(
    ds: &LabeledDataset,
    teacher: &Perceptron,
    thetas_deg: &[f64],
    p: usize,
    trials: usize,
    cfg: &OrderingConfig,
) -> Result<OrderingTable> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    let full = view_rows(ds, cfg.view);
    let full_s = Samples::new(&full, ds.d())?;
    let kernel = cfg.kernel.resolve(full_s, Samples::new(&[], ds.d())?, &cfg.options)?;
    let full_sub;
    let reference_rows = if full_s.n() > cfg.options.max_rows {
        full_sub = subsample_rows(full_s, cfg.options.max_rows, derive_seed(cfg.options.seed, &[1]));
        Samples::new(&full_sub, ds.d())?
    } else {
        full_s
    };
    let reference = MmdReference::new(reference_rows, kernel)?;

    let mut rows = Vec::with_capacity(thetas_deg.len() * trials);
    let mut summary = Vec::with_capacity(thetas_deg.len());
    for &theta_deg in thetas_deg {
        let theta = theta_deg.to_radians();
        let mut values = Vec::with_capacity(trials);
        for trial in 0..trials {
            let seed = derive_seed(cfg.base_seed, &[trial as u64]);
            let sel = sample_biased(ds, teacher, theta, p, seed, cfg.balanced)?;
            let subset = crate::dataset::take_subset(ds, &sel)?;
            let sub_rows = view_rows(&subset, cfg.view);
            let mmd2 = reference.mmd2(Samples::new(&sub_rows, ds.d())?)?;
            values.push(mmd2);
            rows.push(OrderingTrial {
                theta_deg,
                trial,
                seed,
                mmd2,
            });
        }
        let (mean, std) = mean_std(&values);
        summary.push(OrderingSummary {
            theta_deg,
            mean,
            std,
            n: trials,
        });
    }
    Ok(OrderingTable {
        kernel,
        view: cfg.view,
        trials: rows,
        summary,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub mmd_term: f64,
    pub margin_term: f64,
    pub eps_alpha: f64,
    pub eps_h: f64,
    /// `mmd_term + margin_term + eps_alpha + eps_h`: the excess of the
    /// bound over the full-data error.
    pub total_rhs_excess: f64,
    pub margin: f64,
    pub c: f64,
    pub h_size: f64,
    pub delta: f64,
}

/// `c · sqrt((|H| ln m + ln(2/δ)) / m)`, checking only `m > 0` and a
/// non-negative radicand.
pub fn margin_term(c: f64, h_size: f64, m: f64, delta: f64) -> Result<f64> {
    if !(m > 0.0) {
        return Err(Error::InvalidArgument(format!("margin m must be > 0, got {m}")));
    }
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("delta must be > 0, got {delta}")));
    }
    let radicand = (h_size * m.ln() + (2.0 / delta).ln()) / m;
    if radicand < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "margin term undefined: (|H| ln m + ln(2/delta)) / m = {radicand} < 0"
        )));
    }
    Ok(c * radicand.sqrt())
}

/// Itemized right-hand-side excess of the distribution-shift bound.
/// `mmd_term` is the MMD (not squared) between the low-resource and full
/// distributions; the remaining constants are user supplied.
pub fn bound_report(
    mmd_term: f64,
    m: f64,
    c: f64,
    h_size: f64,
    delta: f64,
    eps_alpha: f64,
    eps_h: f64,
) -> Result<BoundReport> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta must be in (0, 1), got {delta}")));
    }
    for (name, v) in [
        ("mmd_term", mmd_term),
        ("c", c),
        ("|H|", h_size),
        ("eps_alpha", eps_alpha),
        ("eps_H", eps_h),
    ] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "{name} must be finite and >= 0, got {v}"
            )));
        }
    }
    let margin_term = margin_term(c, h_size, m, delta)?;
    Ok(BoundReport {
        mmd_term,
        margin_term,
        eps_alpha,
        eps_h,
        total_rhs_excess: mmd_term + margin_term + eps_alpha + eps_h,
        margin: m,
        c,
        h_size,
        delta,
    })
}
