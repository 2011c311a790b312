//! Unit-norm perceptrons: teacher, student and bias probe.
//!
//! Students are trained to the maximum (hard) margin: the minimum-norm `w`
//! with `z_i·w >= 1`, `z_i = y_i x_i`, points along the max-margin
//! perceptron. The quadratic program is handed to an interior-point solver
//! (Clarabel); if its answer is not certified to the requested tolerance,
//! dual coordinate ascent (AdaTron) continues from the returned
//! multipliers. Every iterate also yields a certificate: with
//! `w = Σ a_i y_i x_i`, `a_i >= 0`, the point `w / Σ a_i` lies in the convex
//! hull of the signed inputs, so `|w| / Σ a_i` bounds the optimal margin from
//! above while `min_i y_i x_i·w / |w|` bounds it from below. Training stops
//! when the two meet within the relative tolerance.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, NonnegativeConeT, SolverStatus};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataset::{dot, sign, LabeledDataset};
use crate::error::{Error, Result};
use crate::rng::{indexed_rng, stream_rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct Perceptron {
    weights: Vec<f64>,
}

impl Perceptron {
    /// Normalizes `weights` to unit norm.
    pub fn new(mut weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument("perceptron needs d >= 1".into()));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("perceptron weights".into()));
        }
        let norm = dot(&weights, &weights).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Degenerate("perceptron weights have zero norm".into()));
        }
        weights.iter_mut().for_each(|w| *w /= norm);
        Ok(Self { weights })
    }

    /// Uniformly random direction on the unit sphere.
    pub fn random(d: usize, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, Stream::Teacher);
        loop {
            let w: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            match Self::new(w) {
                Err(Error::Degenerate(_)) => continue,
                other => return other,
            }
        }
    }

    pub fn d(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn predict(&self, x: &[f64]) -> i8 {
        sign(dot(&self.weights, x))
    }

    pub(crate) fn check_dim(&self, d: usize) -> Result<()> {
        if self.d() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: self.d(),
            });
        }
        Ok(())
    }

    /// Cosine overlap `R`, clamped to `[-1, 1]`.
    pub fn overlap(&self, other: &Perceptron) -> Result<f64> {
        other.check_dim(self.d())?;
        Ok(dot(&self.weights, &other.weights).clamp(-1.0, 1.0))
    }

    /// Angle to `other` in radians.
    pub fn angle_to(&self, other: &Perceptron) -> Result<f64> {
        Ok(self.overlap(other)?.acos())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Serialize, Deserialize)]
struct PerceptronRepr {
    d: usize,
    weights: Vec<f64>,
}

impl Serialize for Perceptron {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PerceptronRepr {
            d: self.d(),
            weights: self.weights.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Perceptron {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = PerceptronRepr::deserialize(d)?;
        if repr.d != repr.weights.len() {
            return Err(serde::de::Error::custom(format!(
                "d = {} but {} weights",
                repr.d,
                repr.weights.len()
            )));
        }
        Perceptron::new(repr.weights).map_err(serde::de::Error::custom)
    }
}

/// `arccos(R) / π` for the clamped overlap `R`.
pub fn analytic_error(student: &Perceptron, teacher: &Perceptron) -> Result<f64> {
    Ok(student.angle_to(teacher)? / std::f64::consts::PI)
}

const MC_CHUNK: usize = 1 << 16;

/// Fraction of fresh standard Gaussian inputs on which student and teacher
/// disagree.
///
/// Only the projections of `x` onto the plane spanned by the two perceptrons
/// affect either sign, and those projections are themselves independent
/// standard normals in an orthonormal basis of that plane, so the estimator
/// draws two normals per test point instead of `d`. The stream is split into
/// fixed-size chunks with their own sub-streams; the result does not depend
/// on the number of worker threads.
pub fn monte_carlo_error(student: &Perceptron, teacher: &Perceptron, n_test: usize, seed: u64) -> Result<f64> {
    if n_test == 0 {
        return Err(Error::InvalidArgument("n_test must be >= 1".into()));
    }
    let r = student.overlap(teacher)?;
    let s = (1.0 - r * r).max(0.0).sqrt();
    let chunks = n_test.div_ceil(MC_CHUNK);
    let disagreements: usize = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let len = MC_CHUNK.min(n_test - c * MC_CHUNK);
            let mut rng = indexed_rng(seed, Stream::MonteCarlo, c as u64);
            (0..len)
                .filter(|_| {
                    let g1: f64 = rng.sample(StandardNormal);
                    let g2: f64 = rng.sample(StandardNormal);
                    sign(g1) != sign(r * g1 + s * g2)
                })
                .count()
        })
        .sum();
    Ok(disagreements as f64 / n_test as f64)
}

/// Unit vector at `angle` radians from `base`, rotated towards a seeded
/// random direction orthogonal to `base`.
pub fn rotate_from(base: &Perceptron, angle: f64, seed: u64) -> Result<Perceptron> {
    if !(0.0..=std::f64::consts::PI).contains(&angle) {
        return Err(Error::InvalidArgument(format!("angle {angle} outside [0, pi]")));
    }
    if angle == 0.0 {
        return Ok(base.clone());
    }
    let d = base.d();
    if d == 1 {
        if angle == std::f64::consts::PI {
            return Perceptron::new(vec![-base.weights[0]]);
        }
        return Err(Error::InvalidArgument("d = 1 admits only rotations by 0 or pi".into()));
    }
    let mut rng = stream_rng(seed, Stream::Rotation);
    let ortho = loop {
        let mut u: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        // two Gram-Schmidt passes keep |<u, base>| at rounding level
        for _ in 0..2 {
            let proj = dot(&u, &base.weights);
            u.iter_mut().zip(&base.weights).for_each(|(ui, bi)| *ui -= proj * bi);
        }
        let norm = dot(&u, &u).sqrt();
        if norm > 1e-8 {
            u.iter_mut().for_each(|ui| *ui /= norm);
            break u;
        }
    };
    let (s, c) = angle.sin_cos();
    let w = base.weights.iter().zip(&ortho).map(|(b, u)| c * b + s * u).collect();
    Perceptron::new(w)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaxMarginConfig {
    /// Relative gap between the margin certificate and the achieved margin.
    pub tol: f64,
    /// Maximum number of full sweeps over the training set.
    pub max_iter: usize,
}

impl Default for MaxMarginConfig {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_iter: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub student: Perceptron,
    /// `min_i y_i J·x_i` for the unit-norm student.
    pub achieved_margin: f64,
    /// Upper bound on the optimal margin from the hull certificate.
    pub margin_upper_bound: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Hard-margin perceptron without bias through the origin.
///
/// Non-separable data is not an error: the report comes back with
/// `converged = false` and a non-positive achieved margin.
pub fn train_max_margin(ds: &LabeledDataset, cfg: MaxMarginConfig) -> Result<TrainReport> {
    if !(cfg.tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tol must be > 0, got {}", cfg.tol)));
    }
    let d = ds.d();
    let p = ds.len();
    let z = ds.signed_features();
    let norms: Vec<f64> = z.chunks_exact(d).map(|zi| dot(zi, zi)).collect();

    let (mut alpha, mut w, steps) = match interior_point(&z, d, p) {
        Some((w, a, steps)) => (a, w, steps),
        None => (vec![0.0; p], vec![0.0; d], 0),
    };
    let (lo, _) = certificate(&z, d, &w, &alpha);
    let (_, hi) = certificate(&z, d, &recompute(&z, d, &alpha), &alpha);
    if lo > 0.0 && hi - lo <= cfg.tol * lo {
        return Ok(TrainReport {
            student: Perceptron::new(w)?,
            achieved_margin: lo,
            margin_upper_bound: hi,
            iterations: steps,
            converged: true,
        });
    }
    // refine from the multipliers with coordinate ascent
    w = recompute(&z, d, &alpha);
    let mut best: Option<(Vec<f64>, f64, f64)> = None;

    for sweep in 1..=cfg.max_iter.max(1) {
        for i in 0..p {
            if norms[i] == 0.0 {
                continue;
            }
            let zi = &z[i * d..(i + 1) * d];
            let m = dot(zi, &w);
            let next = (alpha[i] + (1.0 - m) / norms[i]).max(0.0);
            let delta = next - alpha[i];
            if delta != 0.0 {
                alpha[i] = next;
                w.iter_mut().zip(zi).for_each(|(wj, zj)| *wj += delta * zj);
            }
        }

        let (lo, hi) = certificate(&z, d, &w, &alpha);
        if best.as_ref().is_none_or(|b| lo > b.1) {
            best = Some((w.clone(), lo, hi));
        }
        if lo > 0.0 && hi - lo <= cfg.tol * lo {
            // confirm on an exactly recomputed weight vector
            let exact = recompute(&z, d, &alpha);
            let (lo, hi) = certificate(&z, d, &exact, &alpha);
            if lo > 0.0 && hi - lo <= cfg.tol * lo {
                return Ok(TrainReport {
                    student: Perceptron::new(exact)?,
                    achieved_margin: lo,
                    margin_upper_bound: hi,
                    iterations: steps + sweep,
                    converged: true,
                });
            }
            w = exact;
        }
    }

    let (w, lo, hi) = best.expect("at least one sweep");
    let student = Perceptron::new(w).or_else(|_| {
        let mut e = vec![0.0; d];
        e[0] = 1.0;
        Perceptron::new(e)
    })?;
    let achieved = z
        .chunks_exact(d)
        .map(|zi| dot(zi, student.weights()))
        .fold(f64::INFINITY, f64::min);
    Ok(TrainReport {
        student,
        achieved_margin: if lo.is_finite() { achieved } else { f64::NEG_INFINITY },
        margin_upper_bound: hi,
        iterations: steps + cfg.max_iter,
        converged: false,
    })
}

/// Interior-point solve of `min ½|w|²` subject to `z_i·w >= 1`.
///
/// Returns the primal `w`, the multipliers and the iteration count, or
/// `None` when the solver does not report a (possibly reduced-accuracy)
/// solution, which includes non-separable data.
fn interior_point(z: &[f64], d: usize, p: usize) -> Option<(Vec<f64>, Vec<f64>, usize)> {
    let quad = CscMatrix::identity(d);
    let colptr = (0..=d).map(|j| j * p).collect();
    let rowval = (0..d).flat_map(|_| 0..p).collect();
    let nzval = (0..d).flat_map(|j| (0..p).map(move |i| -z[i * d + j])).collect();
    let a = CscMatrix::new(p, d, colptr, rowval, nzval);
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .max_iter(200)
        .build()
        .ok()?;
    let mut solver = DefaultSolver::new(
        &quad,
        &vec![0.0; d],
        &a,
        &vec![-1.0; p],
        &[NonnegativeConeT(p)],
        settings,
    )
    .ok()?;
    solver.solve();
    match solver.solution.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => Some((
            solver.solution.x.clone(),
            solver.solution.z.iter().map(|v| v.max(0.0)).collect(),
            solver.solution.iterations as usize,
        )),
        _ => None,
    }
}

fn recompute(z: &[f64], d: usize, alpha: &[f64]) -> Vec<f64> {
    let mut w = vec![0.0; d];
    for (zi, &a) in z.chunks_exact(d).zip(alpha) {
        if a != 0.0 {
            w.iter_mut().zip(zi).for_each(|(wj, zj)| *wj += a * zj);
        }
    }
    w
}

/// `(lower, upper)` bounds on the optimal margin for the current iterate.
fn certificate(z: &[f64], d: usize, w: &[f64], alpha: &[f64]) -> (f64, f64) {
    let norm = dot(w, w).sqrt();
    let total: f64 = alpha.iter().sum();
    if norm == 0.0 || total == 0.0 {
        return (f64::NEG_INFINITY, f64::INFINITY);
    }
    let lo = z.chunks_exact(d).map(|zi| dot(zi, w)).fold(f64::INFINITY, f64::min) / norm;
    (lo, norm / total)
}

/// Minimum margin `min_i y_i J·x_i` of a unit-norm perceptron on `ds`.
pub fn min_margin(j: &Perceptron, ds: &LabeledDataset) -> Result<f64> {
    j.check_dim(ds.d())?;
    Ok(ds
        .rows()
        .zip(ds.labels())
        .map(|(x, &y)| f64::from(y) * dot(j.weights(), x))
        .fold(f64::INFINITY, f64::min))
}
