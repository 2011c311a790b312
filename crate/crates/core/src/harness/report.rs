//! Aggregate reports over simulation rows: hard-vs-random crossover and the
//! bias gap `Δ(θ, α) = ε_biased − ε_random`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::Setting;
use super::sim::SimRow;
use crate::error::{Error, Result};
use crate::mmd::mean_std;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub alpha: f64,
    pub mean: f64,
    /// Sample standard deviation across seeds.
    pub std: f64,
    pub n: usize,
}

impl SeriesPoint {
    pub fn std_error(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            self.std / (self.n as f64).sqrt()
        }
    }
}

/// Mean and spread of `ε_g` per α for one (setting, angle) series.
pub fn series(rows: &[SimRow], setting: Setting, theta_deg: Option<f64>) -> Vec<SeriesPoint> {
    let mut by_alpha: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.setting == setting && r.theta_deg == theta_deg) {
        by_alpha.entry(r.alpha.to_bits()).or_default().push(r.epsilon_g);
    }
    by_alpha
        .into_iter()
        .map(|(bits, v)| {
            let (mean, std) = mean_std(&v);
            SeriesPoint {
                alpha: f64::from_bits(bits),
                mean,
                std,
                n: v.len(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapPoint {
    pub alpha: f64,
    pub mean_a: f64,
    pub mean_b: f64,
    /// `mean_b − mean_a`.
    pub gap: f64,
    /// Standard deviation of the gap from the per-series standard errors.
    pub gap_std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossoverReport {
    pub series_a: String,
    pub series_b: String,
    pub points: Vec<GapPoint>,
    /// First α where the gap changes sign, interpolated linearly in `ln α`.
    pub crossover_alpha: Option<f64>,
    /// Sign of the gap at the smallest and the largest common α.
    pub low_gap_sign: i8,
    pub high_gap_sign: i8,
    pub message: String,
}

/// Compares two series on their common α values.
pub fn crossover(a: &[SeriesPoint], b: &[SeriesPoint], label_a: &str, label_b: &str) -> Result<CrossoverReport> {
    let points: Vec<GapPoint> = a
        .iter()
        .filter_map(|pa| {
            b.iter().find(|pb| pb.alpha == pa.alpha).map(|pb| GapPoint {
                alpha: pa.alpha,
                mean_a: pa.mean,
                mean_b: pb.mean,
                gap: pb.mean - pa.mean,
                gap_std_error: (pa.std_error().powi(2) + pb.std_error().powi(2)).sqrt(),
            })
        })
        .collect();
    if points.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "series '{label_a}' and '{label_b}' share no alpha values"
        )));
    }
    let mut crossover_alpha = None;
    for w in points.windows(2) {
        let (g0, g1) = (w[0].gap, w[1].gap);
        if g0 * g1 < 0.0 {
            let (l0, l1) = (w[0].alpha.ln(), w[1].alpha.ln());
            crossover_alpha = Some((l0 + (l1 - l0) * g0 / (g0 - g1)).exp());
            break;
        }
    }
    let message = match crossover_alpha {
        Some(x) => format!("'{label_b}' minus '{label_a}' changes sign near alpha = {x:.4}"),
        None => "no crossover in grid".to_string(),
    };
    let sign = |g: f64| {
        if g > 0.0 {
            1
        } else if g < 0.0 {
            -1
        } else {
            0
        }
    };
    Ok(CrossoverReport {
        low_gap_sign: sign(points[0].gap),
        high_gap_sign: sign(points[points.len() - 1].gap),
        series_a: label_a.into(),
        series_b: label_b.into(),
        points,
        crossover_alpha,
        message,
    })
}

/// Hard minus random.
pub fn run_crossover_report(rows: &[SimRow]) -> Result<CrossoverReport> {
    let random = series(rows, Setting::Random, None);
    let hard = series(rows, Setting::Hard, None);
    if random.is_empty() || hard.is_empty() {
        return Err(Error::InvalidArgument(
            "crossover report needs both random and hard rows".into(),
        ));
    }
    crossover(&random, &hard, "random", "hard")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasPoint {
    pub theta_deg: f64,
    pub alpha: f64,
    pub mean_biased: f64,
    pub mean_random: f64,
    pub delta: f64,
    pub delta_std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaVerdict {
    pub theta_deg: f64,
    pub delta_small_alpha: f64,
    pub delta_large_alpha: f64,
    /// `Δ(θ, α_min) > Δ(θ, α_max)`.
    pub shrinks_with_alpha: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub small_alpha: f64,
    pub large_alpha: f64,
    pub points: Vec<BiasPoint>,
    pub per_theta: Vec<ThetaVerdict>,
    /// `Δ(θ, α_min)` strictly increasing over the sorted angles.
    pub increasing_in_theta: bool,
}

pub fn run_bias_report(rows: &[SimRow]) -> Result<BiasReport> {
    let random = series(rows, Setting::Random, None);
    let mut thetas: Vec<f64> = rows
        .iter()
        .filter(|r| r.setting == Setting::Biased)
        .filter_map(|r| r.theta_deg)
        .collect();
    thetas.sort_by(f64::total_cmp);
    thetas.dedup();
    if thetas.is_empty() {
        return Err(Error::InvalidArgument("bias report needs biased rows".into()));
    }
    let mut points = Vec::new();
    for &theta in &thetas {
        for b in series(rows, Setting::Biased, Some(theta)) {
            let r = random
                .iter()
                .find(|r| r.alpha == b.alpha)
                .ok_or_else(|| Error::InvalidArgument(format!("missing random baseline at alpha = {}", b.alpha)))?;
            points.push(BiasPoint {
                theta_deg: theta,
                alpha: b.alpha,
                mean_biased: b.mean,
                mean_random: r.mean,
                delta: b.mean - r.mean,
                delta_std_error: (b.std_error().powi(2) + r.std_error().powi(2)).sqrt(),
            });
        }
    }
    let small_alpha = points.iter().map(|p| p.alpha).fold(f64::INFINITY, f64::min);
    let large_alpha = points.iter().map(|p| p.alpha).fold(f64::NEG_INFINITY, f64::max);
    let delta_at = |theta: f64, alpha: f64| {
        points
            .iter()
            .find(|p| p.theta_deg == theta && p.alpha == alpha)
            .map_or(f64::NAN, |p| p.delta)
    };
    let per_theta: Vec<ThetaVerdict> = thetas
        .iter()
        .map(|&t| {
            let (s, l) = (delta_at(t, small_alpha), delta_at(t, large_alpha));
            ThetaVerdict {
                theta_deg: t,
                delta_small_alpha: s,
                delta_large_alpha: l,
                shrinks_with_alpha: s > l,
            }
        })
        .collect();
    let increasing_in_theta = per_theta
        .windows(2)
        .all(|w| w[1].delta_small_alpha > w[0].delta_small_alpha);
    Ok(BiasReport {
        small_alpha,
        large_alpha,
        points,
        per_theta,
        increasing_in_theta,
    })
}
