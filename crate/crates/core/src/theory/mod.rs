//! Statistical-mechanics predictions for max-margin students.
//!
//! The student-teacher overlap `R` of a max-margin perceptron trained on
//! `P = αd` teacher-labelled Gaussian inputs, optionally restricted to the
//! hard window `|T·x| < γ` that keeps a fraction `f = P/N` of a pool of `N`,
//! solves the stationarity condition
//!
//! ```text
//! R = 2α / (f √(2π) √(1−R²)) ∫_{−∞}^{κ} Dt  e^{−R²t²/(2(1−R²))}
//!                                   · [1 − e^{−γ(γ−2Rt)/(2(1−R²))}] · (κ − t)
//! ```
//!
//! with `γ = H⁻¹((N−P)/(2N))`. The window density `e^{−z²/2} N/(√(2π) P) Θ(γ−|z|)`
//! of the kept margins is what produces the bracketed factor; for `f = 1`
//! the window is the whole line, `γ = ∞` and the bracket is 1. The product of
//! the two exponentials is evaluated as `e^{−R²t²/(2s)} − e^{−(γ−Rt)²/(2s)}`,
//! `s = 1 − R²`, which is algebraically identical and does not overflow.
//!
//! The margin `κ` is not free: for the max-margin student the Gardner volume
//! shrinks to a point, which gives the capacity condition
//!
//! ```text
//! 1 − R² = (2α/f) ∫_{−∞}^{κ} Dt [H(−Rt/√s) − H((γ−Rt)/√s)] (κ − t)²
//! ```
//!
//! The solver nests a bracketed root search for `R` at fixed `κ`
//! inside a bisection on `κ` that drives the capacity residual to zero.
//!
//! The symbol `f` in the prefactor is read as the keep fraction `P/N`, and
//! `α` as `P/d` (samples per parameter of the kept set).

pub mod gauss;
pub mod quad;

use serde::{Deserialize, Serialize};

pub use gauss::{gaussian_density, gaussian_tail_h, inverse_h};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaddleInput {
    /// Samples per parameter `P/d` of the training set.
    pub alpha: f64,
    /// `P/N`, the fraction of the pool that is kept.
    pub keep_fraction: f64,
    /// Fixed margin. `None` closes the system with the capacity condition.
    pub kappa: Option<f64>,
}

impl SaddleInput {
    pub fn self_consistent(alpha: f64, keep_fraction: f64) -> Self {
        Self {
            alpha,
            keep_fraction,
            kappa: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidArgument(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "keep_fraction must be in (0, 1], got {}",
                self.keep_fraction
            )));
        }
        if let Some(k) = self.kappa {
            if !k.is_finite() || k < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "kappa must be finite and >= 0, got {k}"
                )));
            }
        }
        Ok(())
    }

    /// Window half-width `γ = H⁻¹((1 − f)/2)`, infinite when nothing is pruned.
    pub fn gamma(&self) -> Result<f64> {
        if self.keep_fraction >= 1.0 {
            Ok(f64::INFINITY)
        } else {
            inverse_h((1.0 - self.keep_fraction) / 2.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaddleOptions {
    /// Absolute tolerance of every quadrature.
    pub quad_tol: f64,
    /// Bracket width (times 1e3) at which the `R` bisection stops.
    pub fp_tol: f64,
    /// Points of the initial scan for the `R` bracket.
    pub r_grid: usize,
    pub max_fp_iter: usize,
    /// Width at which the `κ` bisection stops.
    pub kappa_tol: f64,
    pub max_bisect_iter: usize,
    /// Lower truncation of the `Dt` integrals.
    pub lower_cutoff: f64,
}

impl Default for SaddleOptions {
    fn default() -> Self {
        Self {
            quad_tol: 1e-9,
            fp_tol: 1e-8,
            r_grid: 32,
            max_fp_iter: 200,
            kappa_tol: 1e-10,
            max_bisect_iter: 200,
            lower_cutoff: -12.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaddleSolution {
    pub r: f64,
    pub kappa: f64,
    pub gamma: f64,
    pub epsilon_g: f64,
    /// Evaluations of the overlap equation in the final inner solve.
    pub fp_iterations: usize,
    /// `|G(R) − R|` at the returned `R`.
    pub fp_residual: f64,
    /// Capacity residual at the returned `(R, κ)`.
    pub capacity_residual: f64,
}

const R_MAX: f64 = 1.0 - 1e-12;
const QUAD_MAX_INTERVALS: usize = 2000;

struct Equations {
    alpha: f64,
    f: f64,
    gamma: f64,
    opts: SaddleOptions,
}

impl Equations {
    /// Right-hand side of the overlap equation.
    fn overlap_rhs(&self, r: f64, kappa: f64) -> Result<f64> {
        let s = 1.0 - r * r;
        let gamma = self.gamma;
        let integrand = |t: f64| {
            let window = if gamma.is_finite() {
                (-(r * t) * (r * t) / (2.0 * s)).exp() - (-(gamma - r * t).powi(2) / (2.0 * s)).exp()
            } else {
                (-(r * t) * (r * t) / (2.0 * s)).exp()
            };
            gaussian_density(t) * window * (kappa - t)
        };
        let integral = self.integrate(integrand, kappa)?;
        Ok(2.0 * self.alpha / (self.f * (2.0 * std::f64::consts::PI).sqrt() * s.sqrt()) * integral)
    }

    /// `(1 − R²) − (2α/f) ∫ Dt [H(−Rt/√s) − H((γ−Rt)/√s)] (κ−t)²`.
    fn capacity_residual(&self, r: f64, kappa: f64) -> Result<f64> {
        let s = 1.0 - r * r;
        let root = s.sqrt();
        let gamma = self.gamma;
        let integrand = |t: f64| {
            let upper = if gamma.is_finite() {
                gaussian_tail_h((gamma - r * t) / root)
            } else {
                0.0
            };
            gaussian_density(t) * (gaussian_tail_h(-r * t / root) - upper) * (kappa - t).powi(2)
        };
        let integral = self.integrate(integrand, kappa)?;
        Ok(s - 2.0 * self.alpha / self.f * integral)
    }

    fn integrate<F: Fn(f64) -> f64>(&self, f: F, kappa: f64) -> Result<f64> {
        if kappa <= self.opts.lower_cutoff {
            return Ok(0.0);
        }
        // split at 0 where the window factor is sharply peaked for R near 1
        let mut total = 0.0;
        let mut a = self.opts.lower_cutoff;
        for b in [0.0, kappa] {
            if b > a {
                total += quad::integrate(&f, a, b.min(kappa), self.opts.quad_tol / 2.0, QUAD_MAX_INTERVALS)?.value;
                a = b;
            }
        }
        Ok(total)
    }

    /// Solves `G(R) = R` at fixed `κ`: a coarse scan of `[0, 1)` locates the
    /// first sign change of `G(R) − R` (positive at `R = 0`), then bisection
    /// refines it. Plain fixed-point iteration oscillates for large `α`.
    /// When `G(R) > R` on the whole scan the overlap saturates at `R_MAX`.
    fn solve_r(&self, kappa: f64) -> Result<(f64, usize, f64)> {
        let o = &self.opts;
        let g = |r: f64| -> Result<f64> { Ok(self.overlap_rhs(r, kappa)? - r) };
        let mut evals = 1;
        let mut lo = 0.0;
        let mut g_lo = g(lo)?;
        if g_lo <= 0.0 {
            return Ok((0.0, evals, g_lo.abs()));
        }
        let mut hi = None;
        for k in 1..=o.r_grid {
            let r = R_MAX * k as f64 / o.r_grid as f64;
            let v = g(r)?;
            evals += 1;
            if v <= 0.0 {
                hi = Some(r);
                break;
            }
            lo = r;
            g_lo = v;
        }
        let Some(mut hi) = hi else {
            return Ok((R_MAX, evals, g_lo.abs()));
        };
        let mut best = (lo, g_lo.abs());
        for _ in 0..o.max_fp_iter {
            if hi - lo <= o.fp_tol * 1e-3 {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let v = g(mid)?;
            evals += 1;
            if v.abs() < best.1 {
                best = (mid, v.abs());
            }
            if v > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        if best.1 >= o.fp_tol && hi - lo > o.fp_tol * 1e-3 {
            return Err(Error::NoConvergence {
                what: "overlap equation",
                iterations: evals,
                last: best.0,
                residual: best.1,
            });
        }
        let r = 0.5 * (lo + hi);
        Ok((r, evals, g(r)?.abs()))
    }
}

/// Solves for the overlap `R` (and `κ`, unless fixed in `input`).
pub fn solve_saddle_point(input: SaddleInput, opts: SaddleOptions) -> Result<SaddleSolution> {
    input.validate()?;
    let eq = Equations {
        alpha: input.alpha,
        f: input.keep_fraction,
        gamma: input.gamma()?,
        opts,
    };

    let finish = |kappa: f64| -> Result<SaddleSolution> {
        let (r, iters, fp_res) = eq.solve_r(kappa)?;
        Ok(SaddleSolution {
            r,
            kappa,
            gamma: eq.gamma,
            epsilon_g: r.clamp(-1.0, 1.0).acos() / std::f64::consts::PI,
            fp_iterations: iters,
            fp_residual: fp_res,
            capacity_residual: eq.capacity_residual(r, kappa)?,
        })
    };

    if let Some(kappa) = input.kappa {
        return finish(kappa);
    }

    let residual_at = |kappa: f64| -> Result<f64> {
        let (r, _, _) = eq.solve_r(kappa)?;
        eq.capacity_residual(r, kappa)
    };

    let mut lo = 0.0;
    let lo_res = residual_at(lo)?;
    if lo_res <= 0.0 {
        return Err(Error::NoConvergence {
            what: "margin bracket (capacity violated at kappa = 0)",
            iterations: 0,
            last: lo,
            residual: lo_res,
        });
    }
    let mut hi = 1.0;
    let mut grow = 0;
    while residual_at(hi)? > 0.0 {
        lo = hi;
        hi *= 2.0;
        grow += 1;
        if grow > 8 {
            return Err(Error::NoConvergence {
                what: "margin bracket",
                iterations: grow,
                last: hi,
                residual: residual_at(hi)?,
            });
        }
    }
    let mut iters = 0;
    while hi - lo > opts.kappa_tol {
        iters += 1;
        if iters > opts.max_bisect_iter {
            return Err(Error::NoConvergence {
                what: "margin bisection",
                iterations: iters,
                last: 0.5 * (lo + hi),
                residual: hi - lo,
            });
        }
        let mid = 0.5 * (lo + hi);
        if residual_at(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    finish(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Random,
    Hard,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Random => "random",
            Regime::Hard => "hard",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub alpha: f64,
    pub epsilon_g: f64,
    pub keep_fraction: f64,
    pub r: f64,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryCurve {
    pub regime: Regime,
    pub points: Vec<CurvePoint>,
    pub options: SaddleOptions,
}

impl TheoryCurve {
    pub fn pairs(&self) -> Vec<(f64, f64)> {
        self.points.iter().map(|p| (p.alpha, p.epsilon_g)).collect()
    }

    /// CSV with columns `alpha, epsilon_g, regime, keep_fraction`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["alpha", "epsilon_g", "regime", "keep_fraction"])?;
        for p in &self.points {
            w.write_record([
                p.alpha.to_string(),
                p.epsilon_g.to_string(),
                self.regime.as_str().to_string(),
                p.keep_fraction.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

fn check_grid(alphas: &[f64]) -> Result<()> {
    if alphas.is_empty() {
        return Err(Error::InvalidArgument("alpha grid is empty".into()));
    }
    if alphas.iter().any(|&a| !(a > 0.0) || !a.is_finite()) || alphas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(
            "alpha grid must be positive and strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Theory curve at a fixed keep fraction.
pub fn theory_curve(alphas: &[f64], keep_fraction: f64, opts: SaddleOptions) -> Result<TheoryCurve> {
    check_grid(alphas)?;
    let points = alphas
        .iter()
        .map(|&alpha| {
            let sol = solve_saddle_point(SaddleInput::self_consistent(alpha, keep_fraction), opts)?;
            Ok(CurvePoint {
                alpha,
                epsilon_g: sol.epsilon_g,
                keep_fraction,
                r: sol.r,
                kappa: sol.kappa,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TheoryCurve {
        regime: if keep_fraction >= 1.0 {
            Regime::Random
        } else {
            Regime::Hard
        },
        points,
        options: opts,
    })
}

/// Hard-selection curve for a fixed pool of `pool_alpha · d` samples: the
/// keep fraction at each point is `alpha / pool_alpha`.
pub fn hard_curve_for_pool(alphas: &[f64], pool_alpha: f64, opts: SaddleOptions) -> Result<TheoryCurve> {
    check_grid(alphas)?;
    if alphas.iter().any(|&a| a > pool_alpha) {
        return Err(Error::InvalidArgument(format!(
            "alpha grid exceeds the pool size alpha {pool_alpha}"
        )));
    }
    let points = alphas
        .iter()
        .map(|&alpha| {
            let keep = alpha / pool_alpha;
            let sol = solve_saddle_point(SaddleInput::self_consistent(alpha, keep), opts)?;
            Ok(CurvePoint {
                alpha,
                epsilon_g: sol.epsilon_g,
                keep_fraction: keep,
                r: sol.r,
                kappa: sol.kappa,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TheoryCurve {
        regime: Regime::Hard,
        points,
        options: opts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub exponent: f64,
    pub prefactor: f64,
    pub r_squared: f64,
}

/// Least-squares line through `(ln α, ln ε)`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    if points.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "power-law fit needs at least 3 points, got {}",
            points.len()
        )));
    }
    if let Some(bad) = points.iter().find(|(a, e)| !(*a > 0.0) || !(*e > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "power-law fit needs positive values, got ({}, {})",
            bad.0, bad.1
        )));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("all alpha values are equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - (intercept + slope * x)).powi(2))
        .sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    Ok(PowerLawFit {
        exponent: slope,
        prefactor: intercept.exp(),
        r_squared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_laws() {
        let pts: Vec<(f64, f64)> = [0.5, 1.0, 2.0, 4.0, 8.0].iter().map(|&a| (a, 2.0 / a)).collect();
        let fit = fit_power_law(&pts).unwrap();
        assert!((fit.exponent + 1.0).abs() < 1e-9);
        assert!((fit.prefactor - 2.0).abs() < 1e-9);
        assert!((fit.r_squared - 1.0).abs() < 1e-9);

        let pts: Vec<(f64, f64)> = [1.0, 3.0, 9.0].iter().map(|&a: &f64| (a, 3.0 * a.powf(-0.5))).collect();
        let fit = fit_power_law(&pts).unwrap();
        assert!((fit.exponent + 0.5).abs() < 1e-9);
    }

    #[test]
    fn power_law_rejects_bad_input() {
        assert!(fit_power_law(&[(1.0, 1.0), (2.0, 0.5)]).is_err());
        assert!(fit_power_law(&[(1.0, 1.0), (2.0, 0.0), (3.0, 0.1)]).is_err());
        assert!(fit_power_law(&[(-1.0, 1.0), (2.0, 0.2), (3.0, 0.1)]).is_err());
    }

    #[test]
    fn gamma_from_keep_fraction() {
        let g = SaddleInput::self_consistent(1.0, 0.5).gamma().unwrap();
        // half of the mass lies in |z| < γ
        assert!((1.0 - 2.0 * gaussian_tail_h(g) - 0.5).abs() < 1e-10);
        assert!(SaddleInput::self_consistent(1.0, 1.0).gamma().unwrap().is_infinite());
    }

    #[test]
    fn input_validation() {
        let o = SaddleOptions::default();
        assert!(solve_saddle_point(SaddleInput::self_consistent(0.0, 1.0), o).is_err());
        assert!(solve_saddle_point(SaddleInput::self_consistent(1.0, 0.0), o).is_err());
        assert!(solve_saddle_point(SaddleInput::self_consistent(1.0, 1.5), o).is_err());
    }

    #[test]
    fn solution_is_self_consistent() {
        let sol = solve_saddle_point(SaddleInput::self_consistent(1.0, 1.0), SaddleOptions::default()).unwrap();
        assert!(sol.fp_residual < 1e-8);
        assert!(sol.capacity_residual.abs() < 1e-8);
        assert!(sol.r > 0.0 && sol.r < 1.0);
        assert!(sol.epsilon_g > 0.0 && sol.epsilon_g < 0.5);
    }

    #[test]
    fn fixed_kappa_mode() {
        let free = solve_saddle_point(SaddleInput::self_consistent(2.0, 1.0), SaddleOptions::default()).unwrap();
        let fixed = solve_saddle_point(
            SaddleInput {
                alpha: 2.0,
                keep_fraction: 1.0,
                kappa: Some(free.kappa),
            },
            SaddleOptions::default(),
        )
        .unwrap();
        assert!((fixed.r - free.r).abs() < 1e-9);
    }

    #[test]
    fn curve_grid_validation() {
        assert!(theory_curve(&[1.0, 1.0], 1.0, SaddleOptions::default()).is_err());
        assert!(theory_curve(&[], 1.0, SaddleOptions::default()).is_err());
        assert!(hard_curve_for_pool(&[1.0, 60.0], 50.0, SaddleOptions::default()).is_err());
    }

    #[test]
    fn curve_csv_columns() {
        let curve = theory_curve(&[1.0, 2.0], 1.0, SaddleOptions::default()).unwrap();
        let mut buf = Vec::new();
        curve.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("alpha,epsilon_g,regime,keep_fraction\n"));
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(1).unwrap().ends_with(",random,1"));
    }
}
