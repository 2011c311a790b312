//! Globally adaptive 15-point Gauss–Kronrod quadrature.

use crate::error::{Error, Result};

// Kronrod abscissae on [-1, 1] (positive half) and weights; the Gauss
// 7-point rule reuses the odd-indexed nodes.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadResult {
    pub value: f64,
    pub abs_error: f64,
    pub intervals: usize,
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Segment {
    let centre = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(centre);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = half * XGK[j];
        let pair = f(centre - dx) + f(centre + dx);
        kronrod += WGK[j] * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    Segment {
        a,
        b,
        value: kronrod * half,
        error: ((kronrod - gauss) * half).abs(),
    }
}

/// Integrates `f` over `[a, b]` by repeatedly bisecting the segment with the
/// largest error estimate until the summed estimate is below `abs_tol`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, abs_tol: f64, max_intervals: usize) -> Result<QuadResult> {
    if !(abs_tol > 0.0) {
        return Err(Error::InvalidArgument(format!("abs_tol must be > 0, got {abs_tol}")));
    }
    if a == b {
        return Ok(QuadResult {
            value: 0.0,
            abs_error: 0.0,
            intervals: 0,
        });
    }
    let (lo, hi, flip) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
    let mut segments = vec![gk15(&f, lo, hi)];
    loop {
        let total_err: f64 = segments.iter().map(|s| s.error).sum();
        if total_err <= abs_tol || segments.len() >= max_intervals.max(1) {
            let value: f64 = segments.iter().map(|s| s.value).sum();
            if !value.is_finite() {
                return Err(Error::NonFinite("quadrature value".into()));
            }
            if total_err > abs_tol {
                return Err(Error::NoConvergence {
                    what: "adaptive quadrature",
                    iterations: segments.len(),
                    last: value,
                    residual: total_err,
                });
            }
            return Ok(QuadResult {
                value: flip * value,
                abs_error: total_err,
                intervals: segments.len(),
            });
        }
        let worst = segments
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.error.total_cmp(&y.1.error))
            .map(|(i, _)| i)
            .expect("non-empty");
        let s = segments.swap_remove(worst);
        let mid = 0.5 * (s.a + s.b);
        segments.push(gk15(&f, s.a, mid));
        segments.push(gk15(&f, mid, s.b));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomials_are_exact() {
        let r = integrate(|x| x.powi(5) - 2.0 * x * x + 1.0, -1.0, 2.0, 1e-12, 100).unwrap();
        let exact = (64.0 - 1.0) / 6.0 - 2.0 * (8.0 + 1.0) / 3.0 + 3.0;
        assert!((r.value - exact).abs() < 1e-12);
    }

    #[test]
    fn gaussian_mass() {
        let phi = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let r = integrate(phi, -12.0, 12.0, 1e-13, 1000).unwrap();
        assert!((r.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reversed_limits_flip_sign() {
        let a = integrate(f64::exp, 0.0, 1.0, 1e-12, 100).unwrap().value;
        let b = integrate(f64::exp, 1.0, 0.0, 1e-12, 100).unwrap().value;
        assert_eq!(a, -b);
    }

    #[test]
    fn kink_needs_refinement() {
        let r = integrate(|x: f64| x.abs(), -1.0, 3.0, 1e-10, 200).unwrap();
        assert!((r.value - 5.0).abs() < 1e-10);
        assert!(r.intervals > 1);
    }

    #[test]
    fn gives_up_with_diagnostic() {
        let err = integrate(|x: f64| 1.0 / x.abs().sqrt(), -1.0, 1.0, 1e-14, 4).unwrap_err();
        assert!(matches!(err, Error::NoConvergence { .. }));
    }
}
