//! Globally adaptive Gauss–Kronrod (7, 15) quadrature on finite intervals.

use crate::error::{LabError, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
    pub max_panels: usize,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            rel: 1e-10,
            abs: 0.0,
            max_panels: 2000,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
    pub panels: usize,
}

#[derive(Clone, Copy)]
struct Panel {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

fn kronrod<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Panel {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut resk = fc * WGK[7];
    let mut resg = fc * WG[3];
    for j in 0..7 {
        let dx = half * XGK[j];
        let s = f(center - dx) + f(center + dx);
        resk += WGK[j] * s;
        if j % 2 == 1 {
            resg += WG[j / 2] * s;
        }
    }
    Panel {
        a,
        b,
        value: resk * half,
        error: ((resk - resg) * half).abs(),
    }
}

/// Integrates `f` over `[a, b]` split at the given interior breakpoints.
///
/// Panels are bisected, worst first, until the summed Gauss/Kronrod discrepancy
/// falls below `max(abs, rel * |I|)`; otherwise an accuracy error is returned.
pub fn integrate<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    breaks: &[f64],
    tol: Tolerance,
) -> Result<Estimate> {
    if !(b > a) {
        return Ok(Estimate {
            value: 0.0,
            error: 0.0,
            panels: 0,
        });
    }
    let mut cuts = vec![a];
    let mut inner: Vec<f64> = breaks.iter().copied().filter(|&x| x > a && x < b).collect();
    inner.sort_by(|x, y| x.partial_cmp(y).unwrap());
    inner.dedup();
    cuts.extend(inner);
    cuts.push(b);
    let mut panels: Vec<Panel> = cuts.windows(2).map(|w| kronrod(&f, w[0], w[1])).collect();
    loop {
        let value: f64 = panels.iter().map(|p| p.value).sum();
        let error: f64 = panels.iter().map(|p| p.error).sum();
        if !value.is_finite() {
            return Err(LabError::Accuracy(format!(
                "non-finite integrand on [{a}, {b}]"
            )));
        }
        let target = tol.abs.max(tol.rel * value.abs());
        if error <= target {
            return Ok(Estimate {
                value,
                error,
                panels: panels.len(),
            });
        }
        if panels.len() >= tol.max_panels {
            return Err(LabError::Accuracy(format!(
                "quadrature on [{a}, {b}] stalled: estimate {value:e}, error {error:e} after {} panels",
                panels.len()
            )));
        }
        let (worst, _) = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.error.partial_cmp(&y.1.error).unwrap())
            .unwrap();
        let p = panels.swap_remove(worst);
        let mid = 0.5 * (p.a + p.b);
        if !(mid > p.a && mid < p.b) {
            return Err(LabError::Accuracy(format!(
                "panel [{}, {}] cannot be refined",
                p.a, p.b
            )));
        }
        panels.push(kronrod(&f, p.a, mid));
        panels.push(kronrod(&f, mid, p.b));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomials_are_exact() {
        let e = integrate(
            |x| x.powi(5) - 3.0 * x * x,
            -1.0,
            2.0,
            &[],
            Tolerance::default(),
        )
        .unwrap();
        let exact = (64.0 - 1.0) / 6.0 - (8.0 + 1.0);
        assert!((e.value - exact).abs() < 1e-13);
        assert_eq!(e.panels, 1);
    }

    #[test]
    fn gaussian_mass() {
        let t: f64 = 3.0;
        let f = |z: f64| {
            (-(z - 5.0) * (z - 5.0) / (4.0 * t)).exp() / (4.0 * std::f64::consts::PI * t).sqrt()
        };
        let e = integrate(f, -60.0, 70.0, &[5.0], Tolerance::default()).unwrap();
        assert!((e.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kink_needs_breakpoint_or_refinement() {
        let f = |x: f64| (x - 0.3).abs();
        let exact = 0.5 * (0.09 + 0.49);
        let with = integrate(f, 0.0, 1.0, &[0.3], Tolerance::default()).unwrap();
        assert!((with.value - exact).abs() < 1e-15);
        let without = integrate(f, 0.0, 1.0, &[], Tolerance::default()).unwrap();
        assert!((without.value - exact).abs() < 1e-9);
        assert!(without.panels > with.panels);
    }

    #[test]
    fn reports_failure() {
        let tol = Tolerance {
            rel: 1e-14,
            abs: 0.0,
            max_panels: 4,
        };
        assert!(integrate(|x: f64| (1.0 / x).sin(), 1e-3, 1.0, &[], tol).is_err());
    }
}
