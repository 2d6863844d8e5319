//! Dirichlet solutions of the heat equation on the half line with odd data,
//! `p(t, y) = (4πt)^{-1/2} ∫_0^∞ (e^{-(y-z)²/4t} - e^{-(y+z)²/4t}) w₀(z) dz`,
//! evaluated by quadrature or by the sinh series, and their large-time predictors.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::sync::Arc;

use statrs::function::gamma::ln_gamma;

use crate::error::{LabError, Result};
use crate::quadrature::{integrate, Tolerance};
use crate::special::{ln_upper_gamma, lower_gamma_scaled};

/// Default lower time for the asymptotic predictors.
pub const DEFAULT_T_MIN: f64 = 100.0;

const SERIES_RATIO: f64 = 1e-14;
const SPREAD: f64 = 20.0;

pub type DataFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// The unperturbed part of the odd datum, given on `z >= 0`.
#[derive(Clone)]
pub enum TailFamily {
    /// `z` on `[0, 1)`, `z^{k+1}` beyond.
    H1 {
        k: f64,
    },
    /// `z` on `[0, 1)`, `z^ν` beyond.
    H2 {
        nu: f64,
    },
    /// `z^p` on the whole half line (diagnostic heat polynomials for integer `p`).
    Power {
        p: f64,
    },
    /// Data resampled from a nonlinear solution at a restart time.
    Restart {
        label: String,
        f: DataFn,
        breaks: Vec<f64>,
    },
    Zero,
}

impl fmt::Debug for TailFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TailFamily::H1 { k } => write!(f, "H1(k = {k})"),
            TailFamily::H2 { nu } => write!(f, "H2(nu = {nu})"),
            TailFamily::Power { p } => write!(f, "Power(p = {p})"),
            TailFamily::Restart { label, .. } => write!(f, "Restart({label})"),
            TailFamily::Zero => write!(f, "Zero"),
        }
    }
}

impl TailFamily {
    fn base(&self, z: f64) -> f64 {
        match self {
            TailFamily::H1 { k } => {
                if z < 1.0 {
                    z
                } else {
                    z.powf(k + 1.0)
                }
            }
            TailFamily::H2 { nu } => {
                if z < 1.0 {
                    z
                } else {
                    z.powf(*nu)
                }
            }
            TailFamily::Power { p } => z.powf(*p),
            TailFamily::Restart { f, .. } => f(z),
            TailFamily::Zero => 0.0,
        }
    }

    /// Exponent `k` such that the datum grows like `z^{k+1}`.
    pub fn growth_k(&self) -> Option<f64> {
        match self {
            TailFamily::H1 { k } => Some(*k),
            TailFamily::H2 { nu } => Some(nu - 1.0),
            TailFamily::Power { p } => Some(p - 1.0),
            _ => None,
        }
    }
}

/// Exponents of the cosine bump: height `T^{κ/2+β}`, period scale `T^α`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChiParams {
    pub t_big: f64,
    pub alpha: f64,
    pub kappa: f64,
    pub beta: f64,
}

impl ChiParams {
    pub fn height(&self) -> f64 {
        self.t_big.powf(0.5 * self.kappa + self.beta)
    }

    pub fn width(&self) -> f64 {
        self.t_big.powf(self.alpha)
    }
}

/// `sign · M · h · cos((z - s)/L)` on `(z - s)/L ∈ [π/2, 3π/2]`, zero elsewhere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Perturbation {
    pub sign: f64,
    pub amplitude: f64,
    pub height: f64,
    pub width: f64,
    pub shift: f64,
}

impl Perturbation {
    pub fn chi0(params: ChiParams, sign: f64, amplitude: f64) -> Self {
        Perturbation {
            sign: sign.signum(),
            amplitude,
            height: params.height(),
            width: params.width(),
            shift: 0.0,
        }
    }

    pub fn cosine(sign: f64, amplitude: f64, height: f64, width: f64, shift: f64) -> Self {
        Perturbation {
            sign: sign.signum(),
            amplitude,
            height,
            width,
            shift,
        }
    }

    pub fn shifted(mut self, shift: f64) -> Self {
        self.shift = shift;
        self
    }

    pub fn support(&self) -> (f64, f64) {
        (
            self.shift + 0.5 * PI * self.width,
            self.shift + 1.5 * PI * self.width,
        )
    }

    pub fn value(&self, z: f64) -> f64 {
        let (a, b) = self.support();
        if z < a || z > b {
            0.0
        } else {
            self.sign * self.amplitude * self.height * ((z - self.shift) / self.width).cos()
        }
    }

    /// `∫_0^∞ z χ(z) dz` in closed form.
    pub fn first_moment(&self) -> f64 {
        let l = self.width;
        self.sign * self.amplitude * self.height * (-2.0 * l * self.shift - 2.0 * PI * l * l)
    }
}

/// Odd linear datum `w₀`: a scaled family plus an optional cosine bump.
#[derive(Clone, Debug)]
pub struct TailInitialData {
    pub family: TailFamily,
    pub scale: f64,
    pub perturbation: Option<Perturbation>,
}

impl TailInitialData {
    fn plain(family: TailFamily) -> Self {
        TailInitialData {
            family,
            scale: 1.0,
            perturbation: None,
        }
    }

    pub fn h1(k: f64) -> Self {
        Self::plain(TailFamily::H1 { k })
    }

    pub fn h2(nu: f64) -> Self {
        Self::plain(TailFamily::H2 { nu })
    }

    pub fn power(p: f64) -> Self {
        Self::plain(TailFamily::Power { p })
    }

    pub fn restart(label: &str, f: DataFn, breaks: Vec<f64>) -> Self {
        Self::plain(TailFamily::Restart {
            label: label.to_string(),
            f,
            breaks,
        })
    }

    /// The bump alone, without the nonnegativity requirement.
    pub fn perturbation_only(p: Perturbation) -> Self {
        TailInitialData {
            family: TailFamily::Zero,
            scale: 1.0,
            perturbation: Some(p),
        }
    }

    pub fn scaled(mut self, a: f64) -> Self {
        self.scale = a;
        self
    }

    /// Adds a bump, rejecting data that become negative on its support.
    pub fn with_perturbation(mut self, p: Perturbation) -> Result<Self> {
        self.perturbation = Some(p);
        let (a, b) = p.support();
        let n = 2000;
        for i in 0..=n {
            let z = a + (b - a) * i as f64 / n as f64;
            let v = self.eval(z);
            if v < 0.0 {
                return Err(LabError::Domain(format!(
                    "perturbed datum is negative at z = {z} ({v:e}); the bump height exceeds the datum"
                )));
            }
        }
        Ok(self)
    }

    /// `w₀(z)` extended oddly to the whole line.
    pub fn eval(&self, z: f64) -> f64 {
        if z < 0.0 {
            return -self.eval(-z);
        }
        let mut v = self.scale * self.family.base(z);
        if let Some(p) = &self.perturbation {
            v += p.value(z);
        }
        v
    }

    fn breakpoints(&self) -> Vec<f64> {
        let mut b = match &self.family {
            TailFamily::H1 { .. } | TailFamily::H2 { .. } => vec![1.0],
            TailFamily::Restart { breaks, .. } => breaks.clone(),
            _ => vec![],
        };
        if let Some(p) = &self.perturbation {
            let (lo, hi) = p.support();
            b.extend([lo, lo + 0.5 * (hi - lo), hi]);
        }
        b
    }
}

/// `p(t, y)` by adaptive Gauss–Kronrod quadrature of the odd-image kernel.
pub fn heat_eval_quadrature(w0: &TailInitialData, t: f64, y: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(LabError::Domain(format!("time must be positive, got {t}")));
    }
    if y < 0.0 {
        return heat_eval_quadrature(w0, t, -y).map(|v| -v);
    }
    if y == 0.0 {
        return Ok(0.0);
    }
    let root = t.sqrt();
    let lo = (y - SPREAD * root).max(0.0);
    let hi = y + SPREAD * root;
    let norm = 1.0 / (4.0 * PI * t).sqrt();
    let kernel = |z: f64| {
        let d = y - z;
        (-d * d / (4.0 * t)).exp() * (-(-y * z / t).exp_m1()) * w0.eval(z) * norm
    };
    let mut breaks = w0.breakpoints();
    breaks.push(y);
    let fine = Tolerance {
        rel: 1e-10,
        abs: 0.0,
        max_panels: 400,
    };
    let piece = |a: f64, b: f64| -> Result<f64> {
        match integrate(kernel, a, b, &breaks, fine) {
            Ok(e) => Ok(e.value),
            Err(_) => {
                let coarse = Tolerance {
                    rel: 1e-8,
                    abs: 1e-300,
                    max_panels: 5000,
                };
                Ok(integrate(kernel, a, b, &breaks, coarse)?.value)
            }
        }
    };
    let mut value = piece(lo, hi)?;
    // Remainder beyond `hi` for data of at most polynomial growth; widen until negligible.
    let mut hi = hi;
    for _ in 0..8 {
        let d = hi - y;
        let tail = (-d * d / (4.0 * t)).exp() * w0.eval(hi).abs().max(w0.eval(2.0 * hi).abs());
        if tail <= 1e-8 * value.abs() || tail <= 1e-300 {
            return Ok(value);
        }
        let next = hi + SPREAD * root;
        value += piece(hi, next)?;
        hi = next;
    }
    Err(LabError::Accuracy(format!(
        "tail remainder is not negligible at t = {t}, y = {y}"
    )))
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `p(t, y)` from the sinh expansion with incomplete-Gamma moments; diffusive zone only.
pub fn heat_eval_series(w0: &TailInitialData, t: f64, y: f64) -> Result<f64> {
    if !(t >= 1.0) || y.abs() > t.sqrt() * (1.0 + 1e-12) {
        return Err(LabError::Domain(format!(
            "series needs t >= 1 and |y| <= sqrt(t) (t = {t}, y = {y})"
        )));
    }
    if w0.perturbation.is_some() {
        return Err(LabError::Domain(
            "series moments are not available for perturbed data".into(),
        ));
    }
    if y == 0.0 {
        return Ok(0.0);
    }
    // ln ∫_0^∞ z^{2n+1} e^{-z²/4t} w₀(z) dz.
    let x = 1.0 / (4.0 * t);
    let ln4t = (4.0 * t).ln();
    let ln_moment = |n: usize| -> Result<f64> {
        let n = n as f64;
        match &w0.family {
            TailFamily::H1 { .. } | TailFamily::H2 { .. } => {
                let k = w0.family.growth_k().unwrap();
                let inner = (0.5 * lower_gamma_scaled(n + 1.5, x)?).ln();
                let s = n + 0.5 * (k + 3.0);
                let outer = (0.5f64).ln() + s * ln4t + ln_upper_gamma(s, x)?;
                Ok(log_add(inner, outer))
            }
            TailFamily::Power { p } => {
                let s = n + 1.0 + 0.5 * p;
                if !(s > 0.0) {
                    return Err(LabError::Domain(format!(
                        "power datum z^{p} is not integrable at 0"
                    )));
                }
                Ok((0.5f64).ln() + s * ln4t + ln_gamma(s))
            }
            _ => Err(LabError::Domain(format!(
                "no closed-form moments for {:?}",
                w0.family
            ))),
        }
    };
    let ln_ratio = (y.abs() / (2.0 * t)).ln();
    let mut terms: Vec<f64> = Vec::new();
    let mut ln_sum = f64::NEG_INFINITY;
    for n in 0..20_000usize {
        let ln_term = 2.0 * n as f64 * ln_ratio - ln_gamma(2.0 * n as f64 + 2.0) + ln_moment(n)?;
        ln_sum = log_add(ln_sum, ln_term);
        let decreasing = terms.last().map_or(false, |&prev| ln_term < prev);
        terms.push(ln_term);
        if n >= 2 && decreasing && ln_term - ln_sum < SERIES_RATIO.ln() {
            let ln_p =
                y.abs().ln() - 0.5 * (4.0 * PI).ln() - y * y / (4.0 * t) - 1.5 * t.ln() + ln_sum;
            return Ok(y.signum() * w0.scale * ln_p.exp());
        }
    }
    Err(LabError::Accuracy(format!(
        "series did not converge at t = {t}, y = {y}"
    )))
}

/// Frame in which the linear solution is advected: `w(t, x) = p(t, x - s t)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AdvectionFrame {
    Heat,
    Critical { c_star: f64 },
    TwoLambda { lambda: f64 },
}

impl AdvectionFrame {
    pub fn speed(&self) -> f64 {
        match self {
            AdvectionFrame::Heat => 0.0,
            AdvectionFrame::Critical { c_star } => *c_star,
            AdvectionFrame::TwoLambda { lambda } => 2.0 * lambda,
        }
    }
}

pub fn advected_eval(w0: &TailInitialData, frame: AdvectionFrame, t: f64, x: f64) -> Result<f64> {
    heat_eval_quadrature(w0, t, x - frame.speed() * t)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Regime {
    /// `|y| <= √t`.
    Diffusive,
    /// `y >= max(√t, 1)`.
    Outer,
    /// `0 <= y - ϱ t <= √t`.
    Ballistic { rho: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearSolutionQuery {
    pub t: f64,
    pub y: f64,
    pub regime: Regime,
    pub t_min: f64,
}

impl LinearSolutionQuery {
    pub fn new(t: f64, y: f64, regime: Regime) -> Self {
        LinearSolutionQuery {
            t,
            y,
            regime,
            t_min: DEFAULT_T_MIN,
        }
    }

    pub fn with_t_min(mut self, t_min: f64) -> Self {
        self.t_min = t_min;
        self
    }

    fn validate(&self) -> Result<()> {
        let (t, y) = (self.t, self.y);
        if t < self.t_min {
            return Err(LabError::Domain(format!(
                "t = {t} is below t_min = {}",
                self.t_min
            )));
        }
        let root = t.sqrt();
        let slack = 1e-12 * root.max(1.0);
        let ok = match self.regime {
            Regime::Diffusive => y.abs() <= root + slack,
            Regime::Outer => y >= root.max(1.0) - slack,
            Regime::Ballistic { rho } => {
                let d = y - rho * t;
                d >= -slack && d <= root + slack
            }
        };
        if ok {
            Ok(())
        } else {
            Err(LabError::Domain(format!(
                "(t, y) = ({t}, {y}) is not in the {:?} regime",
                self.regime
            )))
        }
    }
}

/// Fitted constants of the leading-order forms.
#[derive(Clone, Debug, Default)]
pub struct AsymptoticConstants {
    pub varpi: Option<f64>,
    pub varpi_sharp: Option<f64>,
    pub lambda_big: Option<f64>,
    pub ratios: Vec<(f64, f64)>,
    pub decade_drifts: Vec<(f64, f64)>,
    pub drift: f64,
    pub warning: Option<String>,
}

/// `ϖ ± (4π)^{-1/2} ∫ z χ₀`, with the sign carried by the perturbation.
pub fn varpi_sharp(varpi: f64, p: &Perturbation) -> f64 {
    varpi + p.first_moment() / (4.0 * PI).sqrt()
}

/// The leading-order form without its constant.
pub fn predictor_shape(w0: &TailInitialData, q: &LinearSolutionQuery) -> Result<f64> {
    q.validate()?;
    let (t, y) = (q.t, q.y);
    match q.regime {
        Regime::Diffusive => {
            let gauss = y * (-y * y / (4.0 * t)).exp();
            let k = w0.family.growth_k().unwrap_or(f64::NEG_INFINITY);
            Ok(if k > -3.0 {
                gauss * t.powf(0.5 * k)
            } else if k == -3.0 {
                gauss * t.powf(-1.5) * t.ln()
            } else {
                gauss * t.powf(-1.5)
            })
        }
        Regime::Outer => match w0.family.growth_k() {
            Some(k) => Ok(y.powf(k + 1.0)),
            None => Err(LabError::Domain(format!(
                "no outer envelope for {:?}",
                w0.family
            ))),
        },
        Regime::Ballistic { rho } => {
            let nu = match w0.family {
                TailFamily::H2 { nu } => nu,
                TailFamily::Power { p } => p,
                _ => {
                    return Err(LabError::Domain(format!(
                        "no ballistic form for {:?}",
                        w0.family
                    )))
                }
            };
            let d = y - rho * t;
            Ok(t.powf(nu) * (-d * d / (4.0 * t)).exp())
        }
    }
}

/// Constant times shape, per regime.
pub fn predict_asymptotic(
    constants: &AsymptoticConstants,
    w0: &TailInitialData,
    q: &LinearSolutionQuery,
) -> Result<f64> {
    let shape = predictor_shape(w0, q)?;
    let missing = |what: &str| LabError::Domain(format!("constant {what} has not been estimated"));
    let constant = match q.regime {
        Regime::Diffusive => {
            let steep = w0.family.growth_k().map_or(true, |k| k < -3.0);
            match (steep, w0.perturbation.is_some(), constants.varpi_sharp) {
                (true, true, Some(v)) => v,
                _ => constants.varpi.ok_or_else(|| missing("varpi"))?,
            }
        }
        Regime::Outer => 1.0,
        Regime::Ballistic { .. } => constants.lambda_big.ok_or_else(|| missing("Lambda"))?,
    };
    Ok(constant * shape)
}

/// Log-spaced grid with `per_decade` points per decade, endpoints included.
pub fn log_grid(lo: f64, hi: f64, per_decade: usize) -> Vec<f64> {
    let decades = (hi / lo).log10();
    let n = (decades * per_decade as f64).round().max(1.0) as usize;
    (0..=n)
        .map(|i| lo * 10f64.powf(decades * i as f64 / n as f64))
        .collect()
}

/// Averages `p / shape` over the last decade of `t_grid` and reports decade-to-decade drift.
pub fn estimate_prefactor(
    w0: &TailInitialData,
    t_grid: &[f64],
    rule: &dyn Fn(f64) -> LinearSolutionQuery,
) -> Result<AsymptoticConstants> {
    if t_grid.len() < 2 || t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(LabError::Domain(
            "t grid must be increasing with at least two points".into(),
        ));
    }
    let mut ratios = Vec::with_capacity(t_grid.len());
    let mut regime = Regime::Diffusive;
    for &t in t_grid {
        let q = rule(t);
        regime = q.regime;
        let shape = predictor_shape(w0, &q)?;
        ratios.push((t, heat_eval_quadrature(w0, q.t, q.y)? / shape));
    }
    let t_last = ratios.last().unwrap().0;
    let recent: Vec<f64> = ratios
        .iter()
        .filter(|(t, _)| *t >= t_last / 10.0 * (1.0 - 1e-12))
        .map(|r| r.1)
        .collect();
    let value = recent.iter().sum::<f64>() / recent.len() as f64;
    let mut decade_drifts = Vec::new();
    for (i, &(ti, ri)) in ratios.iter().enumerate() {
        if let Some(&(_, rj)) = ratios[i..]
            .iter()
            .find(|(tj, _)| ((tj / ti).log10() - 1.0).abs() < 1e-9)
        {
            decade_drifts.push((ti, ((rj - ri) / ri).abs()));
        }
    }
    let tail = decade_drifts.len().saturating_sub(2);
    let drift = decade_drifts[tail..]
        .iter()
        .map(|d| d.1)
        .fold(0.0, f64::max);
    let warning =
        (drift > 0.2).then(|| format!("ratio has not stabilized: drift {drift:.3} per decade"));
    let mut out = AsymptoticConstants {
        ratios,
        decade_drifts,
        drift,
        warning,
        ..Default::default()
    };
    match regime {
        Regime::Ballistic { .. } => out.lambda_big = Some(value),
        _ => {
            out.varpi = Some(value);
            out.varpi_sharp = w0.perturbation.as_ref().map(|p| varpi_sharp(value, p));
        }
    }
    Ok(out)
}

/// Envelope `C₁ y^{k+1} <= p(t, y) <= C₂ y^{k+1}` for `t <= t0`, `y >= max(√t, 1)`.
#[derive(Clone, Copy, Debug)]
pub struct TimeEnvelope {
    pub k: f64,
    pub t0: f64,
    pub c1: f64,
    pub c2: f64,
}

impl TimeEnvelope {
    pub fn bounds(&self, y: f64) -> (f64, f64) {
        let e = y.powf(self.k + 1.0);
        (self.c1 * e, self.c2 * e)
    }
}

/// Fits `C₂` on a sampled `(t, y)` lattice and checks containment against `C₁ = (1 - e^{-1/t0})/2`.
pub fn bounded_time_envelope(w0: &TailInitialData, t0: f64) -> Result<TimeEnvelope> {
    let k = w0
        .family
        .growth_k()
        .ok_or_else(|| LabError::Domain("envelope needs a power family".into()))?;
    if k < -1.0 {
        return Err(LabError::Domain(format!("envelope needs k >= -1, got {k}")));
    }
    let c1 = 0.5 * (1.0 - (-1.0 / t0).exp());
    let mut c2: f64 = 0.0;
    let mut lowest = f64::INFINITY;
    for t in log_grid(t0 * 1e-3, t0, 6) {
        let y0 = t.sqrt().max(1.0);
        for y in log_grid(y0, 100.0 * y0, 8) {
            let ratio = heat_eval_quadrature(w0, t, y)? / y.powf(k + 1.0);
            c2 = c2.max(ratio);
            lowest = lowest.min(ratio);
        }
    }
    if lowest < c1 {
        return Err(LabError::Domain(format!(
            "lower envelope violated: ratio {lowest} < C1 = {c1}"
        )));
    }
    Ok(TimeEnvelope {
        k,
        t0,
        c1,
        c2: c2 * (1.0 + 1e-9),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TailRow {
    pub t: f64,
    pub y: f64,
    pub p: f64,
    pub predictor: f64,
    pub ratio: f64,
}

pub fn write_tail_csv<W: Write>(rows: &[TailRow], mut out: W) -> Result<()> {
    writeln!(out, "t,y,p,predictor,ratio")?;
    for r in rows {
        writeln!(
            out,
            "{:.10e},{:.10e},{:.12e},{:.12e},{:.12e}",
            r.t, r.y, r.p, r.predictor, r.ratio
        )?;
    }
    Ok(())
}
