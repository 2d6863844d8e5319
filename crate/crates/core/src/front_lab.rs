//! Level sets, shift-law fits and distances to shifted traveling waves.

use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{LabError, Result};
use crate::kpp_core::SpeedPair;
use crate::rd_solver::FieldSnapshot;
use crate::traveling_wave::WaveProfile;

/// Largest condition number accepted by [`fit_shift`].
pub const MAX_CONDITION: f64 = 1e8;
pub const MIN_SAMPLES: usize = 20;

/// Fritsch–Carlson slopes for the monotone cubic through `(x_k, y_k)`.
fn monotone_slopes(x: &[f64; 4], y: &[f64; 4]) -> (f64, f64) {
    let d: Vec<f64> = (0..3)
        .map(|k| (y[k + 1] - y[k]) / (x[k + 1] - x[k]))
        .collect();
    let slope = |a: f64, b: f64| {
        if a * b <= 0.0 {
            0.0
        } else {
            2.0 / (1.0 / a + 1.0 / b)
        }
    };
    let (mut m1, mut m2) = (slope(d[0], d[1]), slope(d[1], d[2]));
    if d[1] == 0.0 {
        return (0.0, 0.0);
    }
    let (a, b) = (m1 / d[1], m2 / d[1]);
    let s = a * a + b * b;
    if s > 9.0 {
        let tau = 3.0 / s.sqrt();
        m1 = tau * a * d[1];
        m2 = tau * b * d[1];
    }
    (m1, m2)
}

/// `X_m = sup{x : u(x) >= m}`, refined inside the crossing cell by a monotone cubic.
/// `None` when `m` is never attained.
pub fn level_set(snap: &FieldSnapshot, m: f64) -> Option<f64> {
    let n = snap.len();
    let i = (0..n).rev().find(|&i| snap.u(i) >= m)?;
    if i + 1 >= n {
        return Some(snap.x(n - 1));
    }
    let (u0, u1) = (snap.u(i), snap.u(i + 1));
    let xs = [
        snap.x(i.saturating_sub(1)),
        snap.x(i),
        snap.x(i + 1),
        snap.x((i + 2).min(n - 1)),
    ];
    let ys = [
        snap.u(i.saturating_sub(1)),
        u0,
        u1,
        snap.u((i + 2).min(n - 1)),
    ];
    let (m0, m1) = if i == 0 || i + 2 >= n {
        let d = (u1 - u0) / snap.dx;
        (d, d)
    } else {
        monotone_slopes(&xs, &ys)
    };
    let h = snap.dx;
    let cubic = |s: f64| {
        let s2 = s * s;
        let s3 = s2 * s;
        (2.0 * s3 - 3.0 * s2 + 1.0) * u0
            + (s3 - 2.0 * s2 + s) * h * m0
            + (-2.0 * s3 + 3.0 * s2) * u1
            + (s3 - s2) * h * m1
    };
    let (mut a, mut b) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (a + b);
        if cubic(mid) >= m {
            a = mid;
        } else {
            b = mid;
        }
    }
    Some(snap.x(i) + 0.5 * (a + b) * h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrontTrace {
    pub level: f64,
    pub samples: Vec<(f64, f64)>,
    pub run_id: String,
    pub dx: f64,
}

impl FrontTrace {
    pub fn new(level: f64, run_id: &str, dx: f64) -> Self {
        FrontTrace {
            level,
            samples: Vec::new(),
            run_id: run_id.to_string(),
            dx,
        }
    }

    /// Appends the level set of `snap`; absent fronts and non-increasing times are skipped.
    pub fn record(&mut self, snap: &FieldSnapshot) -> bool {
        if self.samples.last().map_or(false, |&(t, _)| snap.t <= t) {
            return false;
        }
        match level_set(snap, self.level) {
            Some(x) if x.is_finite() => {
                self.samples.push((snap.t, x));
                true
            }
            _ => false,
        }
    }

    pub fn at(&self, t: f64) -> Option<f64> {
        let j = self.samples.partition_point(|s| s.0 < t);
        if j == 0 || j >= self.samples.len() {
            return self.samples.get(j).filter(|s| s.0 == t).map(|s| s.1);
        }
        let (t0, x0) = self.samples[j - 1];
        let (t1, x1) = self.samples[j];
        Some(x0 + (x1 - x0) * (t - t0) / (t1 - t0))
    }

    /// CSV with `t, X_m, X_m - c t, shift` where `shift` is an optional per-sample column.
    pub fn write_csv<W: Write>(&self, c: f64, shifts: Option<&[f64]>, mut out: W) -> Result<()> {
        writeln!(
            out,
            "# kpplab-trace v1, level = {}, run = {}, dx = {}",
            self.level, self.run_id, self.dx
        )?;
        writeln!(out, "t,X_m,X_m_minus_ct,shift_at_t")?;
        for (j, &(t, x)) in self.samples.iter().enumerate() {
            let s = shifts.and_then(|s| s.get(j)).copied().unwrap_or(f64::NAN);
            writeln!(out, "{t:.10e},{x:.12e},{:.12e},{s:.12e}", x - c * t)?;
        }
        Ok(())
    }

    /// Reads a trace written by [`FrontTrace::write_csv`].
    pub fn read_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        let meta = header
            .strip_prefix("# kpplab-trace v1, ")
            .ok_or_else(|| LabError::Config("not a kpplab-trace v1 file".into()))?;
        let field = |name: &str| -> Result<&str> {
            meta.split(", ")
                .find_map(|kv| kv.strip_prefix(name).and_then(|r| r.strip_prefix(" = ")))
                .ok_or_else(|| LabError::Config(format!("trace header lacks '{name}'")))
        };
        let num = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| LabError::Config(format!("bad number '{v}' in trace")))
        };
        let mut trace = FrontTrace::new(num(field("level")?)?, field("run")?, num(field("dx")?)?);
        for line in lines.skip(1).filter(|l| !l.trim().is_empty()) {
            let mut cols = line.split(',');
            let (Some(t), Some(x)) = (cols.next(), cols.next()) else {
                return Err(LabError::Config(format!("malformed trace row '{line}'")));
            };
            trace.samples.push((num(t)?, num(x)?));
        }
        Ok(trace)
    }
}

/// A coefficient that is either fitted, pinned to a value, or absent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Term {
    Free,
    Fixed(f64),
    Off,
}

/// `X(t) ≈ c t + a ln t + b ln ln t + s`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitModel {
    pub speed: Term,
    pub ln_t: Term,
    pub ln_ln_t: Term,
}

impl FitModel {
    /// Speed pinned, `ln t` and constant fitted.
    pub fn log_shift(c: f64) -> Self {
        FitModel {
            speed: Term::Fixed(c),
            ln_t: Term::Free,
            ln_ln_t: Term::Off,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coefficient {
    pub value: f64,
    pub stderr: f64,
    pub fitted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AsymptoticFit {
    pub model: FitModel,
    pub speed: Coefficient,
    pub ln_t: Coefficient,
    pub ln_ln_t: Coefficient,
    pub constant: Coefficient,
    pub window: (f64, f64),
    pub samples: usize,
    pub residual_rms: f64,
    pub condition: f64,
}

impl AsymptoticFit {
    /// Model value at time `t`.
    pub fn eval(&self, t: f64) -> f64 {
        let lnln = if t.ln() > 0.0 { t.ln().ln() } else { 0.0 };
        self.speed.value * t
            + self.ln_t.value * t.ln()
            + self.ln_ln_t.value * lnln
            + self.constant.value
    }
}

impl fmt::Display for AsymptoticFit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "window        [{}, {}] ({} samples)",
            self.window.0, self.window.1, self.samples
        )?;
        for (name, c) in [
            ("speed", self.speed),
            ("ln t", self.ln_t),
            ("ln ln t", self.ln_ln_t),
            ("constant", self.constant),
        ] {
            let tag = if c.fitted {
                format!("± {:.3e}", c.stderr)
            } else {
                "(fixed)".to_string()
            };
            writeln!(f, "{name:<13} {:+.6} {tag}", c.value)?;
        }
        writeln!(f, "residual rms  {:.3e}", self.residual_rms)?;
        write!(f, "condition     {:.3e}", self.condition)
    }
}

/// Weighted least squares (weights `1/t`) of the trace against the model on `window`.
pub fn fit_shift(trace: &FrontTrace, model: FitModel, window: (f64, f64)) -> Result<AsymptoticFit> {
    let pts: Vec<(f64, f64)> = trace
        .samples
        .iter()
        .copied()
        .filter(|&(t, _)| t >= window.0 && t <= window.1)
        .collect();
    if pts.len() < MIN_SAMPLES {
        return Err(LabError::DegenerateFit(format!(
            "{} samples in window [{}, {}]; at least {MIN_SAMPLES} are needed",
            pts.len(),
            window.0,
            window.1
        )));
    }
    let uses_lnln = model.ln_ln_t != Term::Off;
    if uses_lnln && !(window.0.ln().ln() > 0.0) {
        return Err(LabError::DegenerateFit(format!(
            "ln ln t is not positive at the window start {}",
            window.0
        )));
    }
    type Column = fn(f64) -> f64;
    let mut columns: Vec<(usize, Column)> = Vec::new();
    let mut fixed = [0.0; 3];
    let terms = [model.speed, model.ln_t, model.ln_ln_t];
    let basis: [Column; 3] = [|t| t, |t| t.ln(), |t| t.ln().ln()];
    for (j, term) in terms.iter().enumerate() {
        match term {
            Term::Free => columns.push((j, basis[j])),
            Term::Fixed(v) => fixed[j] = *v,
            Term::Off => {}
        }
    }
    let p = columns.len() + 1;
    let n = pts.len();
    let mut a = DMatrix::<f64>::zeros(n, p);
    let mut b = DVector::<f64>::zeros(n);
    for (i, &(t, x)) in pts.iter().enumerate() {
        let w = (1.0 / t).sqrt();
        let mut target = x;
        for (j, term) in terms.iter().enumerate() {
            if let Term::Fixed(v) = term {
                target -= v * basis[j](t);
            }
        }
        for (c, (_, g)) in columns.iter().enumerate() {
            a[(i, c)] = w * g(t);
        }
        a[(i, p - 1)] = w;
        b[i] = w * target;
    }
    // Column equilibration before judging conditioning.
    let scales: Vec<f64> = (0..p).map(|c| a.column(c).norm()).collect();
    let mut scaled = a.clone();
    for c in 0..p {
        if scales[c] == 0.0 {
            return Err(LabError::DegenerateFit("a design column vanishes".into()));
        }
        scaled.column_mut(c).scale_mut(1.0 / scales[c]);
    }
    let svd = scaled.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 {
        smax / smin
    } else {
        f64::INFINITY
    };
    if condition > MAX_CONDITION {
        return Err(LabError::DegenerateFit(format!(
            "condition number {condition:.3e} exceeds {MAX_CONDITION:e}; lengthen the window or fix a coefficient"
        )));
    }
    let sol = svd
        .solve(&b, 1e-14)
        .map_err(|e| LabError::DegenerateFit(e.to_string()))?;
    let coef: Vec<f64> = (0..p).map(|c| sol[c] / scales[c]).collect();
    let resid = &a * DVector::from_vec(coef.clone()) - &b;
    let dof = (n - p).max(1) as f64;
    let sigma2 = resid.norm_squared() / dof;
    // Covariance of the scaled coefficients: V Σ^{-2} Vᵀ.
    let v_t = svd.v_t.as_ref().unwrap();
    let stderr: Vec<f64> = (0..p)
        .map(|c| {
            let var: f64 = (0..svd.singular_values.len())
                .map(|k| (v_t[(k, c)] / svd.singular_values[k]).powi(2))
                .sum();
            (sigma2 * var).sqrt() / scales[c]
        })
        .collect();
    let raw_rms = (pts
        .iter()
        .enumerate()
        .map(|(i, &(t, _))| (resid[i] / (1.0 / t).sqrt()).powi(2))
        .sum::<f64>()
        / n as f64)
        .sqrt();
    let mut out = [Coefficient {
        value: 0.0,
        stderr: 0.0,
        fitted: false,
    }; 3];
    for (j, term) in terms.iter().enumerate() {
        out[j].value = fixed[j];
        if *term == Term::Free {
            let c = columns.iter().position(|(k, _)| *k == j).unwrap();
            out[j] = Coefficient {
                value: coef[c],
                stderr: stderr[c],
                fitted: true,
            };
        }
    }
    Ok(AsymptoticFit {
        model,
        speed: out[0],
        ln_t: out[1],
        ln_ln_t: out[2],
        constant: Coefficient {
            value: coef[p - 1],
            stderr: stderr[p - 1],
            fitted: true,
        },
        window,
        samples: n,
        residual_rms: raw_rms,
        condition,
    })
}

/// `sup_{x >= 0} |u(t, x) - U(x - shift)|` over grid nodes.
pub fn wave_distance(snap: &FieldSnapshot, profile: &WaveProfile, shift: f64) -> Result<f64> {
    let center = shift + profile.inverse(0.5)?;
    let (lo, hi) = (snap.x(0), snap.x(snap.len() - 1));
    if center < lo || center > hi {
        return Err(LabError::Range(format!(
            "shifted profile center {center} lies outside the grid [{lo}, {hi}]"
        )));
    }
    let mut worst: f64 = 0.0;
    for i in 0..snap.len() {
        let x = snap.x(i);
        if x >= 0.0 {
            worst = worst.max((snap.u(i) - profile.value(x - shift)).abs());
        }
    }
    Ok(worst)
}

/// Shift minimizing [`wave_distance`] by golden-section search around the level-set estimate.
pub fn optimal_shift(snap: &FieldSnapshot, profile: &WaveProfile) -> Result<(f64, f64)> {
    let x_half = level_set(snap, 0.5)
        .ok_or_else(|| LabError::Range("the level 1/2 is not attained".into()))?;
    let guess = x_half - profile.inverse(0.5)?;
    let dist = |s: f64| wave_distance(snap, profile, s);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (guess - 1.0, guess + 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (dist(c)?, dist(d)?);
    while b - a > 1e-7 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = dist(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = dist(d)?;
        }
    }
    let s = 0.5 * (a + b);
    Ok((s, dist(s)?))
}

/// Shift law `c t + a ln t + b ln ln t` predicted for a data class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriftLaw {
    pub speed: f64,
    pub ln_t: f64,
    pub ln_ln_t: f64,
}

impl DriftLaw {
    /// Critical decay with power `k`.
    pub fn h1(k: f64, pair: &SpeedPair) -> Self {
        let l = pair.lambda_star;
        if k > -3.0 {
            DriftLaw {
                speed: pair.c_star,
                ln_t: k / (2.0 * l),
                ln_ln_t: 0.0,
            }
        } else if k == -3.0 {
            DriftLaw {
                speed: pair.c_star,
                ln_t: -1.5 / l,
                ln_ln_t: 1.0 / l,
            }
        } else {
            DriftLaw {
                speed: pair.c_star,
                ln_t: -1.5 / l,
                ln_ln_t: 0.0,
            }
        }
    }

    /// Supercritical decay `x^ν e^{-λx}`.
    pub fn h2(nu: f64, pair: &SpeedPair) -> Self {
        DriftLaw {
            speed: pair.c,
            ln_t: nu / pair.lambda,
            ln_ln_t: 0.0,
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let lnln = if self.ln_ln_t != 0.0 {
            t.ln().ln()
        } else {
            0.0
        };
        self.speed * t + self.ln_t * t.ln() + self.ln_ln_t * lnln
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SigmaEstimate {
    pub value: f64,
    /// `(t, |σ(t) - σ(t/10)|)`.
    pub decade_drift: Vec<(f64, f64)>,
    /// Largest drift among comparisons whose both ends lie in the last two decades.
    pub drift: f64,
    pub tolerance: f64,
    pub converged: bool,
}

/// `σ(t) = shift(t) - law(t)`, averaged over the last decade, with per-decade drift.
pub fn estimate_sigma_infinity(
    history: &[(f64, f64)],
    law: &DriftLaw,
    tolerance: f64,
) -> Result<SigmaEstimate> {
    if history.len() < 2 {
        return Err(LabError::Domain("need at least two shift samples".into()));
    }
    let sigma: Vec<(f64, f64)> = history.iter().map(|&(t, s)| (t, s - law.eval(t))).collect();
    let t_end = sigma.last().unwrap().0;
    let recent: Vec<f64> = sigma
        .iter()
        .filter(|s| s.0 >= 0.5 * t_end)
        .map(|s| s.1)
        .collect();
    let value = recent.iter().sum::<f64>() / recent.len() as f64;
    let at = |t: f64| -> Option<f64> {
        let j = sigma.partition_point(|s| s.0 < t);
        if j == 0 || j >= sigma.len() {
            return None;
        }
        let (t0, s0) = sigma[j - 1];
        let (t1, s1) = sigma[j];
        Some(s0 + (s1 - s0) * (t - t0) / (t1 - t0))
    };
    let mut decade_drift = Vec::new();
    for &(t, s) in &sigma {
        if let Some(prev) = at(t / 10.0) {
            decade_drift.push((t, (s - prev).abs()));
        }
    }
    let drift = decade_drift
        .iter()
        .filter(|d| d.0 >= t_end / 10.0 * 0.999)
        .map(|d| d.1)
        .fold(0.0, f64::max);
    Ok(SigmaEstimate {
        value,
        decade_drift,
        drift,
        tolerance,
        converged: drift < tolerance,
    })
}
