//! Semi-implicit finite differences for `u_t = u_xx + f(u)` in exponentially weighted
//! moving frames.
//!
//! A frame `(s, θ)` stores `q(t, y) = e^{θy} u(t, y + st)`, which solves
//! `q_t = q_yy + (s - 2θ) q_y + (θ² - sθ + f'(0)) q - e^{θy} g(e^{-θy} q)`.
//! Diffusion and drift are advanced implicitly, the whole reaction term explicitly.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{LabError, Result};
use crate::kpp_core::{lambda_of_c, KppNonlinearity, SpeedPair, EXP_CAP};
use crate::linear_tail::{heat_eval_quadrature, TailInitialData};
use crate::quadrature::{integrate, Tolerance};
use crate::traveling_wave::WaveProfile;

/// Slack allowed outside `[0, 1]` before lab values are flagged.
pub const EPS_NUM: f64 = 1e-10;
const PIN_LEVEL: f64 = 1.0 - 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub speed: f64,
    pub theta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameTag {
    Lab,
    Comoving,
    LeadingEdge,
    HalfSpeed,
    Weighted,
}

impl Frame {
    pub const LAB: Frame = Frame {
        speed: 0.0,
        theta: 0.0,
    };

    pub fn comoving(c: f64) -> Self {
        Frame {
            speed: c,
            theta: 0.0,
        }
    }

    /// `v = e^{λ(x - ct)} u`.
    pub fn leading_edge(pair: &SpeedPair) -> Self {
        Frame {
            speed: pair.c,
            theta: pair.lambda,
        }
    }

    /// `z = e^{(c/2)(x - ct)} u`.
    pub fn half_speed(pair: &SpeedPair) -> Self {
        Frame {
            speed: pair.c,
            theta: 0.5 * pair.c,
        }
    }

    pub fn tag(&self, fprime0: f64) -> FrameTag {
        if self.theta == 0.0 {
            return if self.speed == 0.0 {
                FrameTag::Lab
            } else {
                FrameTag::Comoving
            };
        }
        if (self.theta * (self.speed - self.theta) - fprime0).abs() < 1e-12
            && self.theta <= 0.5 * self.speed + 1e-12
        {
            FrameTag::LeadingEdge
        } else if (self.theta - 0.5 * self.speed).abs() < 1e-12 {
            FrameTag::HalfSpeed
        } else {
            FrameTag::Weighted
        }
    }

    /// Coefficient of `q_y`.
    pub fn drift(&self) -> f64 {
        self.speed - 2.0 * self.theta
    }

    /// Coefficient of `q`.
    pub fn growth(&self, fprime0: f64) -> f64 {
        self.theta * self.theta - self.speed * self.theta + fprime0
    }
}

/// Uniform grid in frame coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub left: f64,
    pub dx: f64,
    pub n: usize,
}

impl Grid {
    pub fn spanning(left: f64, right: f64, dx: f64) -> Self {
        Grid {
            left,
            dx,
            n: ((right - left) / dx).ceil() as usize + 1,
        }
    }

    pub fn right(&self) -> f64 {
        self.left + (self.n - 1) as f64 * self.dx
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeftBoundary {
    /// Zero flux in `u`.
    Reflecting,
    /// `u = 1`.
    Pinned,
}

#[derive(Clone, Debug)]
pub struct FieldSnapshot {
    pub t: f64,
    pub frame: Frame,
    pub y_left: f64,
    pub dx: f64,
    pub q: Vec<f64>,
    pub left: LeftBoundary,
}

impl FieldSnapshot {
    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn y(&self, i: usize) -> f64 {
        self.y_left + i as f64 * self.dx
    }

    /// Lab position of node `i`.
    pub fn x(&self, i: usize) -> f64 {
        self.y(i) + self.frame.speed * self.t
    }

    pub fn y_right(&self) -> f64 {
        self.y(self.len() - 1)
    }

    pub fn u(&self, i: usize) -> f64 {
        let a = -self.frame.theta * self.y(i);
        if a < -EXP_CAP {
            0.0
        } else {
            self.q[i] * a.exp()
        }
    }

    pub fn u_values(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.u(i)).collect()
    }

    /// Largest lab value.
    pub fn sup_u(&self) -> f64 {
        (0..self.len())
            .map(|i| self.u(i))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `u` at a lab position by linear interpolation; `None` outside the grid.
    pub fn u_at(&self, x: f64) -> Option<f64> {
        let s = (x - self.frame.speed * self.t - self.y_left) / self.dx;
        if s < 0.0 || s > (self.len() - 1) as f64 {
            return None;
        }
        let i = (s.floor() as usize).min(self.len() - 2);
        let w = s - i as f64;
        Some((1.0 - w) * self.u(i) + w * self.u(i + 1))
    }

    /// CSV checkpoint: a header line with `(t, x_left, dx, n, speed, theta)` and one `x,u,q` row per node.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# kpplab-snapshot v1")?;
        writeln!(out, "t,x_left,dx,n,speed,theta")?;
        writeln!(
            out,
            "{:.12e},{:.12e},{:.12e},{},{:.12e},{:.12e}",
            self.t,
            self.x(0),
            self.dx,
            self.len(),
            self.frame.speed,
            self.frame.theta
        )?;
        writeln!(out, "x,u,q")?;
        for i in 0..self.len() {
            writeln!(
                out,
                "{:.12e},{:.16e},{:.16e}",
                self.x(i),
                self.u(i),
                self.q[i]
            )?;
        }
        Ok(())
    }
}

/// Reweights a snapshot into another frame; same lab points, same time.
pub fn frame_transform(snap: &FieldSnapshot, target: Frame) -> Result<FieldSnapshot> {
    let shift = (snap.frame.speed - target.speed) * snap.t;
    let mut q = Vec::with_capacity(snap.len());
    for i in 0..snap.len() {
        let y_old = snap.y(i);
        let y_new = y_old + shift;
        let a = target.theta * y_new - snap.frame.theta * y_old;
        if a > EXP_CAP {
            return Err(LabError::Range(format!(
                "weight e^{a:.1} at y = {y_new} overflows the target frame"
            )));
        }
        q.push(snap.q[i] * a.exp());
    }
    Ok(FieldSnapshot {
        t: snap.t,
        frame: target,
        y_left: snap.y_left + shift,
        dx: snap.dx,
        q,
        left: snap.left,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Oscillation {
    None,
    /// `a1` and `a2` alternate on blocks `[2^j A, 2^{j+1} A)`.
    Alternating,
    /// Each block picks `a1` or `a2` from a seeded generator.
    Random {
        seed: u64,
    },
}

#[derive(Clone)]
pub enum DataFamily {
    /// `x^{k+1} e^{-λx}` beyond the junction.
    H1 { k: f64, lambda: f64 },
    /// `x^ν e^{-λx}` beyond the junction.
    H2 { nu: f64, lambda: f64 },
    /// One up to `x = 0`, a smooth drop to zero on `[0, width]`.
    Localized { width: f64 },
    /// A traveling-wave profile.
    Wave {
        profile: Arc<WaveProfile>,
        shift: f64,
    },
}

impl fmt::Debug for DataFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataFamily::H1 { k, lambda } => write!(f, "H1(k = {k}, lambda = {lambda})"),
            DataFamily::H2 { nu, lambda } => write!(f, "H2(nu = {nu}, lambda = {lambda})"),
            DataFamily::Localized { width } => write!(f, "Localized(width = {width})"),
            DataFamily::Wave { profile, shift } => {
                write!(f, "Wave(c = {}, shift = {shift})", profile.pair.c)
            }
        }
    }
}

fn smoothstep(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * (3.0 - 2.0 * s)
}

/// Front-like initial data: one on the left, an exact envelope beyond the junction.
#[derive(Clone, Debug)]
pub struct FrontInitialData {
    pub family: DataFamily,
    pub a1: f64,
    pub a2: f64,
    pub junction: f64,
    pub oscillation: Oscillation,
    blocks: Vec<f64>,
}

const BLOCKS: usize = 64;

impl FrontInitialData {
    fn new(family: DataFamily, a: f64, junction: f64) -> Self {
        FrontInitialData {
            family,
            a1: a,
            a2: a,
            junction,
            oscillation: Oscillation::None,
            blocks: Vec::new(),
        }
    }

    pub fn h1(k: f64, a: f64, pair: &SpeedPair) -> Self {
        Self::new(
            DataFamily::H1 {
                k,
                lambda: pair.lambda_star,
            },
            a,
            10.0,
        )
    }

    pub fn h2(nu: f64, a: f64, pair: &SpeedPair) -> Self {
        Self::new(
            DataFamily::H2 {
                nu,
                lambda: pair.lambda,
            },
            a,
            10.0,
        )
    }

    pub fn localized(width: f64) -> Self {
        Self::new(DataFamily::Localized { width }, 1.0, width)
    }

    pub fn wave(profile: Arc<WaveProfile>, shift: f64) -> Self {
        Self::new(DataFamily::Wave { profile, shift }, 1.0, 0.0)
    }

    pub fn with_junction(mut self, a: f64) -> Self {
        self.junction = a;
        self
    }

    /// Lets the envelope coefficient move between `a1 <= a2` block by block.
    pub fn with_oscillation(mut self, a1: f64, a2: f64, rule: Oscillation) -> Result<Self> {
        if !(a1 > 0.0 && a1 <= a2) {
            return Err(LabError::Domain(format!(
                "need 0 < a1 <= a2, got a1 = {a1}, a2 = {a2}"
            )));
        }
        self.a1 = a1;
        self.a2 = a2;
        self.oscillation = rule;
        self.blocks = match rule {
            Oscillation::None => Vec::new(),
            Oscillation::Alternating => (0..BLOCKS)
                .map(|j| if j % 2 == 0 { a1 } else { a2 })
                .collect(),
            Oscillation::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..BLOCKS)
                    .map(|_| if rng.gen_bool(0.5) { a2 } else { a1 })
                    .collect()
            }
        };
        Ok(self)
    }

    /// Decay rate of the envelope, if any.
    pub fn rate(&self) -> Option<f64> {
        match &self.family {
            DataFamily::H1 { lambda, .. } | DataFamily::H2 { lambda, .. } => Some(*lambda),
            DataFamily::Wave { profile, .. } => Some(profile.pair.lambda),
            DataFamily::Localized { .. } => None,
        }
    }

    /// Envelope coefficient at `x >= A`, blended over one unit at block edges.
    pub fn coefficient(&self, x: f64) -> f64 {
        if self.blocks.is_empty() {
            return self.a2;
        }
        let a = self.junction.max(1.0);
        let j = ((x / a).log2().floor().max(0.0) as usize).min(BLOCKS - 1);
        let start = a * 2f64.powi(j as i32);
        if j > 0 && x - start < 1.0 {
            let prev = self.blocks[j - 1];
            prev + (self.blocks[j] - prev) * smoothstep(x - start)
        } else {
            self.blocks[j]
        }
    }

    /// `ln` of the envelope shape.
    fn ln_shape(&self, x: f64) -> f64 {
        match &self.family {
            DataFamily::H1 { k, lambda } => (k + 1.0) * x.ln() - lambda * x,
            DataFamily::H2 { nu, lambda } => nu * x.ln() - lambda * x,
            _ => f64::NEG_INFINITY,
        }
    }

    /// `e^{θx} u₀(x)`, evaluated without overflow.
    pub fn weighted(&self, x: f64, theta: f64) -> f64 {
        match &self.family {
            DataFamily::Wave { profile, shift } => {
                profile.weighted(x - shift, theta) * (theta * shift).exp()
            }
            DataFamily::Localized { width } => {
                if x <= 0.0 {
                    (theta * x).exp()
                } else if x >= *width {
                    0.0
                } else {
                    (theta * x).exp() * (1.0 - smoothstep(x / width))
                }
            }
            _ => {
                let a = self.junction;
                if x >= a {
                    (self.coefficient(x).ln() + self.ln_shape(x) + theta * x).exp()
                } else if x <= 0.0 {
                    (theta * x).exp()
                } else {
                    let end = (self.coefficient(a).ln() + self.ln_shape(a)).exp();
                    (theta * x).exp() * (1.0 - smoothstep(x / a) * (1.0 - end))
                }
            }
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        self.weighted(x, 0.0)
    }

    /// Checks `u₀ <= 1` at the junction.
    pub fn validate(&self) -> Result<()> {
        if matches!(self.family, DataFamily::H1 { .. } | DataFamily::H2 { .. }) {
            let end = (self.a2.ln() + self.ln_shape(self.junction)).exp();
            if !(end < 1.0) || self.junction <= 0.0 {
                return Err(LabError::Domain(format!(
                    "envelope value {end} at the junction A = {} must be below one",
                    self.junction
                )));
            }
        }
        Ok(())
    }

    fn breakpoints(&self) -> Vec<f64> {
        let mut b = vec![0.0];
        match &self.family {
            DataFamily::Localized { width } => b.push(*width),
            DataFamily::Wave { .. } => {}
            _ => {
                b.push(self.junction);
                if !self.blocks.is_empty() {
                    let a = self.junction.max(1.0);
                    for j in 1..BLOCKS {
                        let s = a * 2f64.powi(j as i32);
                        b.extend([s, s + 1.0]);
                    }
                }
            }
        }
        b
    }
}

/// Samples the initial data on a grid in the given frame.
pub fn build_initial(data: &FrontInitialData, frame: Frame, grid: Grid) -> Result<FieldSnapshot> {
    data.validate()?;
    if let Some(rate) = data.rate() {
        if grid.dx > 1.0 / (8.0 * rate) {
            return Err(LabError::Resolution(format!(
                "dx = {} resolves the decay length 1/{rate} with fewer than 8 points",
                grid.dx
            )));
        }
    }
    let q = (0..grid.n)
        .map(|i| data.weighted(grid.left + i as f64 * grid.dx, frame.theta))
        .collect();
    Ok(FieldSnapshot {
        t: 0.0,
        frame,
        y_left: grid.left,
        dx: grid.dx,
        q,
        left: LeftBoundary::Reflecting,
    })
}

/// `min(1, θ₁ e^{-λ₁(x - ω₁ t)})` with `λ₁² - ω₁λ₁ + f'(0) = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SupersolutionEnvelope {
    pub theta1: f64,
    pub lambda1: f64,
    pub omega1: f64,
}

impl SupersolutionEnvelope {
    /// Smallest `θ₁` dominating the data, for a speed `ω₁` above the minimal one.
    pub fn for_data(
        data: &FrontInitialData,
        omega1: f64,
        fprime0: f64,
        x_left: f64,
    ) -> Result<Self> {
        let lambda1 = lambda_of_c(omega1, fprime0)?.lambda;
        if let Some(rate) = data.rate() {
            if lambda1 >= rate {
                return Err(LabError::Domain(format!(
                    "envelope rate {lambda1} must be below the data rate {rate}"
                )));
            }
        }
        let reach = match data.rate() {
            Some(rate) => 200.0 / (rate - lambda1) + data.junction,
            None => data.junction + 1.0,
        };
        let n = 200_000;
        let mut ln_theta = f64::NEG_INFINITY;
        for i in 0..=n {
            let x = x_left + (reach - x_left) * i as f64 / n as f64;
            let u = data.value(x);
            if u > 0.0 {
                ln_theta = ln_theta.max(u.ln() + lambda1 * x);
            }
        }
        Ok(SupersolutionEnvelope {
            theta1: ln_theta.exp() * (1.0 + 1e-9),
            lambda1,
            omega1,
        })
    }

    pub fn value(&self, t: f64, x: f64) -> f64 {
        if self.theta1 == 0.0 {
            return 0.0;
        }
        (self.theta1.ln() - self.lambda1 * (x - self.omega1 * t))
            .exp()
            .min(1.0)
    }
}

/// Linear far field `e^{ℓt} p(t, y + bt)` of the frame equation, with Dirichlet reflection of the
/// data at the origin.
#[derive(Clone, Debug)]
pub struct FarField {
    data: TailInitialData,
    growth: f64,
    drift: f64,
}

impl FarField {
    pub fn new(data: &FrontInitialData, frame: Frame, fprime0: f64) -> Self {
        let d = data.clone();
        let theta = frame.theta;
        let w0 = TailInitialData::restart(
            "frame data",
            Arc::new(move |z: f64| d.weighted(z, theta)),
            data.breakpoints(),
        );
        FarField {
            data: w0,
            growth: frame.growth(fprime0),
            drift: frame.drift(),
        }
    }

    pub fn value(&self, t: f64, y: f64) -> Result<f64> {
        if t <= 0.0 {
            return Ok(self.data.eval(y));
        }
        Ok((self.growth * t).exp() * heat_eval_quadrature(&self.data, t, y + self.drift * t)?)
    }
}

/// Linear supersolution `e^{f'(0)t} (G_t * u₀)(x)` of the lab-frame equation, evaluated in log space.
#[derive(Clone, Debug)]
pub struct HeatBound {
    data: FrontInitialData,
    fprime0: f64,
}

impl HeatBound {
    pub fn new(data: &FrontInitialData, fprime0: f64) -> Self {
        HeatBound {
            data: data.clone(),
            fprime0,
        }
    }

    /// Natural log of the bound at `(t, x)`.
    pub fn ln_value(&self, t: f64, x: f64) -> Result<f64> {
        if t <= 0.0 {
            return Ok(self.data.value(x).ln());
        }
        let s = 4.0 * t;
        let reach = 40.0 * t.sqrt();
        let z0 = (x - reach).min(-20.0);
        let hi = x + reach;
        let ln_u0 = |z: f64| {
            let u = self.data.value(z);
            if u > 0.0 {
                u.ln()
            } else {
                f64::NEG_INFINITY
            }
        };
        let expo = |z: f64| ln_u0(z) - (x - z) * (x - z) / s;
        let samples = 4000;
        let (mut peak, mut m) = (z0, f64::NEG_INFINITY);
        for i in 0..=samples {
            let z = z0 + (hi - z0) * i as f64 / samples as f64;
            let e = expo(z);
            if e > m {
                m = e;
                peak = z;
            }
        }
        // Mass of the kernel below z0, where u₀ <= 1.
        let left = ln_half_erfc((x - z0) / s.sqrt());
        if m == f64::NEG_INFINITY {
            return Ok(self.fprime0 * t + left);
        }
        let mut breaks = self.data.breakpoints();
        breaks.push(peak);
        let tol = Tolerance {
            rel: 1e-8,
            abs: 0.0,
            max_panels: 4000,
        };
        let est = integrate(|z| (expo(z) - m).exp(), z0, hi, &breaks, tol)?;
        let inner = m + (est.value / (PI * s).sqrt()).ln();
        let hi_part = inner.max(left);
        let total = hi_part + ((inner - hi_part).exp() + (left - hi_part).exp()).ln();
        Ok(self.fprime0 * t + total)
    }
}

/// `ln(erfc(a) / 2)`, with the asymptotic series for large arguments.
fn ln_half_erfc(a: f64) -> f64 {
    if a < 20.0 {
        (0.5 * statrs::function::erf::erfc(a)).ln()
    } else {
        let a2 = a * a;
        -a2 - (2.0 * a * PI.sqrt()).ln() + (1.0 - 0.5 / a2 + 0.75 / (a2 * a2)).ln()
    }
}

#[derive(Clone, Debug)]
pub enum RightBoundary {
    Envelope(SupersolutionEnvelope),
    /// Envelope capped by the linear heat supersolution.
    Capped(SupersolutionEnvelope, HeatBound),
    FarField(FarField),
    Zero,
}

impl RightBoundary {
    fn value(&self, frame: Frame, t: f64, y: f64) -> Result<f64> {
        match self {
            RightBoundary::Envelope(e) => {
                let x = y + frame.speed * t;
                let u = e.value(t, x);
                Ok(if u == 0.0 {
                    0.0
                } else {
                    (u.ln() + frame.theta * y).exp()
                })
            }
            RightBoundary::Capped(e, h) => {
                let x = y + frame.speed * t;
                let u = e.value(t, x);
                if u == 0.0 {
                    return Ok(0.0);
                }
                let ln_u = u.ln().min(h.ln_value(t, x)?);
                Ok((ln_u + frame.theta * y).exp())
            }
            RightBoundary::FarField(f) => f.value(t, y),
            RightBoundary::Zero => Ok(0.0),
        }
    }
}

/// Growth and trimming of the computational interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainPolicy {
    /// Keep the right edge at least `margin √(t + 1)` ahead of the front.
    pub margin: f64,
    /// For envelope boundaries, keep the right edge at least this many decay lengths past `ω₁t`.
    pub envelope_lengths: f64,
    /// Drop nodes more than this far behind the front (lab frame runs).
    pub keep_behind: Option<f64>,
    pub max_nodes: usize,
}

impl Default for DomainPolicy {
    fn default() -> Self {
        DomainPolicy {
            margin: 8.0,
            envelope_lengths: 40.0,
            keep_behind: None,
            max_nodes: 2_000_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    pub dt: f64,
    pub policy: DomainPolicy,
    /// Observer cadence in time; `None` disables sampling.
    pub sample_every: Option<f64>,
}

impl SolverConfig {
    pub fn for_dx(dx: f64) -> Self {
        SolverConfig {
            dt: dx.min(0.25),
            policy: DomainPolicy::default(),
            sample_every: None,
        }
    }
}

struct Factor {
    n: usize,
    pinned: bool,
    cp: Vec<f64>,
    inv: Vec<f64>,
}

pub struct Solver {
    snap: FieldSnapshot,
    f: KppNonlinearity,
    config: SolverConfig,
    right: RightBoundary,
    decay: Vec<f64>,
    factor: Option<Factor>,
    scratch: Vec<f64>,
    steps: u64,
}

impl Solver {
    pub fn new(
        f: &KppNonlinearity,
        initial: FieldSnapshot,
        right: RightBoundary,
        config: SolverConfig,
    ) -> Result<Self> {
        if !(config.dt > 0.0) {
            return Err(LabError::Domain(format!(
                "dt = {} must be positive",
                config.dt
            )));
        }
        if initial.len() < 4 {
            return Err(LabError::Domain("grid needs at least four nodes".into()));
        }
        if initial.frame.drift().abs() * initial.dx >= 2.0 {
            return Err(LabError::Resolution(format!(
                "cell Peclet number {} is too large for dx = {}",
                0.5 * initial.frame.drift().abs() * initial.dx,
                initial.dx
            )));
        }
        let mut s = Solver {
            snap: initial,
            f: f.clone(),
            config,
            right,
            decay: Vec::new(),
            factor: None,
            scratch: Vec::new(),
            steps: 0,
        };
        s.refresh_decay();
        Ok(s)
    }

    pub fn snapshot(&self) -> &FieldSnapshot {
        &self.snap
    }

    pub fn into_snapshot(self) -> FieldSnapshot {
        self.snap
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn right_boundary(&self) -> &RightBoundary {
        &self.right
    }

    fn refresh_decay(&mut self) {
        let th = self.snap.frame.theta;
        self.decay = (0..self.snap.len())
            .map(|i| {
                let a = -th * self.snap.y(i);
                if a < -EXP_CAP {
                    0.0
                } else {
                    a.exp()
                }
            })
            .collect();
    }

    fn coefficients(&self) -> (f64, f64, f64) {
        let dt = self.config.dt;
        let dx = self.snap.dx;
        let b = self.snap.frame.drift();
        let lo = -dt * (1.0 / (dx * dx) - b / (2.0 * dx));
        let up = -dt * (1.0 / (dx * dx) + b / (2.0 * dx));
        let di = 1.0 + dt * 2.0 / (dx * dx);
        (lo, di, up)
    }

    fn ensure_factor(&mut self) {
        let n = self.snap.len();
        let pinned = self.snap.left == LeftBoundary::Pinned;
        if let Some(fac) = &self.factor {
            if fac.n == n && fac.pinned == pinned {
                return;
            }
        }
        let (lo, di, up) = self.coefficients();
        let ghost = (-2.0 * self.snap.frame.theta * self.snap.dx).exp();
        let mut cp = vec![0.0; n];
        let mut inv = vec![0.0; n];
        // Row 0.
        let (d0, c0) = if pinned {
            (1.0, 0.0)
        } else {
            (di, up + lo * ghost)
        };
        inv[0] = 1.0 / d0;
        cp[0] = c0 * inv[0];
        for i in 1..n - 1 {
            let den = di - lo * cp[i - 1];
            inv[i] = 1.0 / den;
            cp[i] = up * inv[i];
        }
        inv[n - 1] = 1.0;
        cp[n - 1] = 0.0;
        self.factor = Some(Factor { n, pinned, cp, inv });
    }

    /// One step of length `dt`.
    pub fn step(&mut self) -> Result<()> {
        let dt = self.config.dt;
        let n = self.snap.len();
        if self.snap.left == LeftBoundary::Reflecting && self.snap.u(0) > PIN_LEVEL {
            self.snap.left = LeftBoundary::Pinned;
        }
        self.ensure_factor();
        let t_new = self.snap.t + dt;
        let right = self
            .right
            .value(self.snap.frame, t_new, self.snap.y_right())?;
        let (lo, _, _) = self.coefficients();
        let growth = self.snap.frame.growth(self.f.fprime0());
        let fac = self.factor.as_ref().unwrap();
        let q = &mut self.snap.q;
        self.scratch.resize(n, 0.0);
        let r = &mut self.scratch;
        if self.f.is_fisher() {
            for ((ri, &qi), &di) in r.iter_mut().zip(q.iter()).zip(self.decay.iter()) {
                let u = qi * di;
                let gs = if u < 1.0 {
                    u.max(0.0)
                } else {
                    self.f.g_over_s(u)
                };
                *ri = qi + dt * qi * (growth - gs);
            }
        } else {
            for i in 0..n {
                let u = q[i] * self.decay[i];
                r[i] = q[i] + dt * q[i] * (growth - self.f.g_over_s(u));
            }
        }
        if self.snap.left == LeftBoundary::Pinned {
            r[0] = 1.0 / self.decay[0];
        }
        r[n - 1] = right;
        // Forward sweep; the last row is an identity so its lower entry is zero.
        let mut prev = 0.0;
        for (ri, &inv) in r[..n - 1].iter_mut().zip(fac.inv.iter()) {
            prev = (*ri - lo * prev) * inv;
            *ri = prev;
        }
        let mut next = r[n - 1];
        for (ri, &cp) in r[..n - 1].iter_mut().zip(fac.cp.iter()).rev() {
            next = *ri - cp * next;
            *ri = next;
        }
        std::mem::swap(q, r);
        self.snap.t = t_new;
        self.steps += 1;
        self.check_range()
    }

    fn check_range(&mut self) -> Result<()> {
        let th = self.snap.frame.theta;
        let tol = if th == 0.0 {
            1e-6
        } else {
            1e-6 + th * th * self.snap.dx * self.snap.dx
        };
        let mut sup = f64::NEG_INFINITY;
        let mut bad = false;
        for (&q, &d) in self.snap.q.iter().zip(self.decay.iter()) {
            let u = q * d;
            bad |= u.is_nan();
            sup = if u > sup { u } else { sup };
        }
        if bad {
            sup = f64::INFINITY;
        }
        if !(sup <= 1.0 + tol) {
            return Err(LabError::Unstable {
                t: self.snap.t,
                sup,
                suggested_dt: 0.5 * self.config.dt,
            });
        }
        if th == 0.0 {
            for v in self.snap.q.iter_mut() {
                if *v < 0.0 && *v >= -EPS_NUM {
                    *v = 0.0;
                } else if *v > 1.0 && *v <= 1.0 + EPS_NUM {
                    *v = 1.0;
                }
            }
        }
        Ok(())
    }

    /// Frame coordinate of the rightmost node with `u >= m`.
    fn rough_front(&self, m: f64) -> Option<f64> {
        (0..self.snap.len())
            .rev()
            .find(|&i| self.snap.q[i] * self.decay[i] >= m)
            .map(|i| self.snap.y(i))
    }

    /// Extends the grid to the right (filled from the boundary rule) and trims it on the left.
    /// Returns whether the grid changed.
    pub fn manage_domain(&mut self) -> Result<bool> {
        let policy = self.config.policy;
        let t = self.snap.t;
        let front = self.rough_front(0.5).unwrap_or(self.snap.y_left);
        let mut need = front + policy.margin * (t + 1.0).sqrt();
        if let RightBoundary::Envelope(e) = &self.right {
            if e.theta1 > 0.0 {
                need = need.max(
                    e.omega1 * t - self.snap.frame.speed * t + policy.envelope_lengths / e.lambda1,
                );
            }
        }
        let mut changed = false;
        if self.snap.y_right() < need {
            let target = need + 0.25 * (need - front).max(10.0);
            let extra = ((target - self.snap.y_right()) / self.snap.dx).ceil() as usize;
            if self.snap.len() + extra > policy.max_nodes {
                return Err(LabError::Resolution(format!(
                    "domain would exceed {} nodes at t = {t}",
                    policy.max_nodes
                )));
            }
            for _ in 0..extra {
                let y = self.snap.y_right() + self.snap.dx;
                let v = self.right.value(self.snap.frame, t, y)?;
                self.snap.q.push(v);
            }
            changed = true;
        }
        if let Some(keep) = policy.keep_behind {
            let cut = front - keep;
            if cut - self.snap.y_left > keep && self.snap.left == LeftBoundary::Pinned {
                let drop = ((cut - self.snap.y_left) / self.snap.dx).floor() as usize;
                self.snap.q.drain(..drop);
                self.snap.y_left += drop as f64 * self.snap.dx;
                let w = (self.snap.frame.theta * self.snap.y_left).exp();
                self.snap.q[0] = w;
                changed = true;
            }
        }
        if changed {
            self.refresh_decay();
            self.factor = None;
        }
        Ok(changed)
    }

    /// Advances to `t_end`, managing the domain every few steps and calling `observer` at the
    /// configured cadence (and at the final time).
    pub fn run_until<F>(&mut self, t_end: f64, mut observer: F) -> Result<()>
    where
        F: FnMut(&FieldSnapshot) -> Result<()>,
    {
        let every = self.config.sample_every;
        let mut next = every.map(|e| (self.snap.t / e).floor() * e + e);
        let check_every = ((1.0 / self.config.dt).ceil() as u64).max(1);
        self.manage_domain()?;
        while self.snap.t < t_end - 1e-9 * self.config.dt {
            let remaining = t_end - self.snap.t;
            if remaining < self.config.dt * (1.0 - 1e-9) {
                let saved = self.config.dt;
                self.config.dt = remaining;
                self.factor = None;
                let res = self.step();
                self.config.dt = saved;
                self.factor = None;
                res?;
            } else {
                self.step()?;
            }
            if self.steps % check_every == 0 {
                self.manage_domain()?;
            }
            if let Some(nt) = next {
                if self.snap.t >= nt - 1e-9 {
                    observer(&self.snap)?;
                    let e = every.unwrap();
                    next = Some((self.snap.t / e + 1e-9).floor() * e + e);
                }
            }
        }
        if every.is_none() {
            observer(&self.snap)?;
        }
        Ok(())
    }
}

/// Convenience: a solver for `data` in `frame` on `[left, right]` with the natural right boundary
/// (supersolution envelope in the lab frame, linear far field in weighted frames).
pub fn setup(
    f: &KppNonlinearity,
    data: &FrontInitialData,
    frame: Frame,
    grid: Grid,
    config: SolverConfig,
) -> Result<Solver> {
    let initial = build_initial(data, frame, grid)?;
    let right = if frame.theta == 0.0 {
        let c_ref = match data.rate() {
            Some(rate) => rate + f.fprime0() / rate,
            None => 2.0 * f.fprime0().sqrt(),
        };
        let env = SupersolutionEnvelope::for_data(data, 1.1 * c_ref, f.fprime0(), grid.left)?;
        RightBoundary::Capped(env, HeatBound::new(data, f.fprime0()))
    } else {
        RightBoundary::FarField(FarField::new(data, frame, f.fprime0()))
    };
    Solver::new(f, initial, right, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traveling_wave::{solve_profile, ProfileGrid};

    fn fisher() -> KppNonlinearity {
        KppNonlinearity::fisher()
    }

    #[test]
    fn envelope_formula_values() {
        let pair = SpeedPair::critical(1.0);
        let d = FrontInitialData::h1(0.0, 1.0, &pair);
        assert!((d.value(20.0) - 20.0 * (-20.0f64).exp()).abs() < 1e-20);
        let p2 = SpeedPair::from_lambda(0.5, 1.0).unwrap();
        let d2 = FrontInitialData::h2(2.0, 0.3, &p2);
        assert!((d2.value(30.0) / (0.3 * 900.0 * (-15.0f64).exp()) - 1.0).abs() < 1e-12);
        let l1 = lambda_of_c(2.2, 1.0).unwrap().lambda;
        assert!((l1 - (2.2 - 0.84f64.sqrt()) / 2.0).abs() < 1e-15);
        assert!((l1 - 0.641_742).abs() < 1e-6);
    }

    #[test]
    fn initial_data_is_monotone_and_bounded() {
        let pair = SpeedPair::critical(1.0);
        let d = FrontInitialData::h1(2.0, 1.0, &pair)
            .with_oscillation(0.5, 2.0, Oscillation::Random { seed: 7 })
            .unwrap();
        let mut prev = 1.0;
        for i in 0..4000 {
            let x = -5.0 + 0.01 * i as f64;
            let u = d.value(x);
            assert!((0.0..=1.0).contains(&u));
            if x < d.junction {
                assert!(u <= prev + 1e-15);
            }
            prev = u;
            if x >= d.junction {
                let shape = x.powi(3) * (-x).exp();
                assert!(u >= 0.5 * shape * (1.0 - 1e-12) && u <= 2.0 * shape * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn coarse_grid_is_rejected() {
        let pair = SpeedPair::critical(1.0);
        let d = FrontInitialData::h1(0.0, 1.0, &pair);
        let g = Grid {
            left: -10.0,
            dx: 0.2,
            n: 100,
        };
        assert!(matches!(
            build_initial(&d, Frame::LAB, g),
            Err(LabError::Resolution(_))
        ));
    }

    #[test]
    fn frame_round_trips() {
        let pair = SpeedPair::critical(1.0);
        let d = FrontInitialData::h1(-1.0, 1.0, &pair);
        let mut snap = build_initial(&d, Frame::LAB, Grid::spanning(-20.0, 60.0, 0.05)).unwrap();
        snap.t = 3.0;
        let v = frame_transform(&snap, Frame::leading_edge(&pair)).unwrap();
        let back = frame_transform(&v, Frame::LAB).unwrap();
        for i in 0..snap.len() {
            assert!((back.q[i] - snap.q[i]).abs() <= 1e-12 * snap.q[i].abs());
            assert!((v.x(i) - snap.x(i)).abs() < 1e-9);
        }
        // Unit weight at x = c* t.
        let i = ((6.0 - snap.x(0)) / snap.dx).round() as usize;
        assert!((v.x(i) - 6.0).abs() < 1e-9);
        assert!((v.q[i] - snap.q[i]).abs() <= 1e-14);
        let p2 = SpeedPair::from_lambda(0.5, 1.0).unwrap();
        let a = frame_transform(&snap, Frame::leading_edge(&p2)).unwrap();
        let z = frame_transform(&snap, Frame::half_speed(&p2)).unwrap();
        for i in (0..snap.len()).step_by(97) {
            if a.q[i] > 0.0 {
                let xi = a.y(i);
                let ratio = z.q[i] / a.q[i];
                assert!((ratio / (0.5 * p2.mu * xi).exp() - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(Frame::half_speed(&p2).tag(1.0), FrameTag::HalfSpeed);
        assert_eq!(Frame::leading_edge(&pair).tag(1.0), FrameTag::LeadingEdge);
        let far = FieldSnapshot {
            t: 0.0,
            frame: Frame::LAB,
            y_left: 0.0,
            dx: 1.0,
            q: vec![1.0, 1.0, 1.0, 1e3],
            left: LeftBoundary::Reflecting,
        };
        let mut big = far.clone();
        big.y_left = 900.0;
        assert!(matches!(
            frame_transform(&big, Frame::leading_edge(&pair)),
            Err(LabError::Range(_))
        ));
    }

    #[test]
    fn constant_states_are_preserved() {
        let f = fisher();
        for &level in &[0.0, 1.0] {
            let q = vec![level; 400];
            let snap = FieldSnapshot {
                t: 0.0,
                frame: Frame::LAB,
                y_left: -10.0,
                dx: 0.05,
                q,
                left: LeftBoundary::Reflecting,
            };
            let env = SupersolutionEnvelope {
                theta1: if level == 0.0 { 0.0 } else { 1e30 },
                lambda1: 0.64,
                omega1: 2.2,
            };
            let mut s = Solver::new(
                &f,
                snap,
                RightBoundary::Envelope(env),
                SolverConfig::for_dx(0.05),
            )
            .unwrap();
            for _ in 0..200 {
                s.step().unwrap();
            }
            assert!(s.snapshot().q.iter().all(|&v| (v - level).abs() < 1e-12));
        }
    }

    #[test]
    fn domain_extension_respects_envelope() {
        let f = fisher();
        let d = FrontInitialData::localized(1.0);
        let mut cfg = SolverConfig::for_dx(0.05);
        cfg.policy.envelope_lengths = 10.0;
        let mut s = setup(&f, &d, Frame::LAB, Grid::spanning(-10.0, 20.0, 0.05), cfg).unwrap();
        let env = match s.right_boundary() {
            RightBoundary::Capped(e, _) => *e,
            _ => unreachable!(),
        };
        let n0 = s.snapshot().len();
        s.run_until(20.0, |_| Ok(())).unwrap();
        let snap = s.snapshot();
        assert!(snap.len() > n0);
        for i in 0..snap.len() {
            assert!(
                snap.u(i) <= env.value(snap.t, snap.x(i)) + 1e-9,
                "x = {}: {} vs {}",
                snap.x(i),
                snap.u(i),
                env.value(snap.t, snap.x(i))
            );
        }
        // A second call with the margin met does nothing.
        assert!(!s.manage_domain().unwrap());
    }

    #[test]
    fn wave_data_translates_in_the_leading_edge_frame() {
        let f = fisher();
        let profile = Arc::new(solve_profile(&f, 2.0, ProfileGrid::default()).unwrap());
        let pair = SpeedPair::critical(1.0);
        let d = FrontInitialData::wave(profile.clone(), 0.0);
        let mut s = setup(
            &f,
            &d,
            Frame::leading_edge(&pair),
            Grid::spanning(-40.0, 60.0, 0.05),
            SolverConfig::for_dx(0.05),
        )
        .unwrap();
        let v0 = s.snapshot().q.clone();
        s.run_until(20.0, |_| Ok(())).unwrap();
        let snap = s.snapshot();
        for i in (0..v0.len()).step_by(50) {
            let y = snap.y(i);
            if y > -10.0 && y < 40.0 {
                assert!(
                    (snap.q[i] - v0[i]).abs() < 2e-3 * (1.0 + v0[i]),
                    "y = {y}: {} vs {}",
                    snap.q[i],
                    v0[i]
                );
            }
        }
    }

    #[test]
    fn csv_checkpoint_layout() {
        let snap = FieldSnapshot {
            t: 1.5,
            frame: Frame::LAB,
            y_left: 0.0,
            dx: 0.5,
            q: vec![1.0, 0.5, 0.0],
            left: LeftBoundary::Reflecting,
        };
        let mut buf = Vec::new();
        snap.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[1], "t,x_left,dx,n,speed,theta");
        assert_eq!(lines[3], "x,u,q");
        assert_eq!(lines.len(), 7);
    }
}
