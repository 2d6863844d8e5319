//! Experiment scenarios: configuration, execution, result records and reports.
//!
//! Configuration files are flat `key = value` lines; `#` starts a comment. Keys:
//!
//! | key | meaning |
//! |-----|---------|
//! | `scenario` | one of the ids in [`ScenarioId`] |
//! | `f` | `fisher` or `cubic:<a>` |
//! | `k`, `nu`, `lambda` | data family parameters |
//! | `data` | `power` (default), `localized` or `wave` |
//! | `a1`, `a2` | envelope amplitudes (`a1 = a2` gives a single wave) |
//! | `A` | junction of the envelope |
//! | `dx`, `dt` | grid spacing and time step |
//! | `t_end` | horizon |
//! | `m` | tracked level |
//! | `window_lo`, `window_hi` | fit window |
//! | `frame` | `leading-edge` (default) or `lab` |
//! | `kind` | barrier kind for `barrier-certificates` |
//! | `outdir` | where artifacts are written |
//! | `seed` | seed for randomly oscillating envelopes |

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use crate::barrier_check::{autotune_t, BarrierDraft, BarrierKind, TuneOptions};
use crate::error::{LabError, Result};
use crate::front_lab::{
    estimate_sigma_infinity, fit_shift, optimal_shift, DriftLaw, FitModel, FrontTrace, Term,
};
use crate::kpp_core::{KppNonlinearity, SpeedPair};
use crate::linear_tail::{
    estimate_prefactor, heat_eval_quadrature, log_grid, predictor_shape, LinearSolutionQuery,
    Regime, TailInitialData,
};
use crate::rd_solver::{setup, Frame, FrontInitialData, Grid, Oscillation, Solver, SolverConfig};
use crate::traveling_wave::{solve_profile, ProfileGrid, WaveProfile};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScenarioId {
    /// Critical decay with `k > -3`.
    PowerAboveCritical,
    /// Critical decay with `k = -3`.
    PowerCritical,
    /// Supercritical decay `x^ν e^{-λx}`.
    Flat,
    /// Steep data: `k < -3` or localized.
    Steep,
    SingleWave,
    FlatSingleWave,
    LinearAsymptotics,
    BarrierCertificates,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 8] = [
        ScenarioId::PowerAboveCritical,
        ScenarioId::PowerCritical,
        ScenarioId::Flat,
        ScenarioId::Steep,
        ScenarioId::SingleWave,
        ScenarioId::FlatSingleWave,
        ScenarioId::LinearAsymptotics,
        ScenarioId::BarrierCertificates,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioId::PowerAboveCritical => "thm1-k>-3",
            ScenarioId::PowerCritical => "thm1-k=-3",
            ScenarioId::Flat => "thm2-nu",
            ScenarioId::Steep => "thm3-k<-3",
            ScenarioId::SingleWave => "thm4-single-wave",
            ScenarioId::FlatSingleWave => "thm5-nu-single-wave",
            ScenarioId::LinearAsymptotics => "linear-asymptotics",
            ScenarioId::BarrierCertificates => "barrier-certificates",
        }
    }

    /// File-name friendly form of the id.
    pub fn slug(self) -> String {
        self.name()
            .replace(">-", "-gt-m")
            .replace("=-", "-eq-m")
            .replace("<-", "-lt-m")
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioId {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().replace('\u{2212}', "-");
        ScenarioId::ALL
            .into_iter()
            .find(|id| id.name() == s || id.slug() == s)
            .ok_or_else(|| LabError::Config(format!("unknown scenario '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    Power,
    Localized,
    Wave,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameChoice {
    LeadingEdge,
    Lab,
}

/// Reaction term named in a config: `fisher` or `cubic:<a>`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NonlinearitySpec {
    Fisher,
    Cubic(f64),
}

impl NonlinearitySpec {
    pub fn build(self) -> Result<KppNonlinearity> {
        match self {
            NonlinearitySpec::Fisher => Ok(KppNonlinearity::fisher()),
            NonlinearitySpec::Cubic(a) => KppNonlinearity::cubic(a),
        }
    }
}

impl FromStr for NonlinearitySpec {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "fisher" {
            return Ok(NonlinearitySpec::Fisher);
        }
        if let Some(a) = s.strip_prefix("cubic:") {
            return a
                .trim()
                .parse()
                .map(NonlinearitySpec::Cubic)
                .map_err(|_| LabError::Config(format!("bad cubic parameter '{a}'")));
        }
        Err(LabError::Config(format!("unknown nonlinearity '{s}'")))
    }
}

impl fmt::Display for NonlinearitySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NonlinearitySpec::Fisher => f.write_str("fisher"),
            NonlinearitySpec::Cubic(a) => write!(f, "cubic:{a}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub scenario: ScenarioId,
    pub f: NonlinearitySpec,
    pub data: DataKind,
    pub k: Option<f64>,
    pub nu: Option<f64>,
    pub lambda: Option<f64>,
    pub a1: f64,
    pub a2: f64,
    pub junction: f64,
    pub dx: Option<f64>,
    pub dt: Option<f64>,
    pub t_end: f64,
    pub m: f64,
    /// Barrier slack exponent; the barrier default applies when absent.
    pub epsilon: Option<f64>,
    pub window: Option<(f64, f64)>,
    pub frame: FrameChoice,
    pub kind: Option<BarrierKind>,
    pub outdir: Option<PathBuf>,
    pub seed: u64,
}

pub const CONFIG_KEYS: [&str; 20] = [
    "scenario",
    "f",
    "data",
    "k",
    "nu",
    "lambda",
    "a1",
    "a2",
    "A",
    "dx",
    "dt",
    "t_end",
    "m",
    "epsilon",
    "window_lo",
    "window_hi",
    "frame",
    "kind",
    "outdir",
    "seed",
];

impl ScenarioConfig {
    pub fn new(scenario: ScenarioId) -> Self {
        ScenarioConfig {
            scenario,
            f: NonlinearitySpec::Fisher,
            data: DataKind::Power,
            k: None,
            nu: None,
            lambda: None,
            a1: 1.0,
            a2: 1.0,
            junction: 1.0,
            dx: None,
            dt: None,
            t_end: 1e3,
            m: 0.5,
            epsilon: None,
            window: None,
            frame: FrameChoice::LeadingEdge,
            kind: None,
            outdir: None,
            seed: 0,
        }
    }

    /// Parses `key = value` text; later keys override earlier ones.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                LabError::Config(format!("line {}: expected 'key = value'", n + 1))
            })?;
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Self::from_pairs(map.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let pairs: Vec<(&str, &str)> = pairs.into_iter().collect();
        let id = pairs
            .iter()
            .find(|(k, _)| *k == "scenario")
            .ok_or_else(|| LabError::Config("missing key 'scenario'".into()))?
            .1
            .parse()?;
        let mut cfg = ScenarioConfig::new(id);
        for (key, value) in pairs {
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |v: &str| -> Result<f64> {
            v.parse::<f64>()
                .map_err(|_| LabError::Config(format!("key '{key}': '{v}' is not a number")))
        };
        let (lo, hi) = self.window.unwrap_or((f64::NAN, f64::NAN));
        match key {
            "scenario" => self.scenario = value.parse()?,
            "f" => self.f = value.parse()?,
            "data" => {
                self.data = match value {
                    "power" => DataKind::Power,
                    "localized" => DataKind::Localized,
                    "wave" => DataKind::Wave,
                    other => return Err(LabError::Config(format!("unknown data kind '{other}'"))),
                }
            }
            "k" => self.k = Some(num(value)?),
            "nu" => self.nu = Some(num(value)?),
            "lambda" => self.lambda = Some(num(value)?),
            "a1" => self.a1 = num(value)?,
            "a2" => self.a2 = num(value)?,
            "A" => self.junction = num(value)?,
            "dx" => self.dx = Some(num(value)?),
            "dt" => self.dt = Some(num(value)?),
            "t_end" => self.t_end = num(value)?,
            "m" => self.m = num(value)?,
            "epsilon" => self.epsilon = Some(num(value)?),
            "window_lo" => self.window = Some((num(value)?, hi)),
            "window_hi" => self.window = Some((lo, num(value)?)),
            "frame" => {
                self.frame = match value {
                    "leading-edge" => FrameChoice::LeadingEdge,
                    "lab" => FrameChoice::Lab,
                    other => return Err(LabError::Config(format!("unknown frame '{other}'"))),
                }
            }
            "kind" => self.kind = Some(value.parse()?),
            "outdir" => self.outdir = Some(PathBuf::from(value)),
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| LabError::Config(format!("bad seed '{value}'")))?
            }
            other => return Err(LabError::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Serializes back to the key-value format (round-trips through [`ScenarioConfig::parse`]).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        put("scenario", self.scenario.name().into());
        put("f", self.f.to_string());
        put(
            "data",
            match self.data {
                DataKind::Power => "power",
                DataKind::Localized => "localized",
                DataKind::Wave => "wave",
            }
            .into(),
        );
        for (k, v) in [
            ("k", self.k),
            ("nu", self.nu),
            ("lambda", self.lambda),
            ("dx", self.dx),
            ("dt", self.dt),
            ("epsilon", self.epsilon),
        ] {
            if let Some(v) = v {
                put(k, format!("{v}"));
            }
        }
        put("a1", format!("{}", self.a1));
        put("a2", format!("{}", self.a2));
        put("A", format!("{}", self.junction));
        put("t_end", format!("{}", self.t_end));
        put("m", format!("{}", self.m));
        if let Some((lo, hi)) = self.window {
            put("window_lo", format!("{lo}"));
            put("window_hi", format!("{hi}"));
        }
        put(
            "frame",
            if self.frame == FrameChoice::Lab {
                "lab".into()
            } else {
                "leading-edge".into()
            },
        );
        if let Some(kind) = self.kind {
            put("kind", kind.name().into());
        }
        if let Some(o) = &self.outdir {
            put("outdir", o.display().to_string());
        }
        put("seed", self.seed.to_string());
        s
    }

    fn require(&self, what: &str, v: Option<f64>) -> Result<f64> {
        v.ok_or_else(|| LabError::Config(format!("{} needs '{what}'", self.scenario)))
    }

    /// Checks the hypotheses of the scenario.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LabError::Config(format!("{}: {msg}", self.scenario)));
        if !(self.t_end > 0.0) || !(self.m > 0.0 && self.m < 1.0) {
            return bad(format!(
                "need t_end > 0 and 0 < m < 1, got {} and {}",
                self.t_end, self.m
            ));
        }
        if !(self.a1 > 0.0 && self.a1 <= self.a2) {
            return bad(format!(
                "need 0 < a1 <= a2, got {} and {}",
                self.a1, self.a2
            ));
        }
        if !(self.junction > 0.0) {
            return bad(format!(
                "junction A must be positive, got {}",
                self.junction
            ));
        }
        for (name, v) in [("dx", self.dx), ("dt", self.dt)] {
            if let Some(v) = v {
                if !(v > 0.0) {
                    return bad(format!("{name} must be positive"));
                }
            }
        }
        if let Some((lo, hi)) = self.window {
            if !(lo > 0.0 && lo < hi) {
                return bad(format!("window [{lo}, {hi}] is not a valid interval"));
            }
        }
        let f = self.f.build()?;
        let ls = f.fprime0().sqrt();
        let single = self.a1 == self.a2;
        match self.scenario {
            ScenarioId::PowerAboveCritical => {
                let k = self.require("k", self.k)?;
                if !(k > -3.0) {
                    return bad(format!("requires k > -3, got {k}"));
                }
            }
            ScenarioId::PowerCritical => {
                if self.require("k", self.k)? != -3.0 {
                    return bad("requires k = -3".into());
                }
            }
            ScenarioId::Steep => {
                if self.data == DataKind::Power && !(self.require("k", self.k)? < -3.0) {
                    return bad("requires k < -3 (or data = localized)".into());
                }
            }
            ScenarioId::Flat | ScenarioId::FlatSingleWave => {
                self.require("nu", self.nu)?;
                let l = self.require("lambda", self.lambda)?;
                if !(l > 0.0 && l < ls) {
                    return bad(format!("requires 0 < lambda < {ls}, got {l}"));
                }
                if self.scenario == ScenarioId::FlatSingleWave && !single {
                    return bad("requires a1 = a2".into());
                }
            }
            ScenarioId::SingleWave => {
                if !single {
                    return bad("requires a1 = a2".into());
                }
                if self.data == DataKind::Power {
                    self.require("k", self.k)?;
                }
            }
            ScenarioId::LinearAsymptotics => {}
            ScenarioId::BarrierCertificates => {
                let kind = self
                    .kind
                    .ok_or_else(|| LabError::Config("barrier-certificates needs 'kind'".into()))?;
                if kind.is_flat() {
                    self.require("nu", self.nu)?;
                    self.require("lambda", self.lambda)?;
                } else {
                    self.require("k", self.k)?;
                }
            }
        }
        Ok(())
    }

    pub fn pair(&self) -> Result<SpeedPair> {
        let f0 = self.f.build()?.fprime0();
        match self.scenario {
            ScenarioId::Flat | ScenarioId::FlatSingleWave => {
                SpeedPair::from_lambda(self.require("lambda", self.lambda)?, f0)
            }
            ScenarioId::BarrierCertificates if self.kind.is_some_and(|k| k.is_flat()) => {
                SpeedPair::from_lambda(self.require("lambda", self.lambda)?, f0)
            }
            _ => Ok(SpeedPair::critical(f0)),
        }
    }

    fn is_flat(&self) -> bool {
        matches!(self.scenario, ScenarioId::Flat | ScenarioId::FlatSingleWave)
            || (self.scenario == ScenarioId::BarrierCertificates
                && self.kind.is_some_and(|k| k.is_flat()))
    }

    /// Initial data described by the config, with `amplitude` scaling both envelope constants.
    pub fn initial_data(
        &self,
        profile: Option<&Arc<WaveProfile>>,
        amplitude: f64,
    ) -> Result<FrontInitialData> {
        let pair = self.pair()?;
        let data = match self.data {
            DataKind::Localized => FrontInitialData::localized(1.0),
            DataKind::Wave => {
                let p =
                    profile.ok_or_else(|| LabError::Config("wave data needs a profile".into()))?;
                FrontInitialData::wave(Arc::clone(p), 0.0)
            }
            DataKind::Power => {
                let base = if self.is_flat() {
                    FrontInitialData::h2(self.require("nu", self.nu)?, amplitude * self.a1, &pair)
                } else {
                    FrontInitialData::h1(self.require("k", self.k)?, amplitude * self.a1, &pair)
                }
                .with_junction(self.junction);
                if self.a1 == self.a2 {
                    base
                } else {
                    base.with_oscillation(
                        amplitude * self.a1,
                        amplitude * self.a2,
                        Oscillation::Random { seed: self.seed },
                    )?
                }
            }
        };
        data.validate()?;
        Ok(data)
    }

    pub fn grid_defaults(&self, pair: &SpeedPair) -> (f64, f64) {
        match self.frame {
            FrameChoice::Lab => {
                let dx = self.dx.unwrap_or(0.05);
                (dx, self.dt.unwrap_or(SolverConfig::for_dx(dx).dt))
            }
            FrameChoice::LeadingEdge => (
                self.dx.unwrap_or(0.125 / pair.lambda),
                self.dt.unwrap_or(0.5),
            ),
        }
    }

    fn window_or_default(&self) -> (f64, f64) {
        self.window.unwrap_or((self.t_end / 10.0, self.t_end))
    }
}

/// One acceptance rule evaluated on a run.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub measured: f64,
    pub predicted: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckOutcome {
    /// `|measured - predicted| <= tolerance`.
    pub fn near(name: &str, measured: f64, predicted: f64, tolerance: f64) -> Self {
        let pass = (measured - predicted).abs() <= tolerance;
        CheckOutcome {
            name: name.into(),
            measured,
            predicted,
            tolerance,
            pass,
        }
    }

    /// `measured < bound`.
    pub fn below(name: &str, measured: f64, bound: f64) -> Self {
        CheckOutcome {
            name: name.into(),
            measured,
            predicted: 0.0,
            tolerance: bound,
            pass: measured < bound,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRecord {
    pub scenario: ScenarioId,
    pub label: String,
    pub checks: Vec<CheckOutcome>,
    pub runtime: f64,
    pub artifacts: Vec<PathBuf>,
    /// Set when a numerical step failed; checks hold whatever completed before.
    pub failure: Option<String>,
}

impl ResultRecord {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && !self.checks.is_empty() && self.checks.iter().all(|c| c.pass)
    }
}

struct Outputs {
    dir: Option<PathBuf>,
    slug: String,
    written: Vec<PathBuf>,
}

impl Outputs {
    fn new(cfg: &ScenarioConfig) -> Result<Self> {
        if let Some(d) = &cfg.outdir {
            fs::create_dir_all(d)?;
        }
        Ok(Outputs {
            dir: cfg.outdir.clone(),
            slug: cfg.scenario.slug(),
            written: Vec::new(),
        })
    }

    fn write(
        &mut self,
        suffix: &str,
        body: impl FnOnce(&mut dyn Write) -> Result<()>,
    ) -> Result<()> {
        if let Some(d) = &self.dir {
            let path = d.join(format!("{}-{suffix}", self.slug));
            let mut file = std::io::BufWriter::new(fs::File::create(&path)?);
            body(&mut file)?;
            file.flush()?;
            self.written.push(path);
        }
        Ok(())
    }
}

/// Runs the scenario end to end; numerical failures are recorded, not returned.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ResultRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let mut out = Outputs::new(cfg)?;
    let mut checks = Vec::new();
    let result = match cfg.scenario {
        ScenarioId::PowerAboveCritical
        | ScenarioId::PowerCritical
        | ScenarioId::Steep
        | ScenarioId::Flat => run_front(cfg, &mut out, &mut checks),
        ScenarioId::SingleWave | ScenarioId::FlatSingleWave => {
            run_waves(cfg, &mut out, &mut checks)
        }
        ScenarioId::LinearAsymptotics => run_linear(cfg, &mut out, &mut checks),
        ScenarioId::BarrierCertificates => run_barrier(cfg, &mut out, &mut checks),
    };
    let failure = result.err().map(|e| e.to_string());
    let record = ResultRecord {
        scenario: cfg.scenario,
        label: describe(cfg),
        checks,
        runtime: start.elapsed().as_secs_f64(),
        artifacts: Vec::new(),
        failure,
    };
    out.write("checks.csv", |w| {
        write_checks_csv(std::slice::from_ref(&record), w)
    })?;
    Ok(ResultRecord {
        artifacts: out.written,
        ..record
    })
}

fn describe(cfg: &ScenarioConfig) -> String {
    let mut s = format!("{} f={}", cfg.scenario, cfg.f);
    match cfg.data {
        DataKind::Localized => s.push_str(" data=localized"),
        DataKind::Wave => s.push_str(" data=wave"),
        DataKind::Power => {
            if let Some(k) = cfg.k {
                s.push_str(&format!(" k={k}"));
            }
            if let Some(nu) = cfg.nu {
                s.push_str(&format!(" nu={nu}"));
            }
        }
    }
    if let Some(l) = cfg.lambda {
        s.push_str(&format!(" lambda={l}"));
    }
    if let Some(kind) = cfg.kind {
        s.push_str(&format!(" kind={kind}"));
    }
    s
}

/// Solver for the configured run, with the trace sampling cadence set to `t_end / 2000`.
pub fn build_solver(cfg: &ScenarioConfig) -> Result<Solver> {
    let f = cfg.f.build()?;
    let pair = cfg.pair()?;
    let profile = match cfg.data {
        DataKind::Wave => Some(Arc::new(solve_profile(&f, pair.c, ProfileGrid::default())?)),
        _ => None,
    };
    let data = cfg.initial_data(profile.as_ref(), 1.0)?;
    let (dx, dt) = cfg.grid_defaults(&pair);
    let mut sc = SolverConfig::for_dx(dx);
    sc.dt = dt;
    sc.sample_every = Some(cfg.t_end / 2000.0);
    let (frame, grid) = match cfg.frame {
        FrameChoice::Lab => (Frame::LAB, Grid::spanning(-20.0, 20.0, dx)),
        FrameChoice::LeadingEdge => (Frame::leading_edge(&pair), Grid::spanning(-60.0, 80.0, dx)),
    };
    setup(&f, &data, frame, grid, sc)
}

/// Level-set trace of the configured run, sampled 2000 times over the horizon.
pub fn trace_front(cfg: &ScenarioConfig) -> Result<FrontTrace> {
    let mut solver = build_solver(cfg)?;
    let dx = solver.snapshot().dx;
    let mut trace = FrontTrace::new(cfg.m, &cfg.scenario.slug(), dx);
    solver.run_until(cfg.t_end, |snap| {
        trace.record(snap);
        Ok(())
    })?;
    Ok(trace)
}

/// Position exponent used by the cross-validation check: `y = t^0.45`.
pub const CROSS_EXPONENT: f64 = 0.45;
/// Allowed relative gap between `v` and `a ϖ` times the shape at the horizon.
pub const CROSS_TOLERANCE: f64 = 0.1;

/// Leading-edge values `v(t, t^e)` against `a ϖ` times the linear shape, as `(t, v, prediction)`.
pub fn cross_validation(
    cfg: &ScenarioConfig,
    times: &[f64],
    exponent: f64,
) -> Result<Vec<(f64, f64, f64)>> {
    let k = cfg.require("k", cfg.k)?;
    let f = cfg.f.build()?;
    let pair = cfg.pair()?;
    let data = cfg.initial_data(None, 1.0)?;
    let (dx, dt) = cfg.grid_defaults(&pair);
    let mut sc = SolverConfig::for_dx(dx);
    sc.dt = dt;
    let mut solver = setup(
        &f,
        &data,
        Frame::leading_edge(&pair),
        Grid::spanning(-60.0, 80.0, dx),
        sc,
    )?;
    let w0 = TailInitialData::h1(k);
    let t_last = times.iter().copied().fold(1e3, f64::max);
    let diffusive = |t: f64| LinearSolutionQuery::new(t, 0.5 * t.sqrt(), Regime::Diffusive);
    let varpi = estimate_prefactor(&w0, &log_grid(1e2, t_last, 4), &diffusive)?
        .varpi
        .unwrap_or(f64::NAN);
    let mut rows = Vec::new();
    for &t in times {
        solver.run_until(t, |_| Ok(()))?;
        let snap = solver.snapshot();
        let y = t.powf(exponent);
        let s = (y - snap.y_left) / snap.dx;
        if s < 0.0 || s >= (snap.len() - 1) as f64 {
            return Err(LabError::Range(format!(
                "y = {y} is outside the grid at t = {t}"
            )));
        }
        let i = s.floor() as usize;
        let v = snap.q[i] + (s - i as f64) * (snap.q[i + 1] - snap.q[i]);
        let shape = predictor_shape(&w0, &LinearSolutionQuery::new(t, y, Regime::Diffusive))?;
        rows.push((t, v, cfg.a1 * varpi * shape));
    }
    Ok(rows)
}

fn run_front(
    cfg: &ScenarioConfig,
    out: &mut Outputs,
    checks: &mut Vec<CheckOutcome>,
) -> Result<()> {
    let pair = cfg.pair()?;
    let trace = trace_front(cfg)?;
    out.write("trace.csv", |w| trace.write_csv(pair.c, None, w))?;
    let window = cfg.window_or_default();
    let ls = pair.lambda_star;
    let (model, label) = match cfg.scenario {
        ScenarioId::Flat => (
            FitModel {
                speed: Term::Free,
                ln_t: Term::Free,
                ln_ln_t: Term::Off,
            },
            "flat",
        ),
        ScenarioId::PowerCritical => (
            FitModel {
                speed: Term::Fixed(pair.c_star),
                ln_t: Term::Fixed(-1.5 / ls),
                ln_ln_t: Term::Free,
            },
            "critical",
        ),
        _ => (FitModel::log_shift(pair.c_star), "log"),
    };
    let fit = fit_shift(&trace, model, window)?;
    out.write("fit.txt", |w| {
        writeln!(w, "{fit}")?;
        Ok(())
    })?;
    match (cfg.scenario, label) {
        (ScenarioId::Flat, _) => {
            let nu = cfg.nu.unwrap_or(0.0);
            let law = DriftLaw::h2(nu, &pair);
            checks.push(CheckOutcome::near(
                "speed",
                fit.speed.value,
                law.speed,
                0.02,
            ));
            checks.push(CheckOutcome::near(
                "ln t coefficient",
                fit.ln_t.value,
                law.ln_t,
                0.2 * law.ln_t.abs() + 0.1,
            ));
        }
        (ScenarioId::PowerCritical, _) => {
            let law = DriftLaw::h1(-3.0, &pair);
            checks.push(CheckOutcome::near(
                "ln ln t coefficient",
                fit.ln_ln_t.value,
                law.ln_ln_t,
                0.35,
            ));
        }
        (ScenarioId::Steep, _) => {
            let law = DriftLaw::h1(-4.0, &pair);
            checks.push(CheckOutcome::near(
                "ln t coefficient",
                fit.ln_t.value,
                law.ln_t,
                0.15,
            ));
            if cfg.frame == FrameChoice::Lab {
                let (lo, hi) = (cfg.t_end / 10.0, cfg.t_end);
                let speed = match (trace.at(lo), trace.at(hi)) {
                    (Some(a), Some(b)) => (b - a) / (hi - lo),
                    _ => return Err(LabError::Range("front left the domain".into())),
                };
                checks.push(CheckOutcome::near(
                    "speed over the last decade",
                    speed,
                    pair.c_star,
                    0.02,
                ));
            }
        }
        _ => {
            let k = cfg.k.unwrap_or(0.0);
            let law = DriftLaw::h1(k, &pair);
            checks.push(CheckOutcome::near(
                "ln t coefficient",
                fit.ln_t.value,
                law.ln_t,
                0.15,
            ));
            if cfg.data == DataKind::Power && cfg.t_end >= 1e4 {
                let rows = cross_validation(cfg, &[cfg.t_end], CROSS_EXPONENT)?;
                let (_, v, p) = rows[0];
                checks.push(CheckOutcome::near(
                    "leading-edge value over linear prediction",
                    v / p,
                    1.0,
                    CROSS_TOLERANCE,
                ));
            }
        }
    }
    Ok(())
}

/// `(t, optimal shift, sup distance)` at log-spaced times from 10 to `t_end`.
pub fn wave_history(
    cfg: &ScenarioConfig,
    profile: &WaveProfile,
    amplitude: f64,
) -> Result<Vec<(f64, f64, f64)>> {
    let f = cfg.f.build()?;
    let pair = cfg.pair()?;
    let data = cfg.initial_data(None, amplitude)?;
    let (dx, dt) = cfg.grid_defaults(&pair);
    let mut sc = SolverConfig::for_dx(dx);
    sc.dt = dt;
    let mut solver = setup(
        &f,
        &data,
        Frame::leading_edge(&pair),
        Grid::spanning(-60.0, 80.0, dx),
        sc,
    )?;
    let mut hist = Vec::new();
    for t in log_grid(10.0, cfg.t_end, 20) {
        solver.run_until(t, |_| Ok(()))?;
        let (shift, dist) = optimal_shift(solver.snapshot(), profile)?;
        hist.push((t, shift, dist));
    }
    Ok(hist)
}

/// Slack allowed when testing the wave distance for monotone decrease.
pub const MONOTONE_SLACK: f64 = 1e-4;

/// Largest increase of the distance between consecutive samples of the last decade.
pub fn last_decade_increase(hist: &[(f64, f64, f64)]) -> f64 {
    let t_end = hist.last().map_or(0.0, |h| h.0);
    let tail: Vec<f64> = hist
        .iter()
        .filter(|h| h.0 >= t_end / 10.0 * (1.0 - 1e-9))
        .map(|h| h.2)
        .collect();
    tail.windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::NEG_INFINITY, f64::max)
}

fn run_waves(
    cfg: &ScenarioConfig,
    out: &mut Outputs,
    checks: &mut Vec<CheckOutcome>,
) -> Result<()> {
    let f = cfg.f.build()?;
    let pair = cfg.pair()?;
    let profile = solve_profile(&f, pair.c, ProfileGrid::default())?;
    let law = if cfg.is_flat() {
        DriftLaw::h2(cfg.nu.unwrap_or(0.0), &pair)
    } else {
        DriftLaw::h1(cfg.k.unwrap_or(-4.0), &pair)
    };
    let hist = wave_history(cfg, &profile, 1.0)?;
    out.write("shifts.csv", |w| write_history(&hist, &law, w))?;
    let shifts: Vec<(f64, f64)> = hist.iter().map(|h| (h.0, h.1)).collect();
    let sigma = estimate_sigma_infinity(&shifts, &law, 0.05)?;
    let last = hist.last().map_or(f64::NAN, |h| h.2);
    checks.push(CheckOutcome::below("wave distance at t_end", last, 0.02));
    checks.push(CheckOutcome::below(
        "distance increase over the last decade",
        last_decade_increase(&hist),
        MONOTONE_SLACK,
    ));
    checks.push(CheckOutcome::below(
        "sigma drift per decade",
        sigma.drift,
        0.05,
    ));
    if cfg.is_flat() {
        let doubled = wave_history(cfg, &profile, 2.0)?;
        let shifts2: Vec<(f64, f64)> = doubled.iter().map(|h| (h.0, h.1)).collect();
        let sigma2 = estimate_sigma_infinity(&shifts2, &law, 0.05)?;
        let expected = std::f64::consts::LN_2 / pair.lambda;
        checks.push(CheckOutcome::near(
            "sigma shift under doubling",
            sigma2.value - sigma.value,
            expected,
            0.1 * expected,
        ));
    }
    Ok(())
}

fn write_history(hist: &[(f64, f64, f64)], law: &DriftLaw, w: &mut dyn Write) -> Result<()> {
    writeln!(w, "# kpplab-shifts v1")?;
    writeln!(w, "t,ln_t,shift,shift_minus_law,distance")?;
    for &(t, s, d) in hist {
        writeln!(
            w,
            "{t:.10e},{:.10e},{s:.12e},{:.12e},{d:.12e}",
            t.ln(),
            s - law.eval(t)
        )?;
    }
    Ok(())
}

/// Per-decade drift of `quadrature / predictor` on `[10², t_end]` at `y = √t / 2`.
pub fn prefactor_drift(w0: &TailInitialData, t_end: f64) -> Result<(f64, f64)> {
    let grid = log_grid(1e2, t_end, 4);
    let c = estimate_prefactor(w0, &grid, &|t| {
        LinearSolutionQuery::new(t, 0.5 * t.sqrt(), Regime::Diffusive)
    })?;
    Ok((c.varpi.unwrap_or(f64::NAN), c.drift))
}

/// Ballistic counterpart for `x^ν` data in the frame moving at `ϱ = μ`.
pub fn flat_prefactor_drift(nu: f64, t_end: f64) -> Result<(f64, f64)> {
    let w0 = TailInitialData::h2(nu);
    let grid = log_grid(1e2, t_end, 4);
    let rho = 1.0;
    let c = estimate_prefactor(&w0, &grid, &|t| {
        LinearSolutionQuery::new(t, rho * t + 0.5 * t.sqrt(), Regime::Ballistic { rho })
    })?;
    Ok((c.lambda_big.unwrap_or(f64::NAN), c.drift))
}

fn run_linear(
    cfg: &ScenarioConfig,
    out: &mut Outputs,
    checks: &mut Vec<CheckOutcome>,
) -> Result<()> {
    let t_end = cfg.t_end.max(1e3);
    let ks: Vec<f64> = match cfg.k {
        Some(k) => vec![k],
        None if cfg.nu.is_some() => Vec::new(),
        None => vec![-4.0, -3.0, -1.0, 0.0, 2.0],
    };
    let nus: Vec<f64> = match cfg.nu {
        Some(nu) => vec![nu],
        None if cfg.k.is_some() => Vec::new(),
        None => vec![-1.0, 1.0, 2.0],
    };
    let mut rows = Vec::new();
    for &k in &ks {
        let (v, drift) = prefactor_drift(&TailInitialData::h1(k), t_end)?;
        rows.push((format!("k={k}"), v, drift));
        checks.push(CheckOutcome::below(
            &format!("prefactor drift k={k}"),
            drift,
            0.1,
        ));
    }
    for &nu in &nus {
        let (v, drift) = flat_prefactor_drift(nu, t_end)?;
        rows.push((format!("nu={nu}"), v, drift));
        checks.push(CheckOutcome::below(
            &format!("prefactor drift nu={nu}"),
            drift,
            0.1,
        ));
    }
    if cfg.k.is_none() && cfg.nu.is_none() {
        let (v, _) = prefactor_drift(&TailInitialData::power(3.0), t_end)?;
        let t: f64 = 1e4;
        let y = 0.5 * t.sqrt();
        let p = heat_eval_quadrature(&TailInitialData::power(3.0), t, y)?;
        rows.push((
            "cubic".into(),
            v,
            ((p - (y * y * y + 6.0 * t * y)) / p).abs(),
        ));
        let ratio = p / (y * t) - y * y / t;
        checks.push(CheckOutcome::near("cubic prefactor", ratio, 6.0, 0.06));
    }
    out.write("prefactors.csv", |w| {
        writeln!(w, "# kpplab-prefactors v1")?;
        writeln!(w, "case,prefactor,drift")?;
        for (c, v, d) in &rows {
            writeln!(w, "{c},{v:.12e},{d:.6e}")?;
        }
        Ok(())
    })
}

fn run_barrier(
    cfg: &ScenarioConfig,
    out: &mut Outputs,
    checks: &mut Vec<CheckOutcome>,
) -> Result<()> {
    let kind = cfg
        .kind
        .ok_or_else(|| LabError::Config("missing 'kind'".into()))?;
    let f = cfg.f.build()?;
    let data = cfg.initial_data(None, 1.0)?;
    let mut draft = BarrierDraft::new(kind, &f, &data)?;
    if let Some(dx) = cfg.dx {
        draft.dx = dx;
    }
    if let Some(dt) = cfg.dt {
        draft.dt = dt;
    }
    draft.epsilon = cfg.epsilon;
    let opts = TuneOptions::for_kind(kind);
    let tuned = autotune_t(&draft, &opts)?;
    out.write("certificate.csv", |w| tuned.certificate.write_csv(w))?;
    out.write("certificate.txt", |w| {
        write!(w, "{}", tuned.certificate)?;
        for a in &tuned.attempts {
            writeln!(w, "  tried T = {:e}, M = {:e}: {}", a.t_big, a.m, a.outcome)?;
        }
        Ok(())
    })?;
    let violations = tuned.certificate.violations.len() + tuned.certificate.errors.len();
    checks.push(CheckOutcome::below(
        &format!("{kind} violations"),
        violations as f64,
        0.5,
    ));
    Ok(())
}

pub fn write_checks_csv(records: &[ResultRecord], w: &mut dyn Write) -> Result<()> {
    writeln!(w, "# kpplab-checks v1")?;
    writeln!(
        w,
        "scenario,label,check,measured,predicted,tolerance,pass,failure"
    )?;
    for r in records {
        let failure = r.failure.as_deref().unwrap_or("").replace([',', '\n'], ";");
        if r.checks.is_empty() {
            writeln!(w, "{},{},,,,,false,{failure}", r.scenario, r.label)?;
        }
        for c in &r.checks {
            writeln!(
                w,
                "{},{},{},{:.10e},{:.10e},{:.6e},{},{failure}",
                r.scenario, r.label, c.name, c.measured, c.predicted, c.tolerance, c.pass
            )?;
        }
    }
    Ok(())
}

/// Writes `summary.csv` (deterministic) and `report.txt` (with runtimes) into `dir`.
pub fn emit_report(records: &[ResultRecord], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let summary = dir.join("summary.csv");
    let mut f = std::io::BufWriter::new(fs::File::create(&summary)?);
    write_checks_csv(records, &mut f)?;
    f.flush()?;
    let mut txt = std::io::BufWriter::new(fs::File::create(dir.join("report.txt"))?);
    for r in records {
        writeln!(
            txt,
            "{} [{}] {:.1} s",
            r.label,
            if r.passed() { "PASS" } else { "FAIL" },
            r.runtime
        )?;
        for c in &r.checks {
            writeln!(
                txt,
                "  {:<40} measured {:+.6e} predicted {:+.6e} tolerance {:.3e} {}",
                c.name,
                c.measured,
                c.predicted,
                c.tolerance,
                if c.pass { "pass" } else { "FAIL" }
            )?;
        }
        if let Some(e) = &r.failure {
            writeln!(txt, "  failure: {e}")?;
        }
        for a in &r.artifacts {
            writeln!(txt, "  artifact: {}", a.display())?;
        }
    }
    txt.flush()?;
    Ok(summary)
}

/// Reads back a `summary.csv` written by [`emit_report`].
pub fn read_checks_csv(text: &str) -> Result<Vec<(String, CheckOutcome)>> {
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 8 {
            return Err(LabError::Config(format!("malformed row '{line}'")));
        }
        if cols[2].is_empty() {
            continue;
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| LabError::Config(format!("bad number '{s}'")))
        };
        out.push((
            cols[0].to_string(),
            CheckOutcome {
                name: cols[2].to_string(),
                measured: num(cols[3])?,
                predicted: num(cols[4])?,
                tolerance: num(cols[5])?,
                pass: cols[6] == "true",
            },
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_round_trip() {
        for id in ScenarioId::ALL {
            assert_eq!(id.name().parse::<ScenarioId>().unwrap(), id);
            assert_eq!(id.slug().parse::<ScenarioId>().unwrap(), id);
            assert!(id
                .slug()
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-'));
        }
        assert_eq!("thm1-k\u{2212}3".replace('\u{2212}', "-"), "thm1-k-3");
        assert!("thm9".parse::<ScenarioId>().is_err());
    }

    #[test]
    fn config_round_trip() {
        let text = "scenario = thm2-nu\nnu = 1\nlambda = 0.5 # supercritical\nA = 20\ndx = 0.1\ndt = 0.25\nt_end = 1e4\nwindow_lo = 1000\nwindow_hi = 10000\nseed = 7\nepsilon = 0.01\n";
        let cfg = ScenarioConfig::parse(text).unwrap();
        assert_eq!(cfg.scenario, ScenarioId::Flat);
        assert_eq!(cfg.window, Some((1e3, 1e4)));
        assert_eq!(cfg.junction, 20.0);
        cfg.validate().unwrap();
        let again = ScenarioConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn config_errors() {
        assert!(ScenarioConfig::parse("k = 1").is_err());
        assert!(ScenarioConfig::parse("scenario = thm1-k>-3\nbogus = 1").is_err());
        assert!(ScenarioConfig::parse("scenario = thm1-k>-3\nk = one").is_err());
        assert!(ScenarioConfig::parse("scenario = thm1-k>-3\nno equals sign").is_err());
        let c = ScenarioConfig::parse("scenario = thm3-k<-3\nk = -2").unwrap();
        assert!(c.validate().is_err());
        let c =
            ScenarioConfig::parse("scenario = thm4-single-wave\nk = 0\na1 = 1\na2 = 2").unwrap();
        assert!(c.validate().is_err());
        let c = ScenarioConfig::parse("scenario = thm2-nu\nnu = 1\nlambda = 1.5").unwrap();
        assert!(c.validate().is_err());
        let c = ScenarioConfig::parse("scenario = thm1-k>-3\nk = 0\nwindow_lo = 10").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn predictions_come_from_the_speed_pair() {
        let cfg = ScenarioConfig::parse("scenario = thm1-k>-3\nk = 2\nf = cubic:0.5").unwrap();
        let pair = cfg.pair().unwrap();
        assert_eq!(
            DriftLaw::h1(2.0, &pair).ln_t,
            2.0 / (2.0 * pair.lambda_star)
        );
        let cfg = ScenarioConfig::parse("scenario = thm2-nu\nnu = 1\nlambda = 0.5").unwrap();
        let law = DriftLaw::h2(1.0, &cfg.pair().unwrap());
        assert!((law.speed - 2.5).abs() < 1e-15 && (law.ln_t - 2.0).abs() < 1e-15);
    }

    fn synthetic(pass: bool) -> ResultRecord {
        ResultRecord {
            scenario: ScenarioId::Flat,
            label: "thm2-nu f=fisher nu=1".into(),
            checks: vec![
                CheckOutcome::near("speed", 2.5001, 2.5, 0.02),
                CheckOutcome::near("ln t coefficient", if pass { 1.99 } else { 3.0 }, 2.0, 0.5),
            ],
            runtime: 1.5,
            artifacts: vec![],
            failure: None,
        }
    }

    #[test]
    fn report_formats_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![synthetic(true), synthetic(false)];
        let path = emit_report(&records, dir.path()).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let rows = read_checks_csv(&text).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[1].1, records[0].checks[1].clone().rounded());
        assert!(!rows[3].1.pass);
        let report = fs::read_to_string(dir.path().join("report.txt")).unwrap();
        assert!(report.contains("[PASS]") && report.contains("[FAIL]"));
    }

    #[test]
    fn failure_rows_are_marked() {
        let mut r = synthetic(true);
        r.checks.clear();
        r.failure = Some("numerical failure: a, b".into());
        let mut buf = Vec::new();
        write_checks_csv(&[r], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text
            .lines()
            .last()
            .unwrap()
            .ends_with(",false,numerical failure: a; b"));
        assert!(read_checks_csv(&text).unwrap().is_empty());
    }

    #[test]
    fn reports_are_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut r2 = synthetic(true);
        r2.runtime = 99.0;
        emit_report(&[synthetic(true)], a.path()).unwrap();
        emit_report(&[r2], b.path()).unwrap();
        assert_eq!(
            fs::read(a.path().join("summary.csv")).unwrap(),
            fs::read(b.path().join("summary.csv")).unwrap()
        );
    }

    impl CheckOutcome {
        fn rounded(self) -> Self {
            let r = |x: f64| format!("{x:.10e}").parse::<f64>().unwrap();
            CheckOutcome {
                measured: r(self.measured),
                predicted: r(self.predicted),
                tolerance: format!("{:.6e}", self.tolerance).parse().unwrap(),
                ..self
            }
        }
    }

    #[test]
    fn linear_scenario_single_case() {
        let cfg =
            ScenarioConfig::parse("scenario = linear-asymptotics\nk = 0\nt_end = 1e3").unwrap();
        let r = run_scenario(&cfg).unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
