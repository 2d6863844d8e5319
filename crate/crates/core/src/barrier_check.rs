//! Sampled certificates for the barrier constructions: a linear tail solution, multiplied by a
//! slowly varying factor, plus a compact cosine correction. The parabolic operator is applied
//! through its exact decomposition (the linear part is annihilated by the operator), so the
//! quadrature is never differentiated. Certificates are advisory numerics, not proofs.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{LabError, Result};
use crate::kpp_core::{KppNonlinearity, SpeedPair};
use crate::linear_tail::{
    heat_eval_quadrature, log_grid, ChiParams, Perturbation, TailInitialData,
};
use crate::rd_solver::{
    setup, DataFamily, FarField, FieldSnapshot, Frame, FrontInitialData, Grid, SolverConfig,
};

const LADDER_CAP: f64 = 4.0 / 25.0;
const ALPHA_FLOOR: f64 = 7.0 / 15.0;
/// Relative margin below which a sample counts as a violation.
pub const ROUNDOFF: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BarrierKind {
    H1Upper,
    /// Lower barrier for `k >= -3`.
    H1Lower,
    /// Upper barrier restarted from the solution at time `T` (`k < -3`).
    H1UpperRestart,
    /// Lower barrier restarted from the solution at time `T` (`k < -3`).
    H1LowerRestart,
    H2Upper,
    /// Lower barrier in the half-speed frame `z = e^{(c/2)(x - ct)} u`.
    H2LowerZ,
}

impl BarrierKind {
    pub const ALL: [BarrierKind; 6] = [
        BarrierKind::H1Upper,
        BarrierKind::H1Lower,
        BarrierKind::H1UpperRestart,
        BarrierKind::H1LowerRestart,
        BarrierKind::H2Upper,
        BarrierKind::H2LowerZ,
    ];

    pub fn is_upper(self) -> bool {
        matches!(
            self,
            BarrierKind::H1Upper | BarrierKind::H1UpperRestart | BarrierKind::H2Upper
        )
    }

    pub fn is_restart(self) -> bool {
        matches!(
            self,
            BarrierKind::H1UpperRestart | BarrierKind::H1LowerRestart
        )
    }

    pub fn is_flat(self) -> bool {
        matches!(self, BarrierKind::H2Upper | BarrierKind::H2LowerZ)
    }

    pub fn name(self) -> &'static str {
        match self {
            BarrierKind::H1Upper => "h1-upper",
            BarrierKind::H1Lower => "h1-lower",
            BarrierKind::H1UpperRestart => "h1-upper-restart",
            BarrierKind::H1LowerRestart => "h1-lower-restart",
            BarrierKind::H2Upper => "h2-upper",
            BarrierKind::H2LowerZ => "h2-lower-z",
        }
    }
}

impl fmt::Display for BarrierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BarrierKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        BarrierKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| LabError::Config(format!("unknown barrier kind '{s}'")))
    }
}

/// Exponents `δ < γ < β` of the correction and the cosine scale `α`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ladder {
    pub delta: f64,
    pub gamma: f64,
    pub beta: f64,
    pub alpha: f64,
}

impl Ladder {
    /// Defaults for the critical frames; `α = 1/2 - 1/(45κ)` when `κ > 1`.
    pub fn critical(kappa: f64) -> Self {
        let alpha = if kappa > 1.0 {
            0.5 - 1.0 / (45.0 * kappa)
        } else {
            0.47
        };
        Ladder {
            delta: 0.1,
            gamma: 0.12,
            beta: 0.14,
            alpha,
        }
    }

    /// Defaults for the half-speed lower barrier, all exponents below `4/25`.
    pub fn flat_lower() -> Self {
        Ladder {
            delta: 0.06,
            gamma: 0.08,
            beta: 0.1,
            alpha: 0.15,
        }
    }

    /// Lowered ladder for the restarted lower barrier.
    pub fn restart_lower() -> Self {
        Ladder {
            delta: 0.02,
            gamma: 0.03,
            beta: 0.04,
            alpha: 0.47,
        }
    }
}

/// Exponents of the restart construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StarLadder {
    pub delta: f64,
    pub gamma: f64,
    pub beta: f64,
}

impl StarLadder {
    /// Companion of [`Ladder::restart_lower`].
    pub fn restart_lower() -> Self {
        StarLadder {
            delta: 0.05,
            gamma: 0.06,
            beta: 0.07,
        }
    }
}

impl Default for StarLadder {
    fn default() -> Self {
        StarLadder {
            delta: 0.145,
            gamma: 0.15,
            beta: 0.155,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BarrierParams {
    pub kind: BarrierKind,
    pub ladder: Ladder,
    pub star: Option<StarLadder>,
    pub t_big: f64,
    pub m: f64,
    /// `k` for critical data, `ν` for flat data.
    pub exponent: f64,
    /// Slack exponent in the boundary estimates; `None` means a quarter of the region gap.
    pub epsilon: Option<f64>,
}

/// A closed-form condition on `T`; `margin > 0` means satisfied.
#[derive(Clone, Debug, PartialEq)]
pub struct TCondition {
    pub name: &'static str,
    pub margin: f64,
}

impl TCondition {
    pub fn holds(&self) -> bool {
        self.margin > 0.0
    }
}

impl BarrierParams {
    pub fn new(kind: BarrierKind, exponent: f64, t_big: f64) -> Self {
        let mut p = BarrierParams {
            kind,
            ladder: Ladder::critical(0.0),
            star: None,
            t_big,
            m: 1.0,
            exponent,
            epsilon: None,
        };
        p.ladder = match kind {
            BarrierKind::H2LowerZ => Ladder::flat_lower(),
            BarrierKind::H1LowerRestart => Ladder::restart_lower(),
            _ => Ladder::critical(p.kappa()),
        };
        p.star = match kind {
            BarrierKind::H1LowerRestart => Some(StarLadder::restart_lower()),
            BarrierKind::H1UpperRestart => Some(StarLadder::default()),
            _ => None,
        };
        p
    }

    pub fn kappa(&self) -> f64 {
        let k = if self.kind.is_flat() {
            self.exponent - 1.0
        } else {
            self.exponent
        };
        k.max(-3.0)
    }

    /// Region exponent: `δ` or `δ*`.
    pub fn delta(&self) -> f64 {
        self.star
            .filter(|_| self.kind.is_restart())
            .map_or(self.ladder.delta, |s| s.delta)
    }

    /// Exponent in `ξ` and `η`: `γ` or `γ*`.
    pub fn gamma(&self) -> f64 {
        self.star
            .filter(|_| self.kind.is_restart())
            .map_or(self.ladder.gamma, |s| s.gamma)
    }

    /// Growth exponent of the cosine height: `κ/2 + β`, `β* - 3/2`, or `ν + β`.
    pub fn height_exponent(&self) -> f64 {
        match self.kind {
            BarrierKind::H1UpperRestart | BarrierKind::H1LowerRestart => {
                self.star.unwrap_or_default().beta - 1.5
            }
            BarrierKind::H2LowerZ => self.exponent + self.ladder.beta,
            _ => 0.5 * self.kappa() + self.ladder.beta,
        }
    }

    /// Gap between the height and region exponents: `β - δ` or `β* - δ*`.
    pub fn region_gap(&self) -> f64 {
        match self.star.filter(|_| self.kind.is_restart()) {
            Some(s) => s.beta - s.delta,
            None => self.ladder.beta - self.ladder.delta,
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon.unwrap_or(0.25 * self.region_gap())
    }

    pub fn xi(&self, t: f64) -> f64 {
        let g = self.gamma();
        1.0 + self.t_big.powf(-g) - (t + self.t_big).powf(-g)
    }

    pub fn xi_prime(&self, t: f64) -> f64 {
        let g = self.gamma();
        g * (t + self.t_big).powf(-g - 1.0)
    }

    pub fn eta(&self, t: f64) -> f64 {
        let g = self.gamma();
        1.0 - self.t_big.powf(-g) + (t + self.t_big).powf(-g)
    }

    pub fn eta_prime(&self, t: f64) -> f64 {
        -self.xi_prime(t)
    }

    /// Checks the exponent ladder for the kind.
    pub fn validate_ladder(&self) -> Result<()> {
        let Ladder {
            delta,
            gamma,
            beta,
            alpha,
        } = self.ladder;
        let bad = |msg: String| Err(LabError::Domain(format!("{} ladder: {msg}", self.kind)));
        if !(0.0 < delta && delta < gamma && gamma < beta) {
            return bad(format!(
                "need 0 < delta < gamma < beta, got {delta}, {gamma}, {beta}"
            ));
        }
        if self.kind == BarrierKind::H2LowerZ {
            if !(beta < alpha && alpha < LADDER_CAP) {
                return bad(format!(
                    "need beta < alpha < 4/25, got beta = {beta}, alpha = {alpha}"
                ));
            }
        } else {
            if !(beta < LADDER_CAP) {
                return bad(format!("need beta < 4/25, got {beta}"));
            }
            if !(ALPHA_FLOOR < alpha && alpha < 0.5) {
                return bad(format!("need 7/15 < alpha < 1/2, got {alpha}"));
            }
            let kappa = self.kappa();
            if kappa > 1.0 && (alpha - (0.5 - 1.0 / (45.0 * kappa))).abs() > 1e-12 {
                return bad(format!(
                    "alpha must equal 1/2 - 1/(45 kappa) for kappa = {kappa}"
                ));
            }
        }
        if self.kind.is_restart() {
            let s = self.star.ok_or_else(|| {
                LabError::Domain("restart barriers need the starred exponents".into())
            })?;
            if !(beta < s.delta && s.delta < s.gamma && s.gamma < s.beta && s.beta < LADDER_CAP) {
                return bad(format!(
                    "need beta < delta* < gamma* < beta* < 4/25, got {beta}, {}, {}, {}",
                    s.delta, s.gamma, s.beta
                ));
            }
        }
        if !(self.m > 0.0) {
            return bad(format!("amplitude M = {} must be positive", self.m));
        }
        let eps = self.epsilon();
        if !(0.0 < eps && eps < 0.5 * self.region_gap()) {
            return bad(format!(
                "need 0 < epsilon < {}, got {eps}",
                0.5 * self.region_gap()
            ));
        }
        Ok(())
    }

    /// The closed-form conditions on `T` for data with junction `A`.
    pub fn t_conditions(&self, junction: f64, pair: &SpeedPair) -> Vec<TCondition> {
        let t = self.t_big;
        let Ladder {
            delta, beta, alpha, ..
        } = self.ladder;
        let mut out = Vec::new();
        match self.kind {
            BarrierKind::H2LowerZ => {
                let nu = self.exponent;
                let half_mu = 0.5 * pair.mu;
                out.push(TCondition {
                    name: "T^delta > A",
                    margin: t.powf(delta) - junction,
                });
                out.push(TCondition {
                    name: "cos(T^(delta-alpha)) > 1/2",
                    margin: t.powf(delta - alpha).cos() - 0.5,
                });
                let ln_lhs = half_mu * t.powf(alpha) + (alpha * nu - 2.0 - nu) * t.ln();
                out.push(TCondition {
                    name: "flat initial ordering",
                    margin: ln_lhs - half_mu * t.powf(delta),
                });
            }
            _ => {
                let speed = 2.0 * pair.lambda;
                let reach = (speed * t - t.powf(delta)).min(t.powf(delta));
                out.push(TCondition {
                    name: "min(sT - T^delta, T^delta) > A",
                    margin: reach - junction,
                });
                out.push(TCondition {
                    name: "cos(T^(4/25-alpha)) > 1/2",
                    margin: t.powf(LADDER_CAP - alpha).cos() - 0.5,
                });
                if matches!(self.kind, BarrierKind::H1Lower) {
                    let k = self.exponent;
                    out.push(TCondition {
                        name: "positivity T^(alpha(k+1)) > T^(kappa/2+beta)",
                        margin: (alpha * (k + 1.0) - (0.5 * self.kappa() + beta)) * t.ln(),
                    });
                }
                if self.kind.is_restart() {
                    let ds = self.delta();
                    let reach = (speed * t - t.powf(ds)).min(t.powf(ds));
                    out.push(TCondition {
                        name: "min(c*T - T^delta*, T^delta*) > 1",
                        margin: reach - 1.0,
                    });
                }
            }
        }
        out.push(TCondition {
            name: "T > A",
            margin: t - junction,
        });
        out
    }
}

/// Values of the solution at time `T` used as the restart datum, extended beyond the grid by
/// a log-linear table of the linear far field.
#[derive(Debug)]
struct RestartTable {
    y_left: f64,
    dx: f64,
    q: Vec<f64>,
    far_start: f64,
    far_step: f64,
    ln_far: Vec<f64>,
}

impl RestartTable {
    fn grid_value(&self, z: f64) -> f64 {
        let s = (z - self.y_left) / self.dx;
        let i = (s.floor() as usize).min(self.q.len() - 2);
        let w = s - i as f64;
        (1.0 - w) * self.q[i] + w * self.q[i + 1]
    }

    fn value(&self, z: f64) -> f64 {
        if z < 0.0 {
            return -self.value(-z);
        }
        if z < 1.0 {
            return self.grid_value(1.0) * z;
        }
        if z <= self.far_start {
            return self.grid_value(z);
        }
        let s = (z - self.far_start) / self.far_step;
        let n = self.ln_far.len();
        if s < (n - 1) as f64 {
            let i = s.floor() as usize;
            let w = s - i as f64;
            return ((1.0 - w) * self.ln_far[i] + w * self.ln_far[i + 1]).exp();
        }
        // Power-law continuation from the last two entries.
        let z1 = self.far_start + (n - 2) as f64 * self.far_step;
        let z2 = z1 + self.far_step;
        let slope = (self.ln_far[n - 1] - self.ln_far[n - 2]) / (z2 / z1).ln();
        (self.ln_far[n - 1] + slope * (z / z2).ln()).exp()
    }
}

/// The restart datum `w₀*`: `v(T, ·)` in the comoving frame, linear on `[0, 1]`.
#[derive(Clone, Debug)]
pub struct RestartData {
    pub t_big: f64,
    pub snapshot: FieldSnapshot,
    table: Arc<RestartTable>,
}

impl RestartData {
    /// Builds the datum from a leading-edge snapshot at time `T`, tabulating `far` up to `reach`.
    pub fn from_snapshot(snapshot: FieldSnapshot, far: &FarField, reach: f64) -> Result<Self> {
        if snapshot.y_left > 0.0 || snapshot.y_right() < 2.0 {
            return Err(LabError::Domain(
                "restart snapshot must cover [0, 2]".into(),
            ));
        }
        let t = snapshot.t;
        let far_start = snapshot.y_right();
        let far_step = 0.5;
        let n = (((reach - far_start) / far_step).ceil() as usize).max(2) + 1;
        let ln_far = (0..n)
            .into_par_iter()
            .map(|i| {
                let v = far.value(t, far_start + i as f64 * far_step)?;
                if v > 0.0 {
                    Ok(v.ln())
                } else {
                    Err(LabError::Range(format!(
                        "far field is not positive at t = {t}"
                    )))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        let table = RestartTable {
            y_left: snapshot.y_left,
            dx: snapshot.dx,
            q: snapshot.q.clone(),
            far_start,
            far_step,
            ln_far,
        };
        Ok(RestartData {
            t_big: t,
            snapshot,
            table: Arc::new(table),
        })
    }

    pub fn value(&self, z: f64) -> f64 {
        self.table.value(z)
    }

    pub fn datum(&self) -> TailInitialData {
        let table = Arc::clone(&self.table);
        TailInitialData::restart(
            "v(T)",
            Arc::new(move |z| table.value(z)),
            vec![1.0, self.table.far_start],
        )
    }

    /// `(C₁, C₂)`: extreme values of `v(T, y) T^{3/2} / y` on `T^{δ*} <= y <= √T`.
    pub fn envelope(&self, delta_star: f64) -> Result<(f64, f64)> {
        let t = self.t_big;
        let (lo, hi) = (t.powf(delta_star), t.sqrt());
        let ratios: Vec<f64> = (0..self.snapshot.len())
            .map(|i| (self.snapshot.y(i), self.snapshot.q[i]))
            .filter(|&(y, _)| y >= lo && y <= hi)
            .map(|(y, q)| q * t.powf(1.5) / y)
            .collect();
        if ratios.is_empty() {
            return Err(LabError::Domain(format!("no grid nodes in [{lo}, {hi}]")));
        }
        let c1 = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        let c2 = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok((c1, c2))
    }
}

/// Leading-edge solution snapshots at prescribed times, extended by the linear far field.
pub struct ReferenceRun {
    pub snapshots: Vec<FieldSnapshot>,
    far: FarField,
}

impl ReferenceRun {
    pub fn simulate(
        f: &KppNonlinearity,
        data: &FrontInitialData,
        pair: &SpeedPair,
        dx: f64,
        dt: f64,
        times: &[f64],
    ) -> Result<Self> {
        let frame = Frame::leading_edge(pair);
        let mut cfg = SolverConfig::for_dx(dx);
        cfg.dt = dt;
        let mut solver = setup(f, data, frame, Grid::spanning(-60.0, 60.0, dx), cfg)?;
        let mut times: Vec<f64> = times.to_vec();
        times.sort_by(|a, b| a.total_cmp(b));
        times.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        let mut snapshots = Vec::with_capacity(times.len());
        for &t in &times {
            if t > 0.0 {
                solver.run_until(t, |_| Ok(()))?;
            }
            snapshots.push(solver.snapshot().clone());
        }
        Ok(ReferenceRun {
            snapshots,
            far: FarField::new(data, frame, f.fprime0()),
        })
    }

    pub fn snapshot_at(&self, t: f64) -> Option<&FieldSnapshot> {
        let i = self
            .snapshots
            .partition_point(|s| s.t < t - 1e-7 * t.max(1.0));
        self.snapshots
            .get(i)
            .filter(|s| (s.t - t).abs() <= 1e-7 * t.max(1.0))
    }

    /// `v(t, y)` at a stored time, from the grid or from the far field beyond it.
    pub fn value(&self, t: f64, y: f64) -> Result<f64> {
        let snap = self
            .snapshot_at(t)
            .ok_or_else(|| LabError::Domain(format!("no reference snapshot at t = {t}")))?;
        if y > snap.y_right() {
            return self.far.value(snap.t, y);
        }
        if y < snap.y_left {
            return Err(LabError::Domain(format!(
                "y = {y} is left of the reference grid at t = {t}"
            )));
        }
        let s = (y - snap.y_left) / snap.dx;
        let i = (s.floor() as usize).min(snap.len() - 2);
        let w = s - i as f64;
        Ok((1.0 - w) * snap.q[i] + w * snap.q[i + 1])
    }

    pub fn far_field(&self) -> &FarField {
        &self.far
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Zone {
    /// Cosine above one half.
    Inner,
    /// `[π/4, 3π/2]` in scaled units.
    Middle,
    /// Past the cosine window.
    Beyond,
}

impl Zone {
    pub fn name(self) -> &'static str {
        match self {
            Zone::Inner => "inner",
            Zone::Middle => "middle",
            Zone::Beyond => "beyond",
        }
    }
}

/// Parts of the operator residual; `margin >= 0` is the required sign for either barrier type.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Residual {
    pub linear: f64,
    pub correction: f64,
    pub reaction: f64,
    pub total: f64,
    pub margin: f64,
    pub relative: f64,
    pub zone: Zone,
}

/// A barrier: `ξ w + 𝒱` (upper) or `η w - 𝒱` (lower), in comoving coordinates `y = x - ct`.
#[derive(Clone)]
pub struct BarrierSpec {
    pub params: BarrierParams,
    pub f: KppNonlinearity,
    pub pair: SpeedPair,
    pub data: FrontInitialData,
    linear: Vec<(TailInitialData, f64)>,
    drift: f64,
    restart: Option<RestartData>,
}

impl fmt::Debug for BarrierSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BarrierSpec")
            .field("params", &self.params)
            .field("data", &self.data.family)
            .field("linear", &self.linear)
            .finish()
    }
}

/// `x ↦ v₀(x)` on `[A, ∞)`, joined linearly to zero at the origin.
fn joined_datum(data: &FrontInitialData, lambda: f64) -> TailInitialData {
    let d = data.clone();
    let a = data.junction.max(1e-9);
    let at_a = data.weighted(a, lambda);
    let f = move |z: f64| {
        if z < a {
            at_a * z / a
        } else {
            d.weighted(z, lambda)
        }
    };
    TailInitialData::restart("v0", Arc::new(f), vec![a])
}

impl BarrierSpec {
    pub fn new(
        params: BarrierParams,
        f: &KppNonlinearity,
        data: &FrontInitialData,
        restart: Option<RestartData>,
    ) -> Result<Self> {
        let kind = params.kind;
        let f0 = f.fprime0();
        let (pair, exponent) = match (&data.family, kind.is_flat()) {
            (DataFamily::H1 { k, .. }, false) => (SpeedPair::critical(f0), *k),
            (DataFamily::H2 { nu, lambda }, true) => (SpeedPair::from_lambda(*lambda, f0)?, *nu),
            _ => {
                return Err(LabError::Domain(format!(
                    "{kind} does not apply to data {:?}",
                    data.family
                )));
            }
        };
        if (exponent - params.exponent).abs() > 1e-12 {
            return Err(LabError::Domain(format!(
                "params exponent {} differs from the data's {exponent}",
                params.exponent
            )));
        }
        let t_big = params.t_big;
        let Ladder { beta, alpha, .. } = params.ladder;
        let chi = ChiParams {
            t_big,
            alpha,
            kappa: params.kappa(),
            beta,
        };
        let lambda = pair.lambda;
        let linear = match kind {
            BarrierKind::H1Upper | BarrierKind::H2Upper => {
                let base = if params.kappa()
                    == (if kind.is_flat() {
                        exponent - 1.0
                    } else {
                        exponent
                    }) {
                    if kind.is_flat() {
                        TailInitialData::h2(exponent).scaled(data.a2)
                    } else {
                        TailInitialData::h1(exponent).scaled(data.a2)
                    }
                } else {
                    joined_datum(data, lambda)
                };
                let bump = Perturbation::chi0(chi, -1.0, params.m).shifted(2.0 * lambda * t_big);
                vec![(base.with_perturbation(bump)?, 0.0)]
            }
            BarrierKind::H1Lower => {
                if exponent < -3.0 {
                    return Err(LabError::Domain(format!(
                        "{kind} needs k >= -3, got {exponent}"
                    )));
                }
                let bump = Perturbation::chi0(chi, 1.0, 1.0);
                let base = TailInitialData::h1(exponent).scaled(data.a1);
                if (-1.0..0.0).contains(&exponent) {
                    vec![
                        (base, 4.0 * t_big),
                        (TailInitialData::perturbation_only(bump), 0.0),
                    ]
                } else {
                    vec![(base.with_perturbation(bump)?, 0.0)]
                }
            }
            BarrierKind::H1UpperRestart | BarrierKind::H1LowerRestart => {
                if exponent >= -3.0 {
                    return Err(LabError::Domain(format!(
                        "{kind} needs k < -3, got {exponent}"
                    )));
                }
                let r = restart
                    .as_ref()
                    .ok_or_else(|| LabError::Domain(format!("{kind} needs restart data")))?;
                if (r.t_big - t_big).abs() > 1e-9 * t_big {
                    return Err(LabError::Domain(format!(
                        "restart time {} differs from T = {t_big}",
                        r.t_big
                    )));
                }
                let height = t_big.powf(params.height_exponent());
                let width = t_big.powf(alpha);
                let bump = if kind.is_upper() {
                    Perturbation::cosine(-1.0, params.m, height, width, pair.c_star * t_big)
                } else {
                    Perturbation::cosine(1.0, 1.0, height, width, 0.0)
                };
                vec![(r.datum().with_perturbation(bump)?, 0.0)]
            }
            BarrierKind::H2LowerZ => {
                if !(pair.mu > 0.0) {
                    return Err(LabError::Domain(
                        "the half-speed barrier needs c > c*".into(),
                    ));
                }
                let height = t_big.powf(alpha * exponent - 2.0 + beta);
                let bump = Perturbation::cosine(1.0, 1.0, height, t_big.powf(alpha), 0.0);
                vec![(
                    TailInitialData::h2(exponent)
                        .scaled(data.a1)
                        .with_perturbation(bump)?,
                    0.0,
                )]
            }
        };
        let drift = if kind.is_flat() { pair.mu } else { 0.0 };
        let spec = BarrierSpec {
            params,
            f: f.clone(),
            pair,
            data: data.clone(),
            linear,
            drift,
            restart,
        };
        let (lo, hi) = (spec.floor(0.0), spec.window_end(0.0));
        if !(lo < hi) {
            return Err(LabError::Domain(format!(
                "region edge {lo} is not left of the cosine cutoff {hi}"
            )));
        }
        Ok(spec)
    }

    pub fn restart(&self) -> Option<&RestartData> {
        self.restart.as_ref()
    }

    fn scale(&self, t: f64) -> f64 {
        (t + self.params.t_big).powf(self.params.ladder.alpha)
    }

    /// Window coordinate `s` (zero at the cosine centre) for comoving `y`.
    fn window_coordinate(&self, t: f64, y: f64) -> f64 {
        if self.params.kind.is_upper() {
            y + self.drift * t - 2.0 * self.pair.lambda * self.params.t_big
        } else {
            y
        }
    }

    fn from_window(&self, t: f64, s: f64) -> f64 {
        if self.params.kind.is_upper() {
            s - self.drift * t + 2.0 * self.pair.lambda * self.params.t_big
        } else {
            s
        }
    }

    /// Lower edge of the region in window units.
    fn edge(&self, t: f64) -> f64 {
        let e = (t + self.params.t_big).powf(self.params.delta());
        if self.params.kind.is_upper() {
            -e
        } else {
            e
        }
    }

    /// Lower edge of the region in comoving units.
    pub fn floor(&self, t: f64) -> f64 {
        self.from_window(t, self.edge(t))
    }

    /// End of the cosine window in comoving units.
    pub fn window_end(&self, t: f64) -> f64 {
        self.from_window(t, 1.5 * PI * self.scale(t))
    }

    pub fn comoving(&self, t: f64, x: f64) -> f64 {
        x - self.pair.c * t
    }

    pub fn zone(&self, t: f64, y: f64) -> Zone {
        let psi = self.window_coordinate(t, y) / self.scale(t);
        if psi <= 0.25 * PI {
            Zone::Inner
        } else if psi <= 1.5 * PI {
            Zone::Middle
        } else {
            Zone::Beyond
        }
    }

    fn linear_value(&self, t: f64, y: f64) -> Result<f64> {
        let yp = y + self.drift * t;
        let mut sum = 0.0;
        for (w, offset) in &self.linear {
            let tt = t + offset;
            sum += if tt == 0.0 {
                w.eval(yp)
            } else {
                heat_eval_quadrature(w, tt, yp)?
            };
        }
        Ok(sum)
    }

    /// Cosine correction and its operator image, in leading-edge units.
    fn correction(&self, t: f64, y: f64) -> (f64, f64) {
        let p = &self.params;
        let tt = t + p.t_big;
        let la = self.scale(t);
        let s = self.window_coordinate(t, y);
        if s < self.edge(t) || s > 1.5 * PI * la {
            return (0.0, 0.0);
        }
        let psi = s / la;
        let alpha = p.ladder.alpha;
        let e = p.height_exponent();
        let (ln_h, growth, mass) = match p.kind {
            BarrierKind::H2LowerZ => {
                let half_mu = 0.5 * self.pair.mu;
                let d = p.ladder.delta;
                (
                    half_mu * (tt.powf(d) - y) + e * tt.ln(),
                    half_mu * d * tt.powf(d - 1.0) + e / tt,
                    half_mu * half_mu,
                )
            }
            k if k.is_upper() => (p.m.ln() + e * tt.ln(), e / tt, 0.0),
            _ => (e * tt.ln(), e / tt, 0.0),
        };
        let h = ln_h.exp();
        let value = h * psi.cos();
        let op = h
            * ((growth + tt.powf(-2.0 * alpha) + mass) * psi.cos() + alpha * psi / tt * psi.sin());
        (value, op)
    }

    fn check_region(&self, t: f64, y: f64) -> Result<()> {
        let lo = self.floor(t);
        if !(t >= 0.0) || y < lo - 1e-9 * lo.abs().max(1.0) {
            return Err(LabError::Domain(format!(
                "(t, y) = ({t}, {y}) lies outside the region y >= {lo}"
            )));
        }
        Ok(())
    }

    /// Barrier value in leading-edge units at comoving `y`.
    pub fn value_comoving(&self, t: f64, y: f64) -> Result<f64> {
        self.check_region(t, y)?;
        let w = self.linear_value(t, y)?;
        let (v, _) = self.correction(t, y);
        Ok(if self.params.kind.is_upper() {
            self.params.xi(t) * w + v
        } else {
            self.params.eta(t) * w - v
        })
    }

    /// Operator residual at comoving `y` (leading-edge units for the half-speed barrier).
    pub fn residual_comoving(&self, t: f64, y: f64) -> Result<Residual> {
        self.check_region(t, y)?;
        let p = &self.params;
        let w = self.linear_value(t, y)?;
        let (v, op) = self.correction(t, y);
        let zone = self.zone(t, y);
        let (linear, correction, reaction) = if p.kind.is_upper() {
            (p.xi_prime(t) * w, op, 0.0)
        } else {
            let value = p.eta(t) * w - v;
            (
                p.eta_prime(t) * w,
                -op,
                self.f.r_weighted(self.pair.lambda, y, value),
            )
        };
        let total = linear + correction + reaction;
        let margin = if p.kind.is_upper() { total } else { -total };
        let size = linear.abs() + correction.abs() + reaction.abs();
        let relative = if size > 0.0 { margin / size } else { 0.0 };
        Ok(Residual {
            linear,
            correction,
            reaction,
            total,
            margin,
            relative,
            zone,
        })
    }

    fn native_weight(&self, y: f64) -> f64 {
        if self.params.kind == BarrierKind::H2LowerZ {
            (0.5 * self.pair.mu * y).exp()
        } else {
            1.0
        }
    }

    /// Barrier value at `(t, x)` in its own frame (`v` or `z`).
    pub fn eval(&self, t: f64, x: f64) -> Result<f64> {
        let y = self.comoving(t, x);
        let v = self.value_comoving(t, y)?;
        let out = v * self.native_weight(y);
        if !out.is_finite() {
            return Err(LabError::Range(format!(
                "barrier value overflows at (t, x) = ({t}, {x})"
            )));
        }
        Ok(out)
    }

    /// Operator residual at `(t, x)` in the barrier's own frame; the reaction term is included for
    /// lower barriers.
    pub fn operator_residual(&self, t: f64, x: f64) -> Result<Residual> {
        let y = self.comoving(t, x);
        let r = self.residual_comoving(t, y)?;
        let w = self.native_weight(y);
        Ok(Residual {
            linear: r.linear * w,
            correction: r.correction * w,
            reaction: r.reaction * w,
            total: r.total * w,
            margin: r.margin * w,
            ..r
        })
    }

    /// Fourth-order finite differences of the barrier in leading-edge units through
    /// `∂t - ∂xx + 2λ∂x` at lab position `x` (no reaction); compare with `linear + correction` of
    /// [`BarrierSpec::residual_comoving`].
    pub fn finite_difference_operator(&self, t: f64, x: f64, h: f64) -> Result<f64> {
        let c = self.pair.c;
        let e = |dt: f64, dx: f64| self.value_comoving(t + dt, x + dx - c * (t + dt));
        let (m2, m1, p1, p2) = (e(0.0, -2.0 * h)?, e(0.0, -h)?, e(0.0, h)?, e(0.0, 2.0 * h)?);
        let u0 = e(0.0, 0.0)?;
        let ux = (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * h);
        let uxx = (-m2 + 16.0 * m1 - 30.0 * u0 + 16.0 * p1 - p2) / (12.0 * h * h);
        let ut = (e(-2.0 * h, 0.0)? - 8.0 * e(-h, 0.0)? + 8.0 * e(h, 0.0)? - e(2.0 * h, 0.0)?)
            / (12.0 * h);
        Ok(ut - uxx + 2.0 * self.pair.lambda * ux)
    }
}

/// Sampling lattice: log-spaced times, cell-centred points across each scaled sub-zone.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingPlan {
    pub t_min: f64,
    pub t_max: f64,
    pub per_decade: usize,
    pub points_per_zone: usize,
    /// Extent of the zone past the cosine window, in units of `(t + T)^α`.
    pub beyond: f64,
    pub initial_points: usize,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        SamplingPlan {
            t_min: 1.0,
            t_max: 1e3,
            per_decade: 64,
            points_per_zone: 128,
            beyond: 2.5 * PI,
            initial_points: 1024,
        }
    }
}

impl SamplingPlan {
    pub fn coarse() -> Self {
        SamplingPlan {
            per_decade: 8,
            points_per_zone: 16,
            initial_points: 256,
            ..Self::default()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        log_grid(self.t_min, self.t_max, self.per_decade)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Check {
    Residual(Zone),
    Boundary,
    Initial,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Check::Residual(z) => write!(f, "residual:{}", z.name()),
            Check::Boundary => f.write_str("boundary"),
            Check::Initial => f.write_str("initial"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Violation {
    pub check: Check,
    pub t: f64,
    pub y: f64,
    pub margin: f64,
    pub relative: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckSummary {
    pub check: Check,
    pub samples: usize,
    pub violations: usize,
    pub worst_relative: f64,
    pub worst_margin: f64,
    pub at: (f64, f64),
}

#[derive(Clone, Debug)]
pub struct Certificate {
    pub kind: BarrierKind,
    pub params: BarrierParams,
    pub summaries: Vec<CheckSummary>,
    pub violations: Vec<Violation>,
    pub errors: Vec<String>,
}

impl Certificate {
    pub fn passed(&self) -> bool {
        self.violations.is_empty() && self.errors.is_empty()
    }

    pub fn summary(&self, check: Check) -> Option<&CheckSummary> {
        self.summaries.iter().find(|s| s.check == check)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let p = &self.params;
        writeln!(
            out,
            "# kpplab barrier certificate v1; kind={} T={:e} M={:e} delta={} gamma={} beta={} alpha={} epsilon={}; advisory numerics",
            self.kind,
            p.t_big,
            p.m,
            p.delta(),
            p.gamma(),
            p.ladder.beta,
            p.ladder.alpha,
            p.epsilon()
        )?;
        writeln!(
            out,
            "check,samples,violations,worst_relative,worst_margin,t,y"
        )?;
        for s in &self.summaries {
            writeln!(
                out,
                "{},{},{},{:e},{:e},{:e},{:e}",
                s.check, s.samples, s.violations, s.worst_relative, s.worst_margin, s.at.0, s.at.1
            )?;
        }
        Ok(())
    }

    pub fn write_violations_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "check,t,y,margin,relative")?;
        for v in &self.violations {
            writeln!(
                out,
                "{},{:e},{:e},{:e},{:e}",
                v.check, v.t, v.y, v.margin, v.relative
            )?;
        }
        Ok(())
    }
}

impl fmt::Display for Certificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} certificate (T = {:.4e}, M = {:.3e}, epsilon = {:.4}): {} [advisory numerics, not a proof]",
            self.kind,
            self.params.t_big,
            self.params.m,
            self.params.epsilon(),
            if self.passed() { "no violations" } else { "VIOLATED" }
        )?;
        for s in &self.summaries {
            writeln!(
                f,
                "  {:<16} samples {:>6}  violations {:>5}  worst relative margin {:+.3e} at (t, y) = ({:.3e}, {:.3e})",
                s.check.to_string(),
                s.samples,
                s.violations,
                s.worst_relative,
                s.at.0,
                s.at.1
            )?;
        }
        for e in self.errors.iter().take(5) {
            writeln!(f, "  error: {e}")?;
        }
        Ok(())
    }
}

struct Sample {
    check: Check,
    t: f64,
    y: f64,
    margin: f64,
    relative: f64,
}

fn ordering(check: Check, t: f64, y: f64, barrier: f64, solution: f64, upper: bool) -> Sample {
    let margin = if upper {
        barrier - solution
    } else {
        solution - barrier
    };
    let size = barrier.abs() + solution.abs();
    Sample {
        check,
        t,
        y,
        margin,
        relative: if size > 0.0 { margin / size } else { 0.0 },
    }
}

/// Evaluates the residual sign on the lattice, the boundary ordering against `reference` on the
/// region edge, and the initial ordering at `t = 0` (against the restart datum for restarts).
pub fn certify(spec: &BarrierSpec, plan: &SamplingPlan, reference: &ReferenceRun) -> Certificate {
    let p = spec.params;
    let upper = p.kind.is_upper();
    let offset = if p.kind.is_restart() { p.t_big } else { 0.0 };
    let times = plan.times();
    let n = plan.points_per_zone;

    let mut points: Vec<(Check, f64, f64)> = Vec::new();
    for &t in &times {
        let la = spec.scale(t);
        let zones = [
            (Zone::Inner, spec.edge(t) / la, 0.25 * PI),
            (Zone::Middle, 0.25 * PI, 1.5 * PI),
            (Zone::Beyond, 1.5 * PI, 1.5 * PI + plan.beyond),
        ];
        for (zone, lo, hi) in zones {
            for i in 0..n {
                let psi = lo + (hi - lo) * (i as f64 + 0.5) / n as f64;
                points.push((Check::Residual(zone), t, spec.from_window(t, psi * la)));
            }
        }
        points.push((Check::Boundary, t, spec.floor(t)));
    }
    let (lo0, hi0) = (
        spec.floor(0.0),
        spec.from_window(0.0, (1.5 * PI + plan.beyond) * spec.scale(0.0)),
    );
    for i in 0..plan.initial_points {
        let y = lo0 + (hi0 - lo0) * (i as f64 + 0.5) / plan.initial_points as f64;
        points.push((Check::Initial, 0.0, y));
    }

    let results: Vec<std::result::Result<Sample, String>> = points
        .par_iter()
        .map(|&(check, t, y)| {
            let run = || -> Result<Sample> {
                match check {
                    Check::Residual(zone) => {
                        let r = spec.residual_comoving(t, y)?;
                        Ok(Sample {
                            check: Check::Residual(zone),
                            t,
                            y,
                            margin: r.margin,
                            relative: r.relative,
                        })
                    }
                    Check::Boundary => {
                        let b = spec.value_comoving(t, y)?;
                        let v = reference.value(t + offset, y)?;
                        Ok(ordering(check, t, y, b, v, upper))
                    }
                    Check::Initial => {
                        let b = spec.value_comoving(0.0, y)?;
                        let v = match spec.restart() {
                            Some(r) => r.value(y),
                            None => spec.data.weighted(y, spec.pair.lambda),
                        };
                        Ok(ordering(check, 0.0, y, b, v, upper))
                    }
                }
            };
            run().map_err(|e| format!("{check} at (t, y) = ({t:e}, {y:e}): {e}"))
        })
        .collect();

    let mut checks: Vec<Check> = vec![
        Check::Residual(Zone::Inner),
        Check::Residual(Zone::Middle),
        Check::Residual(Zone::Beyond),
        Check::Boundary,
        Check::Initial,
    ];
    checks.dedup();
    let mut summaries: Vec<CheckSummary> = checks
        .iter()
        .map(|&check| CheckSummary {
            check,
            samples: 0,
            violations: 0,
            worst_relative: f64::INFINITY,
            worst_margin: f64::INFINITY,
            at: (f64::NAN, f64::NAN),
        })
        .collect();
    let mut violations = Vec::new();
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(s) => {
                let sum = summaries.iter_mut().find(|x| x.check == s.check).unwrap();
                sum.samples += 1;
                if s.relative < sum.worst_relative {
                    sum.worst_relative = s.relative;
                    sum.worst_margin = s.margin;
                    sum.at = (s.t, s.y);
                }
                if s.relative < -ROUNDOFF || !s.margin.is_finite() {
                    sum.violations += 1;
                    violations.push(Violation {
                        check: s.check,
                        t: s.t,
                        y: s.y,
                        margin: s.margin,
                        relative: s.relative,
                    });
                }
            }
            Err(e) => errors.push(e),
        }
    }
    Certificate {
        kind: p.kind,
        params: p,
        summaries,
        violations,
        errors,
    }
}

/// Everything needed to build barriers for varying `(T, M)`.
#[derive(Clone, Debug)]
pub struct BarrierDraft {
    pub kind: BarrierKind,
    pub f: KppNonlinearity,
    pub data: FrontInitialData,
    pub ladder: Ladder,
    pub star: Option<StarLadder>,
    pub m: f64,
    pub epsilon: Option<f64>,
    /// Grid spacing and step of the reference solver.
    pub dx: f64,
    pub dt: f64,
}

impl BarrierDraft {
    pub fn new(kind: BarrierKind, f: &KppNonlinearity, data: &FrontInitialData) -> Result<Self> {
        let exponent = match &data.family {
            DataFamily::H1 { k, .. } => *k,
            DataFamily::H2 { nu, .. } => *nu,
            other => {
                return Err(LabError::Domain(format!(
                    "barriers need H1 or H2 data, got {other:?}"
                )))
            }
        };
        let p = BarrierParams::new(kind, exponent, 1.0);
        let lambda = data.rate().unwrap_or(1.0);
        Ok(BarrierDraft {
            kind,
            f: f.clone(),
            data: data.clone(),
            ladder: p.ladder,
            star: p.star,
            m: 1.0,
            epsilon: None,
            dx: 0.125 / lambda,
            dt: 0.5,
        })
    }

    pub fn exponent(&self) -> f64 {
        match &self.data.family {
            DataFamily::H1 { k, .. } => *k,
            DataFamily::H2 { nu, .. } => *nu,
            _ => f64::NAN,
        }
    }

    pub fn pair(&self) -> Result<SpeedPair> {
        let f0 = self.f.fprime0();
        match self.data.rate() {
            Some(l) if self.kind.is_flat() => SpeedPair::from_lambda(l, f0),
            _ => Ok(SpeedPair::critical(f0)),
        }
    }

    pub fn params(&self, t_big: f64, m: f64) -> BarrierParams {
        BarrierParams {
            kind: self.kind,
            ladder: self.ladder,
            star: self.star,
            t_big,
            m,
            exponent: self.exponent(),
            epsilon: self.epsilon,
        }
    }

    /// Reference solution at the lattice times (shifted by `T` for restarts).
    pub fn reference(&self, t_big: f64, plan: &SamplingPlan) -> Result<ReferenceRun> {
        let offset = if self.kind.is_restart() { t_big } else { 0.0 };
        let mut times: Vec<f64> = plan.times().into_iter().map(|t| t + offset).collect();
        if self.kind.is_restart() {
            times.push(t_big);
        }
        ReferenceRun::simulate(&self.f, &self.data, &self.pair()?, self.dx, self.dt, &times)
    }

    /// Restart datum from the reference run, tabulated far enough for the lattice.
    pub fn restart_data(
        &self,
        t_big: f64,
        plan: &SamplingPlan,
        reference: &ReferenceRun,
    ) -> Result<RestartData> {
        let snap = reference
            .snapshot_at(t_big)
            .ok_or_else(|| LabError::Domain(format!("reference has no snapshot at T = {t_big}")))?
            .clone();
        let pair = self.pair()?;
        let reach = pair.c * t_big
            + (1.5 * PI + plan.beyond) * (t_big + plan.t_max).powf(self.ladder.alpha)
            + 25.0 * plan.t_max.sqrt()
            + 100.0;
        RestartData::from_snapshot(snap, reference.far_field(), reach)
    }

    pub fn spec(&self, t_big: f64, m: f64, restart: Option<RestartData>) -> Result<BarrierSpec> {
        BarrierSpec::new(self.params(t_big, m), &self.f, &self.data, restart)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TuneOptions {
    pub t_start: f64,
    pub t_max: f64,
    pub max_halvings: usize,
    pub coarse: SamplingPlan,
    pub plan: SamplingPlan,
}

impl TuneOptions {
    /// Defaults, except that the restarted lower barrier starts its search at `T = 2^18`.
    pub fn for_kind(kind: BarrierKind) -> Self {
        let mut o = TuneOptions::default();
        if kind == BarrierKind::H1LowerRestart {
            o.t_start = 2f64.powi(19);
            o.t_max = 2f64.powi(20);
        }
        o
    }
}

impl Default for TuneOptions {
    fn default() -> Self {
        TuneOptions {
            t_start: 2.0,
            t_max: 2f64.powi(50),
            max_halvings: 40,
            coarse: SamplingPlan::coarse(),
            plan: SamplingPlan::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Attempt {
    pub t_big: f64,
    pub m: f64,
    pub outcome: String,
}

pub struct Tuned {
    pub spec: BarrierSpec,
    pub certificate: Certificate,
    pub reference: ReferenceRun,
    pub attempts: Vec<Attempt>,
}

/// Smallest power-of-two `T >= t_start` satisfying the closed-form conditions.
pub fn smallest_admissible_t(draft: &BarrierDraft, t_start: f64, t_max: f64) -> Result<f64> {
    draft.params(1.0, draft.m).validate_ladder()?;
    let pair = draft.pair()?;
    let mut t = 2f64.powf(t_start.log2().ceil());
    let mut last = Vec::new();
    while t <= t_max {
        let conds = draft
            .params(t, draft.m)
            .t_conditions(draft.data.junction, &pair);
        if conds.iter().all(TCondition::holds) {
            return Ok(t);
        }
        last = conds
            .into_iter()
            .filter(|c| !c.holds())
            .map(|c| c.name)
            .collect();
        t *= 2.0;
    }
    Err(LabError::Tuning(format!(
        "no T <= {t_max:e} satisfies: {}",
        last.join(", ")
    )))
}

fn only_residual_in(cert: &Certificate, zones: &[Zone]) -> bool {
    cert.errors.is_empty()
        && cert
            .violations
            .iter()
            .all(|v| matches!(v.check, Check::Residual(z) if zones.contains(&z)))
}

fn describe(cert: &Certificate) -> String {
    if cert.passed() {
        return "certified".into();
    }
    let mut parts: Vec<String> = cert
        .summaries
        .iter()
        .filter(|s| s.violations > 0)
        .map(|s| format!("{} x{}", s.check, s.violations))
        .collect();
    if !cert.errors.is_empty() {
        parts.push(format!("{} evaluation errors", cert.errors.len()));
    }
    parts.join(", ")
}

/// Doubles `T` (and, for upper barriers, halves `M`) until the closed-form conditions hold and
/// the coarse and full certificates pass.
pub fn autotune_t(draft: &BarrierDraft, opts: &TuneOptions) -> Result<Tuned> {
    let mut t = smallest_admissible_t(draft, opts.t_start, opts.t_max)?;
    let pair = draft.pair()?;
    let mut attempts = Vec::new();
    let fixed_refs = if draft.kind.is_restart() {
        None
    } else {
        Some((
            draft.reference(0.0, &opts.coarse)?,
            draft.reference(0.0, &opts.plan)?,
        ))
    };
    while t <= opts.t_max {
        let conds = draft
            .params(t, draft.m)
            .t_conditions(draft.data.junction, &pair);
        if let Some(c) = conds.iter().find(|c| !c.holds()) {
            attempts.push(Attempt {
                t_big: t,
                m: draft.m,
                outcome: format!("condition '{}' fails", c.name),
            });
            t *= 2.0;
            continue;
        }
        let coarse_ref;
        let coarse_ref = match &fixed_refs {
            Some((c, _)) => c,
            None => {
                coarse_ref = draft.reference(t, &opts.coarse)?;
                &coarse_ref
            }
        };
        let coarse_restart = if draft.kind.is_restart() {
            Some(draft.restart_data(t, &opts.coarse, coarse_ref)?)
        } else {
            None
        };
        let mut m = draft.m;
        let halvings = if draft.kind.is_upper() {
            opts.max_halvings
        } else {
            0
        };
        let mut found = None;
        for _ in 0..=halvings {
            let spec = match draft.spec(t, m, coarse_restart.clone()) {
                Ok(s) => s,
                Err(e) => {
                    attempts.push(Attempt {
                        t_big: t,
                        m,
                        outcome: format!("construction failed: {e}"),
                    });
                    break;
                }
            };
            let cert = certify(&spec, &opts.coarse, coarse_ref);
            attempts.push(Attempt {
                t_big: t,
                m,
                outcome: format!("coarse: {}", describe(&cert)),
            });
            if cert.passed() {
                found = Some(m);
                break;
            }
            if !only_residual_in(&cert, &[Zone::Middle, Zone::Beyond]) {
                break;
            }
            m *= 0.5;
        }
        if let Some(m) = found {
            let own_ref;
            let full_ref = match &fixed_refs {
                Some((_, f)) => f,
                None => {
                    own_ref = draft.reference(t, &opts.plan)?;
                    &own_ref
                }
            };
            let restart = if draft.kind.is_restart() {
                Some(draft.restart_data(t, &opts.plan, full_ref)?)
            } else {
                None
            };
            let spec = draft.spec(t, m, restart)?;
            let cert = certify(&spec, &opts.plan, full_ref);
            attempts.push(Attempt {
                t_big: t,
                m,
                outcome: format!("full: {}", describe(&cert)),
            });
            if cert.passed() {
                let reference = match fixed_refs {
                    Some((_, f)) => f,
                    None => draft.reference(t, &opts.plan)?,
                };
                return Ok(Tuned {
                    spec,
                    certificate: cert,
                    reference,
                    attempts,
                });
            }
        }
        t *= 2.0;
    }
    let last = attempts
        .last()
        .map(|a| a.outcome.clone())
        .unwrap_or_default();
    Err(LabError::Tuning(format!(
        "{}: no certified T up to {:e} (last attempt: {last})",
        draft.kind, opts.t_max
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fisher() -> KppNonlinearity {
        KppNonlinearity::fisher()
    }

    fn h1_spec(kind: BarrierKind, k: f64, t_big: f64, m: f64) -> BarrierSpec {
        let pair = SpeedPair::critical(1.0);
        let data = FrontInitialData::h1(k, 1.0, &pair).with_junction(1.0);
        let mut p = BarrierParams::new(kind, k, t_big);
        p.m = m;
        BarrierSpec::new(p, &fisher(), &data, None).unwrap()
    }

    #[test]
    fn ladder_defaults_are_valid() {
        for kind in [
            BarrierKind::H1Upper,
            BarrierKind::H1Lower,
            BarrierKind::H2Upper,
            BarrierKind::H2LowerZ,
            BarrierKind::H1LowerRestart,
        ] {
            let exponent = match kind {
                BarrierKind::H1LowerRestart => -4.0,
                _ => 0.0,
            };
            BarrierParams::new(kind, exponent, 100.0)
                .validate_ladder()
                .unwrap();
        }
        let p = BarrierParams::new(BarrierKind::H1Upper, 2.0, 100.0);
        assert!((p.ladder.alpha - (0.5 - 1.0 / 90.0)).abs() < 1e-15);
        p.validate_ladder().unwrap();
    }

    #[test]
    fn broken_ladders_are_rejected() {
        let mut p = BarrierParams::new(BarrierKind::H1Upper, 0.0, 100.0);
        p.ladder.beta = 0.2;
        assert!(p.validate_ladder().is_err());
        let mut p = BarrierParams::new(BarrierKind::H1Upper, 2.0, 100.0);
        p.ladder.alpha = 0.48;
        assert!(p.validate_ladder().is_err());
        let mut p = BarrierParams::new(BarrierKind::H2LowerZ, 1.0, 100.0);
        p.ladder.alpha = 0.3;
        assert!(p.validate_ladder().is_err());
        let mut p = BarrierParams::new(BarrierKind::H1UpperRestart, -4.0, 100.0);
        p.star = Some(StarLadder {
            delta: 0.1,
            gamma: 0.15,
            beta: 0.155,
        });
        assert!(p.validate_ladder().is_err());
    }

    #[test]
    fn epsilon_defaults_to_a_quarter_gap() {
        let mut p = BarrierParams::new(BarrierKind::H1Lower, 0.0, 100.0);
        let gap = p.ladder.beta - p.ladder.delta;
        assert!((p.epsilon() - 0.25 * gap).abs() < 1e-15);
        p.epsilon = Some(0.5 * gap);
        assert!(p.validate_ladder().is_err());
        p.epsilon = Some(0.4 * gap);
        p.validate_ladder().unwrap();
        let r = BarrierParams::new(BarrierKind::H1LowerRestart, -4.0, 100.0);
        let s = r.star.unwrap();
        assert!((r.epsilon() - 0.25 * (s.beta - s.delta)).abs() < 1e-15);
    }

    #[test]
    fn xi_and_eta() {
        let p = BarrierParams::new(BarrierKind::H1Upper, 0.0, 1e4);
        assert_eq!(p.xi(0.0), 1.0);
        assert_eq!(p.eta(0.0), 1.0);
        let t = 300.0;
        let h = 1e-3;
        let d = (p.xi(t + h) - p.xi(t - h)) / (2.0 * h);
        assert!((d / p.xi_prime(t) - 1.0).abs() < 1e-6);
        assert!((p.xi(t) + p.eta(t) - 2.0).abs() < 1e-15);
        assert!(p.xi(t) > 1.0 && p.eta(t) < 1.0);
    }

    #[test]
    fn correction_closed_form_at_zero_phase() {
        // At ζ = 0 the operator image is M (t+T)^{κ/2+β} ((κ/2+β)/(t+T) + (t+T)^{-2α}).
        let m = 0.7;
        let spec = h1_spec(BarrierKind::H1Upper, 0.0, 64.0, m);
        let t = 5.0;
        let y = spec.from_window(t, 0.0);
        let (v, op) = spec.correction(t, y);
        let p = spec.params;
        let tt = t + p.t_big;
        let e = 0.5 * p.kappa() + p.ladder.beta;
        let expected = m * tt.powf(e) * (e / tt + tt.powf(-2.0 * p.ladder.alpha));
        assert!((op / expected - 1.0).abs() < 1e-13);
        assert!((v / (m * tt.powf(e)) - 1.0).abs() < 1e-13);
    }

    #[test]
    fn beyond_the_window_only_the_linear_part_remains() {
        let spec = h1_spec(BarrierKind::H1Upper, 0.0, 64.0, 1.0);
        let t = 3.0;
        let y = spec.window_end(t) + 5.0;
        let x = y + 2.0 * t;
        let w = spec.linear_value(t, y).unwrap();
        assert!((spec.eval(t, x).unwrap() - spec.params.xi(t) * w).abs() <= 1e-14 * w.abs());
        let r = spec.operator_residual(t, x).unwrap();
        assert_eq!(r.correction, 0.0);
        assert!((r.total - spec.params.xi_prime(t) * w).abs() <= 1e-14 * r.total.abs());
        assert!(r.margin > 0.0);
        assert_eq!(r.zone, Zone::Beyond);
    }

    #[test]
    fn cosine_vanishes_at_pi_window() {
        let spec = h1_spec(BarrierKind::H1Upper, 0.0, 64.0, 1.0);
        let y = spec.from_window(0.0, 0.5 * PI * spec.scale(0.0));
        let (v, _) = spec.correction(0.0, y);
        assert!(v.abs() < 1e-12 * 64f64.powf(0.14));
    }

    #[test]
    fn outside_region_is_rejected() {
        let spec = h1_spec(BarrierKind::H1Lower, 0.0, 64.0, 1.0);
        let below = spec.floor(2.0) - 0.5 + 2.0 * 2.0;
        assert!(matches!(spec.eval(2.0, below), Err(LabError::Domain(_))));
    }

    #[test]
    fn residual_matches_finite_differences() {
        for (kind, k) in [
            (BarrierKind::H1Upper, 0.0),
            (BarrierKind::H1Upper, -2.0),
            (BarrierKind::H1Lower, 0.0),
            (BarrierKind::H1Lower, -0.5),
        ] {
            let spec = h1_spec(kind, k, 40.0, 1.0);
            let t = 6.0;
            for psi in [0.6, 1.1, 2.4, 4.0, 6.0] {
                let y = spec.from_window(t, psi * spec.scale(t));
                let x = y + spec.pair.c * t;
                let r = spec.residual_comoving(t, y).unwrap();
                let fd = spec.finite_difference_operator(t, x, 0.05).unwrap();
                let exact = r.linear + r.correction;
                assert!(
                    (fd - exact).abs() <= 1e-4 * exact.abs(),
                    "{kind} k = {k} psi = {psi}: fd {fd:e} exact {exact:e}"
                );
            }
        }
    }

    #[test]
    fn half_speed_residual_matches_finite_differences() {
        let pair = SpeedPair::from_lambda(0.5, 1.0).unwrap();
        let data = FrontInitialData::h2(1.0, 1.0, &pair).with_junction(1.0);
        let mut p = BarrierParams::new(BarrierKind::H2LowerZ, 1.0, 3e3);
        p.ladder = Ladder {
            delta: 0.06,
            gamma: 0.08,
            beta: 0.1,
            alpha: 0.15,
        };
        let spec = BarrierSpec::new(p, &fisher(), &data, None).unwrap();
        let t = 4.0;
        for psi in [0.9, 1.3, 3.0, 5.5] {
            let y = psi * spec.scale(t);
            let x = y + pair.c * t;
            let r = spec.residual_comoving(t, y).unwrap();
            let fd = spec.finite_difference_operator(t, x, 0.05).unwrap();
            let exact = r.linear + r.correction;
            assert!(
                (fd - exact).abs() <= 1e-4 * exact.abs(),
                "psi = {psi}: fd {fd:e} exact {exact:e}"
            );
        }
        // Sign example at the region edge: the cosine correction exceeds half its height.
        let t = 2.0;
        let tt = t + p.t_big;
        let y = spec.floor(t);
        let (v, _) = spec.correction(t, y);
        let half = 0.5 * (0.5 * pair.mu * (tt.powf(0.06) - y)).exp() * tt.powf(1.1);
        assert!(v > half);
    }

    #[test]
    fn closed_form_t_for_junction_ten() {
        let pair = SpeedPair::critical(1.0);
        let data = FrontInitialData::h1(0.0, 1.0, &pair).with_junction(10.0);
        let draft = BarrierDraft::new(BarrierKind::H1Upper, &fisher(), &data).unwrap();
        let t = smallest_admissible_t(&draft, 2.0, 2f64.powi(60)).unwrap();
        // T^δ > 10 with δ = 0.1 is the binding condition: T > 10^10.
        let expected = 2f64.powf((1e10f64).log2().ceil());
        assert_eq!(t, expected);
        let half = draft.params(t / 2.0, 1.0).t_conditions(10.0, &pair);
        assert!(half.iter().any(|c| !c.holds()));
    }

    #[test]
    fn flat_ordering_condition_is_eventually_monotone() {
        let pair = SpeedPair::from_lambda(0.5, 1.0).unwrap();
        let mut ok = false;
        for j in 4..60 {
            let p = BarrierParams::new(BarrierKind::H2LowerZ, 1.0, 2f64.powi(j));
            let c = p.t_conditions(1.0, &pair);
            let h = c
                .iter()
                .find(|c| c.name == "flat initial ordering")
                .unwrap()
                .holds();
            if ok {
                assert!(h, "condition lost at 2^{j}");
            }
            ok |= h;
        }
        assert!(ok);
    }

    #[test]
    fn broken_ladder_is_rejected_before_tuning() {
        let pair = SpeedPair::critical(1.0);
        let data = FrontInitialData::h1(0.0, 1.0, &pair).with_junction(1.0);
        let mut draft = BarrierDraft::new(BarrierKind::H1Upper, &fisher(), &data).unwrap();
        draft.ladder.beta = 0.3;
        assert!(smallest_admissible_t(&draft, 2.0, 1e6).is_err());
        assert!(autotune_t(&draft, &TuneOptions::default()).is_err());
    }

    #[test]
    fn kind_names_round_trip() {
        for k in BarrierKind::ALL {
            assert_eq!(k.name().parse::<BarrierKind>().unwrap(), k);
        }
        assert!("nope".parse::<BarrierKind>().is_err());
    }
}
