//! Monotone traveling-wave profiles `U'' + cU' + f(U) = 0`, `U(-∞) = 1`, `U(+∞) = 0`.
//!
//! The profile is integrated forward from the unstable manifold of the saddle at
//! `U = 1`, then translated so that the tail is exactly `z e^{-λz}` (critical speed)
//! or `e^{-λz}` (supercritical speed) to leading order.

use std::io::Write;

use crate::error::{LabError, Result};
use crate::kpp_core::{lambda_of_c, KppNonlinearity, SpeedPair};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TailNormalization {
    /// `U(z) ≈ (z + B) e^{-λ* z}`.
    Critical,
    /// `U(z) ≈ e^{-λz} + D e^{-λ' z}` with `λ'` the fast root.
    Supercritical,
}

/// Step size and tail cut-off of the tabulated profile.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProfileGrid {
    pub step: f64,
    pub eps_tail: f64,
}

impl Default for ProfileGrid {
    fn default() -> Self {
        ProfileGrid {
            step: 0.01,
            eps_tail: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct WaveProfile {
    pub pair: SpeedPair,
    pub normalization: TailNormalization,
    nonlinearity: KppNonlinearity,
    z0: f64,
    h: f64,
    u: Vec<f64>,
    du: Vec<f64>,
    /// `1 - U ≈ left_c e^{left_r (z - z0)}` left of the table.
    left_c: f64,
    left_r: f64,
    /// Second tail coefficient: `B` (critical) or `D` (supercritical).
    tail_b: f64,
    eps_tail: f64,
}

fn rk4(f: &KppNonlinearity, c: f64, h: f64, y: [f64; 2]) -> [f64; 2] {
    let rhs = |y: [f64; 2]| [y[1], -c * y[1] - f.f(y[0])];
    let k1 = rhs(y);
    let k2 = rhs([y[0] + 0.5 * h * k1[0], y[1] + 0.5 * h * k1[1]]);
    let k3 = rhs([y[0] + 0.5 * h * k2[0], y[1] + 0.5 * h * k2[1]]);
    let k4 = rhs([y[0] + h * k3[0], y[1] + h * k3[1]]);
    [
        y[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        y[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
    ]
}

/// Least squares fit of `y ≈ a·p + b·q` on the given samples.
fn fit2(samples: &[(f64, f64, f64)]) -> (f64, f64) {
    let (mut pp, mut pq, mut qq, mut py, mut qy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(p, q, y) in samples {
        pp += p * p;
        pq += p * q;
        qq += q * q;
        py += p * y;
        qy += q * y;
    }
    let det = pp * qq - pq * pq;
    ((py * qq - qy * pq) / det, (qy * pp - py * pq) / det)
}

/// Computes the profile for speed `c >= c*`.
pub fn solve_profile(f: &KppNonlinearity, c: f64, grid: ProfileGrid) -> Result<WaveProfile> {
    let pair = lambda_of_c(c, f.fprime0())?;
    let normalization = if pair.is_critical() {
        TailNormalization::Critical
    } else {
        TailNormalization::Supercritical
    };
    let h = grid.step;
    if !(h > 0.0 && h <= 0.05) {
        return Err(LabError::Domain(format!(
            "profile step {h} must lie in (0, 0.05]"
        )));
    }
    let fp1 = f.fprime1();
    if !(fp1 < 0.0) {
        return Err(LabError::Nonlinearity(format!(
            "f'(1) = {fp1} must be negative for a saddle at U = 1"
        )));
    }
    let r = 0.5 * (-c + (c * c - 4.0 * fp1).sqrt());
    let lam = pair.lambda;
    let stop = grid.eps_tail * 1e-4;

    let eps0 = grid.eps_tail;
    let mut y = [1.0 - eps0, -eps0 * r];
    let mut u = vec![y[0]];
    let mut du = vec![y[1]];
    let max_steps = (4000.0 / (lam * h)) as usize;
    // Critical tails carry a 1/z correction, so the table runs until |B|/z is small.
    let mut z_needed = 0.0;
    loop {
        while y[0] > stop || (u.len() - 1) as f64 * h < z_needed {
            if u.len() > max_steps {
                return Err(LabError::Shooting(format!(
                    "profile did not decay below {stop:e} for c = {c}"
                )));
            }
            y = rk4(f, c, h, y);
            if !(y[1] < 0.0) || !(y[0] > 0.0) || !y[0].is_finite() {
                let z = u.len() as f64 * h;
                return Err(LabError::Shooting(format!(
                    "profile lost monotonicity at z = {z} (U = {}, U' = {}) for c = {c}; bracket [0, {z}]",
                    y[0], y[1]
                )));
            }
            u.push(y[0]);
            du.push(y[1]);
        }
        let (tau, tail_b) = fit_tail(&u, h, &pair, normalization)?;
        let target = match normalization {
            TailNormalization::Critical => tau + 60.0 * tail_b.abs().max(1.0 / lam),
            TailNormalization::Supercritical => 0.0,
        };
        if (u.len() - 1) as f64 * h >= target {
            return Ok(WaveProfile {
                pair,
                normalization,
                nonlinearity: f.clone(),
                z0: -tau,
                h,
                u,
                du,
                left_c: eps0,
                left_r: r,
                tail_b,
                eps_tail: grid.eps_tail,
            });
        }
        z_needed = target;
    }
}

/// Fits the tail of the raw table and returns the normalizing translation and the second coefficient.
fn fit_tail(
    u: &[f64],
    h: f64,
    pair: &SpeedPair,
    normalization: TailNormalization,
) -> Result<(f64, f64)> {
    let lam = pair.lambda;
    let n = u.len();
    let window = ((3.0 / (lam * h)) as usize).min(n / 4).max(8);
    let samples: Vec<(f64, f64, f64)> = (n - window..n)
        .map(|i| {
            let z = i as f64 * h;
            let y = u[i] * (lam * z).exp();
            match normalization {
                TailNormalization::Critical => (z, 1.0, y),
                TailNormalization::Supercritical => (1.0, (-pair.mu * z).exp(), y),
            }
        })
        .collect();
    let (a, b) = fit2(&samples);
    if !(a > 0.0) {
        return Err(LabError::Shooting(format!(
            "tail coefficient {a} is not positive for c = {}",
            pair.c
        )));
    }
    // Translate by τ so that the leading coefficient is one: Ũ(z) = U(z + τ).
    let tau = a.ln() / lam;
    let tail_b = match normalization {
        TailNormalization::Critical => tau + b / a,
        TailNormalization::Supercritical => b * (-pair.lambda_fast() * tau).exp(),
    };
    Ok((tau, tail_b))
}

impl WaveProfile {
    pub fn z_min(&self) -> f64 {
        self.z0
    }

    pub fn z_max(&self) -> f64 {
        self.z0 + (self.u.len() - 1) as f64 * self.h
    }

    pub fn step(&self) -> f64 {
        self.h
    }

    pub fn nodes(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.u
            .iter()
            .enumerate()
            .map(move |(i, &v)| (self.z0 + i as f64 * self.h, v))
    }

    /// `B` in `(z + B) e^{-λz}` or `D` in `e^{-λz} + D e^{-λ'z}`.
    pub fn tail_coefficient(&self) -> f64 {
        self.tail_b
    }

    pub fn nonlinearity(&self) -> &KppNonlinearity {
        &self.nonlinearity
    }

    /// The tail formula times `e^{λz}`.
    fn tail_scaled(&self, z: f64) -> f64 {
        match self.normalization {
            TailNormalization::Critical => z + self.tail_b,
            TailNormalization::Supercritical => 1.0 + self.tail_b * (-self.pair.mu * z).exp(),
        }
    }

    fn hermite(&self, z: f64) -> (f64, f64) {
        let s = (z - self.z0) / self.h;
        let i = (s.floor() as usize).min(self.u.len() - 2);
        let t = s - i as f64;
        let (y0, y1) = (self.u[i], self.u[i + 1]);
        let (m0, m1) = (self.du[i] * self.h, self.du[i + 1] * self.h);
        let t2 = t * t;
        let t3 = t2 * t;
        let v = (2.0 * t3 - 3.0 * t2 + 1.0) * y0
            + (t3 - 2.0 * t2 + t) * m0
            + (-2.0 * t3 + 3.0 * t2) * y1
            + (t3 - t2) * m1;
        let d = ((6.0 * t2 - 6.0 * t) * y0
            + (3.0 * t2 - 4.0 * t + 1.0) * m0
            + (-6.0 * t2 + 6.0 * t) * y1
            + (3.0 * t2 - 2.0 * t) * m1)
            / self.h;
        (v, d)
    }

    /// `U(z)` on the whole line.
    pub fn value(&self, z: f64) -> f64 {
        if z < self.z_min() {
            1.0 - self.left_c * (self.left_r * (z - self.z0)).exp()
        } else if z > self.z_max() {
            self.tail_scaled(z) * (-self.pair.lambda * z).exp()
        } else {
            self.hermite(z).0
        }
    }

    /// `U'(z)`.
    pub fn derivative(&self, z: f64) -> f64 {
        if z < self.z_min() {
            -self.left_c * self.left_r * (self.left_r * (z - self.z0)).exp()
        } else if z > self.z_max() {
            let lam = self.pair.lambda;
            let e = (-lam * z).exp();
            match self.normalization {
                TailNormalization::Critical => (1.0 - lam * (z + self.tail_b)) * e,
                TailNormalization::Supercritical => {
                    let lf = self.pair.lambda_fast();
                    -lam * e - lf * self.tail_b * (-lf * z).exp()
                }
            }
        } else {
            self.hermite(z).1
        }
    }

    /// `e^{θz} U(z)` without overflow for large `z`.
    pub fn weighted(&self, z: f64, theta: f64) -> f64 {
        if z > self.z_max() {
            self.tail_scaled(z) * ((theta - self.pair.lambda) * z).exp()
        } else {
            (theta * z).exp() * self.value(z)
        }
    }

    /// The unique `z` with `U(z) = m`.
    pub fn inverse(&self, m: f64) -> Result<f64> {
        let hi = self.u[0].min(1.0 - self.eps_tail);
        let lo = self.u.last().unwrap().max(self.eps_tail);
        if !(m > lo && m < hi) {
            return Err(LabError::Range(format!(
                "level {m} outside the covered range ({lo:e}, {hi})"
            )));
        }
        // Decreasing table: first node below m.
        let j = self.u.partition_point(|&v| v >= m);
        let (mut a, mut b) = (
            self.z0 + (j - 1) as f64 * self.h,
            self.z0 + j as f64 * self.h,
        );
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if self.hermite(mid).0 >= m {
                a = mid;
            } else {
                b = mid;
            }
            if b - a < 1e-15 * (1.0 + a.abs()) {
                break;
            }
        }
        Ok(0.5 * (a + b))
    }

    /// Largest `|U'' + cU' + f(U)|` over interior nodes, with fourth-order stencils.
    pub fn ode_residual_max(&self) -> f64 {
        let h = self.h;
        let c = self.pair.c;
        let u = &self.u;
        (2..u.len() - 2)
            .map(|i| {
                let d2 = (-u[i + 2] + 16.0 * u[i + 1] - 30.0 * u[i] + 16.0 * u[i - 1] - u[i - 2])
                    / (12.0 * h * h);
                let d1 = (-u[i + 2] + 8.0 * u[i + 1] - 8.0 * u[i - 1] + u[i - 2]) / (12.0 * h);
                (d2 + c * d1 + self.nonlinearity.f(u[i])).abs()
            })
            .fold(0.0, f64::max)
    }

    /// `U(z) e^{λz} / z` (critical) or `U(z) e^{λz}` (supercritical).
    pub fn tail_ratio(&self, z: f64) -> f64 {
        let s = self.weighted(z, self.pair.lambda);
        match self.normalization {
            TailNormalization::Critical => s / z,
            TailNormalization::Supercritical => s,
        }
    }

    pub fn eps_tail(&self) -> f64 {
        self.eps_tail
    }

    /// Two-column text export with a commented header.
    pub fn write_text<W: Write>(&self, mut out: W) -> Result<()> {
        let norm = match self.normalization {
            TailNormalization::Critical => "critical",
            TailNormalization::Supercritical => "supercritical",
        };
        writeln!(
            out,
            "# c = {}, lambda = {}, normalization = {norm}",
            self.pair.c, self.pair.lambda
        )?;
        writeln!(out, "z U")?;
        for (z, v) in self.nodes() {
            writeln!(out, "{z:.10} {v:.16e}")?;
        }
        Ok(())
    }
}
