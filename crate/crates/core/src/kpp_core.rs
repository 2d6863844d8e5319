//! Reaction terms of KPP type, the speed/decay-rate dispersion relation and
//! the absorption terms of the exponentially weighted frames.

use std::fmt;
use std::sync::Arc;

use crate::error::{LabError, Result};

/// Largest exponent evaluated directly before switching to the log-space bound.
pub const EXP_CAP: f64 = 700.0;

const SAMPLE_COUNT: usize = 10_000;
const SAMPLE_LO: f64 = 1e-6;
const KPP_TOL: f64 = 1e-10;

type ReactionFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
enum Reaction {
    Fisher,
    Closed(ReactionFn),
}

/// A KPP reaction term `f`, extended linearly outside `[0, 1]`.
#[derive(Clone)]
pub struct KppNonlinearity {
    name: String,
    reaction: Reaction,
    fprime0: f64,
    fprime1: f64,
    lipschitz_bound: f64,
    strong_kpp: bool,
    c_g: f64,
    big_c_g: f64,
}

impl fmt::Debug for KppNonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KppNonlinearity")
            .field("name", &self.name)
            .field("fprime0", &self.fprime0)
            .field("fprime1", &self.fprime1)
            .field("lipschitz_bound", &self.lipschitz_bound)
            .field("strong_kpp", &self.strong_kpp)
            .field("c_g", &self.c_g)
            .field("big_c_g", &self.big_c_g)
            .finish()
    }
}

impl KppNonlinearity {
    /// `f(u) = u - u^2`.
    pub fn fisher() -> Self {
        Self::validated("fisher".into(), Reaction::Fisher, 1.0, -1.0)
            .expect("the Fisher reaction is KPP")
    }

    /// `f(u) = u (1 - u)(1 + a u)`, which is KPP for `a <= 1`.
    pub fn cubic(a: f64) -> Result<Self> {
        let f = move |s: f64| s * (1.0 - s) * (1.0 + a * s);
        Self::validated(
            format!("cubic({a})"),
            Reaction::Closed(Arc::new(f)),
            1.0,
            -(1.0 + a),
        )
    }

    /// A user supplied closed form on `[0, 1]` together with its slopes at both ends.
    pub fn custom<F>(name: &str, f: F, fprime0: f64, fprime1: f64) -> Result<Self>
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self::validated(
            name.to_string(),
            Reaction::Closed(Arc::new(f)),
            fprime0,
            fprime1,
        )
    }

    fn validated(name: String, reaction: Reaction, fprime0: f64, fprime1: f64) -> Result<Self> {
        if !(fprime0 > 0.0) || !fprime0.is_finite() {
            return Err(LabError::Nonlinearity(format!(
                "f'(0) = {fprime0} must be positive"
            )));
        }
        let mut nl = KppNonlinearity {
            name,
            reaction,
            fprime0,
            fprime1,
            lipschitz_bound: 0.0,
            strong_kpp: true,
            c_g: f64::INFINITY,
            big_c_g: 0.0,
        };
        for end in [0.0, 1.0] {
            let v = nl.inner(end);
            if v.abs() > KPP_TOL {
                return Err(LabError::Nonlinearity(format!(
                    "f({end}) = {v:e}, expected 0"
                )));
            }
        }
        let mut lip = fprime0.abs().max(fprime1.abs());
        let mut prev: Option<(f64, f64)> = None;
        let step = (1.0 - 2.0 * SAMPLE_LO) / (SAMPLE_COUNT - 1) as f64;
        for i in 0..SAMPLE_COUNT {
            let s = SAMPLE_LO + step * i as f64;
            let fs = nl.inner(s);
            if !(fs > 0.0) {
                return Err(LabError::Nonlinearity(format!(
                    "f({s}) = {fs:e} is not positive"
                )));
            }
            if fs > fprime0 * s + KPP_TOL {
                return Err(LabError::Nonlinearity(format!(
                    "f({s}) = {fs} exceeds f'(0) s = {}",
                    fprime0 * s
                )));
            }
            let ratio = nl.g(s) / (s * s);
            nl.c_g = nl.c_g.min(ratio);
            nl.big_c_g = nl.big_c_g.max(ratio);
            if let Some((ps, pf)) = prev {
                if fs / s > pf / ps + KPP_TOL {
                    nl.strong_kpp = false;
                }
                lip = lip.max(((fs - pf) / (s - ps)).abs());
            }
            prev = Some((s, fs));
        }
        nl.lipschitz_bound = lip;
        Ok(nl)
    }

    fn inner(&self, s: f64) -> f64 {
        match &self.reaction {
            Reaction::Fisher => s - s * s,
            Reaction::Closed(f) => f(s),
        }
    }

    pub fn is_fisher(&self) -> bool {
        matches!(self.reaction, Reaction::Fisher)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn fprime0(&self) -> f64 {
        self.fprime0
    }

    pub fn fprime1(&self) -> f64 {
        self.fprime1
    }

    pub fn lipschitz_bound(&self) -> f64 {
        self.lipschitz_bound
    }

    pub fn strong_kpp(&self) -> bool {
        self.strong_kpp
    }

    /// Sampled constants `(c_g, C_g)` with `c_g s^2 <= g(s) <= C_g s^2` on `(0, 1)`.
    pub fn g_bounds(&self) -> (f64, f64) {
        (self.c_g, self.big_c_g)
    }

    /// `f` on the whole line.
    pub fn f(&self, s: f64) -> f64 {
        if s <= 0.0 {
            self.fprime0 * s
        } else if s >= 1.0 {
            self.fprime1 * (s - 1.0)
        } else {
            self.inner(s)
        }
    }

    /// `g(s) = f'(0) s - f(s)`.
    pub fn g(&self, s: f64) -> f64 {
        if s <= 0.0 {
            0.0
        } else if s >= 1.0 {
            self.fprime0 * s - self.fprime1 * (s - 1.0)
        } else {
            match self.reaction {
                Reaction::Fisher => s * s,
                Reaction::Closed(_) => self.fprime0 * s - self.inner(s),
            }
        }
    }

    /// `g(s) / s`, continuous at zero.
    #[inline]
    pub fn g_over_s(&self, s: f64) -> f64 {
        if s <= 0.0 {
            0.0
        } else if s < 1.0 {
            match self.reaction {
                Reaction::Fisher => s,
                Reaction::Closed(_) => self.g(s) / s,
            }
        } else {
            self.g(s) / s
        }
    }

    /// `e^{θ ξ} g(e^{-θ ξ} s)`: the absorption felt by a solution stored with weight `e^{θ ξ}`.
    pub fn r_weighted(&self, theta: f64, xi: f64, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        let a = theta * xi;
        if a > EXP_CAP {
            self.big_c_g * (2.0 * s.ln() - a).exp()
        } else if a < -EXP_CAP {
            (self.fprime0 - self.fprime1) * s
        } else {
            s * self.g_over_s((-a).exp() * s)
        }
    }
}

/// `g(s) = f'(0) s - f(s)`.
pub fn residual_g(f: &KppNonlinearity, s: f64) -> f64 {
    f.g(s)
}

/// A wave speed together with its decay rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpeedPair {
    pub c: f64,
    pub lambda: f64,
    pub lambda_star: f64,
    pub c_star: f64,
    pub mu: f64,
    pub fprime0: f64,
}

impl SpeedPair {
    /// The critical pair `(c*, λ*)`.
    pub fn critical(fprime0: f64) -> Self {
        let ls = fprime0.sqrt();
        SpeedPair {
            c: 2.0 * ls,
            lambda: ls,
            lambda_star: ls,
            c_star: 2.0 * ls,
            mu: 0.0,
            fprime0,
        }
    }

    /// The pair with decay rate `λ ∈ (0, λ*]`, i.e. `c = λ + f'(0)/λ`.
    pub fn from_lambda(lambda: f64, fprime0: f64) -> Result<Self> {
        let ls = fprime0.sqrt();
        if !(lambda > 0.0) || lambda > ls * (1.0 + 1e-12) {
            return Err(LabError::Domain(format!(
                "decay rate {lambda} outside (0, {ls}]"
            )));
        }
        let lambda = lambda.min(ls);
        let c = lambda + fprime0 / lambda;
        let mu = (fprime0 / lambda - lambda).max(0.0);
        Ok(SpeedPair {
            c,
            lambda,
            lambda_star: ls,
            c_star: 2.0 * ls,
            mu,
            fprime0,
        })
    }

    pub fn is_critical(&self) -> bool {
        self.mu == 0.0
    }

    /// The larger root of `λ² - cλ + f'(0) = 0`.
    pub fn lambda_fast(&self) -> f64 {
        self.lambda + self.mu
    }
}

/// Smaller root of `λ² - cλ + f'(0) = 0`.
pub fn lambda_of_c(c: f64, fprime0: f64) -> Result<SpeedPair> {
    let ls = fprime0.sqrt();
    let c_star = 2.0 * ls;
    if !(c >= c_star * (1.0 - 1e-12)) {
        return Err(LabError::Domain(format!(
            "speed {c} is below the minimal speed c* = {c_star}"
        )));
    }
    let disc = (c * c - c_star * c_star).max(0.0);
    if disc == 0.0 {
        return Ok(SpeedPair::critical(fprime0));
    }
    let mu = disc.sqrt();
    let lambda = 2.0 * fprime0 / (c + mu);
    Ok(SpeedPair {
        c,
        lambda,
        lambda_star: ls,
        c_star,
        mu,
        fprime0,
    })
}

/// `R(t, x; s) = e^{λ*(x - c* t)} g(e^{-λ*(x - c* t)} s)`.
pub fn r_leading_edge(
    f: &KppNonlinearity,
    lambda_star: f64,
    c_star: f64,
    t: f64,
    x: f64,
    s: f64,
) -> f64 {
    f.r_weighted(lambda_star, x - c_star * t, s)
}

/// Absorption in the supercritical leading-edge frame, weight `e^{λ(x - ct)}`.
pub fn r_bar(f: &KppNonlinearity, pair: &SpeedPair, t: f64, x: f64, s: f64) -> f64 {
    f.r_weighted(pair.lambda, x - pair.c * t, s)
}

/// Absorption in the half-speed frame, weight `e^{(c/2)(x - ct)}`.
pub fn r_hat(f: &KppNonlinearity, pair: &SpeedPair, t: f64, x: f64, s: f64) -> f64 {
    f.r_weighted(0.5 * pair.c, x - pair.c * t, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fisher_residual_is_square() {
        let f = KppNonlinearity::fisher();
        assert!((residual_g(&f, 0.3) - 0.09).abs() < 1e-15);
        assert_eq!(residual_g(&f, 0.0), 0.0);
        assert_eq!(residual_g(&f, -2.0), 0.0);
        let (cg, big) = f.g_bounds();
        assert!((cg - 1.0).abs() < 1e-12 && (big - 1.0).abs() < 1e-12);
        assert!(f.strong_kpp());
    }

    #[test]
    fn cubic_residual_matches_symbolic_derivative() {
        // f(s) = s + (a-1) s^2 - a s^3, so f'(0) = 1 and g(s) = (1-a) s^2 + a s^3.
        let a = 0.2;
        let f = KppNonlinearity::cubic(a).unwrap();
        let s: f64 = 0.5;
        let expected = (1.0 - a) * s * s + a * s.powi(3);
        assert!((residual_g(&f, s) - expected).abs() < 1e-14);
        assert_eq!(expected, 0.225);
    }

    #[test]
    fn rejects_non_kpp() {
        let bistable =
            KppNonlinearity::custom("bistable", |s| s * (1.0 - s) * (s - 0.3), -0.3, -0.7);
        assert!(bistable.is_err());
        let too_steep =
            KppNonlinearity::custom("steep", |s| s * (1.0 - s) * (1.0 + 3.0 * s), 1.0, -4.0);
        assert!(too_steep.is_err());
    }

    #[test]
    fn linear_extension() {
        let f = KppNonlinearity::fisher();
        assert_eq!(f.f(-0.5), -0.5);
        assert!((f.f(1.5) + 0.5).abs() < 1e-15);
        assert!((f.g(1.5) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn lambda_examples() {
        let p = lambda_of_c(2.5, 1.0).unwrap();
        assert!((p.lambda - 0.5).abs() < 1e-15 && (p.mu - 1.5).abs() < 1e-15);
        let p = lambda_of_c(2.0, 1.0).unwrap();
        assert_eq!((p.lambda, p.mu), (1.0, 0.0));
        assert!(p.is_critical());
        let p = lambda_of_c(3.0, 1.0).unwrap();
        assert!((p.lambda - (3.0 - 5f64.sqrt()) / 2.0).abs() < 1e-15);
        assert!((p.lambda - 0.381966).abs() < 1e-6);
        match lambda_of_c(1.9, 1.0) {
            Err(LabError::Domain(msg)) => assert!(msg.contains("c* = 2")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn leading_edge_examples() {
        let f = KppNonlinearity::fisher();
        assert!((r_leading_edge(&f, 1.0, 2.0, 3.0, 6.0, 0.4) - 0.16).abs() < 1e-15);
        assert_eq!(r_leading_edge(&f, 1.0, 2.0, 3.0, 6.0, -1.0), 0.0);
        let r = r_leading_edge(&f, 1.0, 2.0, 1.0, 4.0, 1.0);
        assert!((r - (-2f64).exp()).abs() < 1e-15);
        assert!((r - 0.135335).abs() < 1e-6);
    }

    #[test]
    fn exponent_cap_uses_bound() {
        let f = KppNonlinearity::fisher();
        let r = f.r_weighted(1.0, 710.0, 1e200);
        let expected = (400.0 * 10f64.ln() - 710.0).exp();
        assert!((r / expected - 1.0).abs() < 1e-10);
        assert!(f.r_weighted(1.0, -800.0, 1e-300) >= 0.0);
    }

    #[test]
    fn flat_frames() {
        let f = KppNonlinearity::fisher();
        let p = lambda_of_c(2.5, 1.0).unwrap();
        let s = 0.7;
        assert!((r_bar(&f, &p, 1.0, 2.5, s) - s * s).abs() < 1e-15);
        let rh = r_hat(&f, &p, 0.0, 2.0, s);
        assert!((rh - s * s * (-2.5f64).exp()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn kpp_sandwich(s in 1e-6f64..1.0, a in -1.0f64..1.0) {
            let f = KppNonlinearity::cubic(a).unwrap();
            let fs = f.f(s);
            prop_assert!(fs > 0.0 && fs <= f.fprime0() * s + 1e-12);
            let (cg, big) = f.g_bounds();
            let g = f.g(s);
            prop_assert!(g >= cg * s * s * (1.0 - 1e-9) - 1e-15);
            prop_assert!(g <= big * s * s * (1.0 + 1e-9) + 1e-15);
        }

        #[test]
        fn leading_edge_at_unit_weight(s in -2.0f64..2.0, t in 0.0f64..100.0) {
            let f = KppNonlinearity::fisher();
            let r = r_leading_edge(&f, 1.0, 2.0, t, 2.0 * t, s);
            prop_assert!((r - f.g(s)).abs() <= 1e-12 * (1.0 + f.g(s)));
        }

        #[test]
        fn lambda_round_trip(lambda in 1e-3f64..=1.0, f0 in 0.25f64..4.0) {
            let lam = lambda * f0.sqrt();
            let c = lam + f0 / lam;
            let p = lambda_of_c(c, f0).unwrap();
            prop_assert!((p.lambda - lam).abs() <= 1e-12 * lam.max(1.0) * 10.0);
            prop_assert!((p.lambda * p.lambda - c * p.lambda + f0).abs() < 1e-9 * c * c);
            prop_assert!((2.0 * p.lambda + p.mu - c).abs() < 1e-9 * c);
        }

        #[test]
        fn absorption_nonnegative(theta in 0.0f64..2.0, xi in -500.0f64..500.0, s in -1.0f64..1e3) {
            let f = KppNonlinearity::fisher();
            prop_assert!(f.r_weighted(theta, xi, s) >= 0.0);
        }
    }
}
