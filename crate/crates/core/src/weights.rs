//! Carleman weights `phi(t, x) = theta(t) beta(x)` and their time-regularized
//! variants, plus the time-weight inequality check.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coeff::DiffusionCoefficient;
use crate::error::{Error, Result};

/// Open interval `(lo, hi)` inside `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::Interval(format!(
                "({lo}, {hi}) is not a subinterval of [0, 1]"
            )));
        }
        Ok(Interval { lo, hi })
    }

    pub fn contains(&self, x: f64) -> bool {
        x > self.lo && x < self.hi
    }

    /// Closure of `self` lies in the open interval `other`.
    pub fn inside(&self, other: &Interval) -> bool {
        self.lo > other.lo && self.hi < other.hi
    }

    pub fn len(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Shape of the time weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "eps", rename_all = "snake_case")]
pub enum ThetaVariant {
    /// `1 / (t^4 (T - t)^4)`, singular at both ends.
    Standard,
    /// `(2/T)^8` on `[0, T/2]`, standard afterwards.
    Bar,
    /// `(T/2 + eps)^{-8}` on `[0, T/2]`, `1 / ((t+eps)^4 (T-t+eps)^4)` afterwards.
    BarEps(f64),
}

/// Time weight `theta(t)` of a given variant on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeWeight {
    horizon: f64,
    variant: ThetaVariant,
    cap: Option<f64>,
}

impl TimeWeight {
    pub fn new(horizon: f64, variant: ThetaVariant) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Parameter(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if let ThetaVariant::BarEps(eps) = variant {
            if !(eps > 0.0) {
                return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
            }
        }
        Ok(TimeWeight {
            horizon,
            variant,
            cap: None,
        })
    }

    /// Clamp `theta` from above (guards `e^{2 s phi}` overflow).
    pub fn with_cap(mut self, cap: f64) -> Self {
        self.cap = Some(cap);
        self
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn variant(&self) -> ThetaVariant {
        self.variant
    }

    /// `(p, p')` with `p = (t + e)(T - t + e)`, or `None` on the flat part.
    fn product(&self, t: f64) -> Result<Option<(f64, f64)>> {
        let big_t = self.horizon;
        if !(0.0..=big_t).contains(&t) {
            return Err(Error::Parameter(format!(
                "t = {t} lies outside [0, {big_t}]"
            )));
        }
        let e = match self.variant {
            ThetaVariant::Standard => {
                if t <= 0.0 || t >= big_t {
                    return Err(Error::ThetaEndpoint(t));
                }
                0.0
            }
            ThetaVariant::Bar => {
                if t < 0.5 * big_t {
                    return Ok(None);
                }
                if t >= big_t {
                    return Err(Error::ThetaEndpoint(t));
                }
                0.0
            }
            ThetaVariant::BarEps(eps) => {
                if t < 0.5 * big_t {
                    return Ok(None);
                }
                eps
            }
        };
        Ok(Some(((t + e) * (big_t - t + e), big_t - 2.0 * t)))
    }

    fn flat_value(&self) -> f64 {
        match self.variant {
            ThetaVariant::BarEps(eps) => (0.5 * self.horizon + eps).powi(-8),
            _ => (2.0 / self.horizon).powi(8),
        }
    }

    fn capped(&self, t: f64) -> Result<bool> {
        Ok(match self.cap {
            Some(cap) => self.raw_theta(t)? > cap,
            None => false,
        })
    }

    fn raw_theta(&self, t: f64) -> Result<f64> {
        Ok(match self.product(t)? {
            Some((p, _)) => p.powi(-4),
            None => self.flat_value(),
        })
    }

    pub fn theta(&self, t: f64) -> Result<f64> {
        let raw = self.raw_theta(t)?;
        Ok(match self.cap {
            Some(cap) => raw.min(cap),
            None => raw,
        })
    }

    pub fn theta_dot(&self, t: f64) -> Result<f64> {
        if self.capped(t)? {
            return Ok(0.0);
        }
        Ok(match self.product(t)? {
            Some((p, dp)) => -4.0 * dp * p.powi(-5),
            None => 0.0,
        })
    }

    pub fn theta_ddot(&self, t: f64) -> Result<f64> {
        if self.capped(t)? {
            return Ok(0.0);
        }
        Ok(match self.product(t)? {
            Some((p, dp)) => 20.0 * dp * dp * p.powi(-6) + 8.0 * p.powi(-5),
            None => 0.0,
        })
    }
}

/// Direction of the equation the drift factor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// `A = s phi_t - s^2 a phi_x^2`.
    Forward,
    /// `A = s phi_t + s^2 a phi_x^2`.
    Backward,
}

/// All ingredients of the spatial weight `beta` and the time weight `theta`.
#[derive(Debug, Clone)]
pub struct WeightSystem {
    coef: DiffusionCoefficient,
    time: TimeWeight,
    omega: Interval,
    omega1: Interval,
    s: f64,
    d: f64,
    rho_inf: f64,
    integral_total: f64,
}

impl WeightSystem {
    pub fn build(
        coef: &DiffusionCoefficient,
        horizon: f64,
        omega: Interval,
        omega1: Interval,
        s: f64,
        variant: ThetaVariant,
    ) -> Result<Self> {
        if !(omega.lo > 0.0 && omega.hi < 1.0) {
            return Err(Error::Interval(
                "observation region must lie inside (0, 1)".into(),
            ));
        }
        if !omega1.inside(&omega) {
            return Err(Error::Interval(format!(
                "inner interval ({}, {}) must lie strictly inside ({}, {})",
                omega1.lo, omega1.hi, omega.lo, omega.hi
            )));
        }
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::Parameter(format!("s must be positive, got {s}")));
        }
        let time = TimeWeight::new(horizon, variant)?;
        let integral_total = coef.integral_v_over_a(1.0);
        if !integral_total.is_finite() {
            return Err(Error::Quadrature("integral of v / a(v) diverges".into()));
        }
        Ok(WeightSystem {
            coef: coef.clone(),
            time,
            omega,
            omega1,
            s,
            d: integral_total + 1.0,
            rho_inf: integral_total,
            integral_total,
        })
    }

    pub fn with_s(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.s = s;
        out
    }

    pub fn with_variant(&self, variant: ThetaVariant) -> Result<Self> {
        let mut out = self.clone();
        out.time = TimeWeight::new(self.time.horizon, variant)?;
        Ok(out)
    }

    pub fn with_theta_cap(&self, cap: f64) -> Self {
        let mut out = self.clone();
        out.time = out.time.with_cap(cap);
        out
    }

    pub fn coefficient(&self) -> &DiffusionCoefficient {
        &self.coef
    }
    pub fn time_weight(&self) -> &TimeWeight {
        &self.time
    }
    pub fn horizon(&self) -> f64 {
        self.time.horizon
    }
    pub fn omega(&self) -> Interval {
        self.omega
    }
    pub fn omega1(&self) -> Interval {
        self.omega1
    }
    pub fn s(&self) -> f64 {
        self.s
    }
    pub fn d(&self) -> f64 {
        self.d
    }
    pub fn rho_inf(&self) -> f64 {
        self.rho_inf
    }

    /// Cut-off equal to 1 on `[0, a1]`, 0 on `[b1, 1]`, quintic in between.
    pub fn xi(&self, x: f64) -> f64 {
        let (a1, b1) = (self.omega1.lo, self.omega1.hi);
        if x <= a1 {
            1.0
        } else if x >= b1 {
            0.0
        } else {
            let u = (x - a1) / (b1 - a1);
            1.0 - u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
        }
    }

    pub fn xi_dx(&self, x: f64) -> f64 {
        let (a1, b1) = (self.omega1.lo, self.omega1.hi);
        if x <= a1 || x >= b1 {
            0.0
        } else {
            let u = (x - a1) / (b1 - a1);
            -30.0 * u * u * (1.0 - u) * (1.0 - u) / (b1 - a1)
        }
    }

    /// `rho(x) = \int_x^1 v / a(v) dv`.
    pub fn rho(&self, x: f64) -> f64 {
        self.integral_total - self.coef.integral_v_over_a(x)
    }

    /// `psi(x) = e^{2 |rho|_inf} - e^{rho(x)}`.
    pub fn psi(&self, x: f64) -> f64 {
        (2.0 * self.rho_inf).exp() - self.rho(x).exp()
    }

    pub fn psi_dx(&self, x: f64) -> f64 {
        self.coef.x_over_a(x) * self.rho(x).exp()
    }

    /// `d - \int_0^x v / a(v) dv`.
    pub fn phi_loc(&self, x: f64) -> f64 {
        self.d - self.coef.integral_v_over_a(x)
    }

    pub fn phi_loc_dx(&self, x: f64) -> f64 {
        -self.coef.x_over_a(x)
    }

    pub fn beta(&self, x: f64) -> f64 {
        let xi = self.xi(x);
        if xi == 1.0 {
            self.phi_loc(x)
        } else if xi == 0.0 {
            self.psi(x)
        } else {
            xi * self.phi_loc(x) + (1.0 - xi) * self.psi(x)
        }
    }

    pub fn beta_dx(&self, x: f64) -> f64 {
        if x <= self.omega1.lo {
            return self.phi_loc_dx(x);
        }
        if x >= self.omega1.hi {
            return self.psi_dx(x);
        }
        let xi = self.xi(x);
        self.xi_dx(x) * (self.phi_loc(x) - self.psi(x))
            + xi * self.phi_loc_dx(x)
            + (1.0 - xi) * self.psi_dx(x)
    }

    /// `a(x) beta'(x)^2`, equal to `x^2 / a` on `[0, a1]`.
    pub fn a_beta_dx_sq(&self, x: f64) -> f64 {
        if x <= self.omega1.lo {
            return self.coef.x2_over_a(x);
        }
        let db = self.beta_dx(x);
        self.coef.a(x) * db * db
    }

    pub fn theta(&self, t: f64) -> Result<f64> {
        self.time.theta(t)
    }

    pub fn phi(&self, t: f64, x: f64) -> Result<f64> {
        Ok(self.time.theta(t)? * self.beta(x))
    }

    pub fn phi_x(&self, t: f64, x: f64) -> Result<f64> {
        Ok(self.time.theta(t)? * self.beta_dx(x))
    }

    pub fn phi_t(&self, t: f64, x: f64) -> Result<f64> {
        Ok(self.time.theta_dot(t)? * self.beta(x))
    }

    /// `A(t, x)` for the given direction with the system's `s`.
    pub fn drift_factor(&self, direction: Direction, t: f64, x: f64) -> Result<f64> {
        let theta = self.time.theta(t)?;
        let first = self.s * self.time.theta_dot(t)? * self.beta(x);
        let second = self.s * self.s * theta * theta * self.a_beta_dx_sq(x);
        Ok(match direction {
            Direction::Forward => first - second,
            Direction::Backward => first + second,
        })
    }

    /// Drift factor sampled on `times x nodes` (row-major by time).
    pub fn drift_factor_grid(
        &self,
        direction: Direction,
        times: &[f64],
        nodes: &[f64],
    ) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(times.len() * nodes.len());
        for &t in times {
            for &x in nodes {
                out.push(self.drift_factor(direction, t, x)?);
            }
        }
        Ok(out)
    }

    /// Write `t, x, theta, beta, phi, exp(-2 s phi)` for every pair.
    pub fn write_profiles(&self, times: &[f64], nodes: &[f64], path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "x", "theta", "beta", "phi", "exp_neg_2s_phi"])?;
        for &t in times {
            let theta = self.theta(t)?;
            for &x in nodes {
                let beta = self.beta(x);
                let phi = theta * beta;
                w.write_record(&[
                    format!("{t:.12e}"),
                    format!("{x:.12e}"),
                    format!("{theta:.12e}"),
                    format!("{beta:.12e}"),
                    format!("{phi:.12e}"),
                    format!("{:.12e}", (-2.0 * self.s * phi).exp()),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// The constants of the five time-weight inequalities for horizon `T`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ThetaConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
}

impl ThetaConstants {
    pub fn for_horizon(horizon: f64) -> Self {
        let h = 0.5 * horizon;
        ThetaConstants {
            c1: (2.0 / horizon).powi(8),
            c2: 8.0 * h.powi(7),
            c3: 80.0 * h.powi(14),
            c4: horizon.powi(3),
            c5: 80.0 * h.powi(6),
        }
    }
}

/// Maximum of `(lhs - rhs) / rhs` per inequality, and where it occurs.
#[derive(Debug, Clone, Serialize)]
pub struct ThetaBoundsReport {
    pub horizon: f64,
    pub samples: usize,
    pub constants: ThetaConstants,
    pub labels: [&'static str; 5],
    pub residuals: [f64; 5],
    pub argmax: [f64; 5],
}

impl ThetaBoundsReport {
    pub fn all_hold(&self, tol: f64) -> bool {
        self.residuals.iter().all(|&r| r <= tol)
    }
}

/// Check `theta >= c1`, `|theta'| <= c2 theta^2`, `|theta''| <= c3 theta^3`,
/// `|theta'| <= c4 theta^{3/2}` and `|theta''| <= c5 theta^2` on
/// `samples` midpoint times in `(0, T)`.
///
/// Each ratio `lhs / rhs` is formed in terms of `p = t (T - t)` so that no
/// power of `theta` is evaluated near the endpoints.
pub fn verify_theta_bounds(horizon: f64, samples: usize) -> Result<ThetaBoundsReport> {
    if samples < 2 {
        return Err(Error::Parameter("need at least two sample times".into()));
    }
    if !(horizon > 0.0) {
        return Err(Error::Parameter("horizon must be positive".into()));
    }
    let c = ThetaConstants::for_horizon(horizon);
    let mut residuals = [f64::NEG_INFINITY; 5];
    let mut argmax = [0.0; 5];
    for i in 0..samples {
        let t = horizon * (i as f64 + 0.5) / samples as f64;
        let p = t * (horizon - t);
        let dp = horizon - 2.0 * t;
        let ddot = 8.0 * p.powi(7) + 20.0 * dp * dp * p.powi(6);
        let ratios = [
            c.c1 * p.powi(4),
            4.0 * dp.abs() * p.powi(3) / c.c2,
            ddot / c.c3,
            4.0 * dp.abs() * p / c.c4,
            (8.0 * p.powi(3) + 20.0 * dp * dp * p * p) / c.c5,
        ];
        for k in 0..5 {
            let r = ratios[k] - 1.0;
            if r > residuals[k] {
                residuals[k] = r;
                argmax[k] = t;
            }
        }
    }
    Ok(ThetaBoundsReport {
        horizon,
        samples,
        constants: c,
        labels: [
            "theta >= c1",
            "|theta'| <= c2 theta^2",
            "|theta''| <= c3 theta^3",
            "|theta'| <= c4 theta^(3/2)",
            "|theta''| <= c5 theta^2",
        ],
        residuals,
        argmax,
    })
}
