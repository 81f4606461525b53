//! Degenerate diffusion coefficients `a(x)` on `[0, 1]` and the checks that
//! classify them as weakly or strongly degenerate at `x = 0`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature;

/// Absolute slack allowed on `x a'(x) - K a(x) <= 0`.
pub const DEGENERACY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DegeneracyClass {
    /// `a(0) > 0`: ordinary uniformly parabolic problem.
    NonDegenerate,
    /// `0 <= K < 1`, Dirichlet condition at `x = 0`.
    Weak,
    /// `1 <= K < 2`, flux-free condition `(a u_x)(0) = 0`.
    Strong,
}

impl DegeneracyClass {
    pub fn label(self) -> &'static str {
        match self {
            DegeneracyClass::NonDegenerate => "NonDegenerate",
            DegeneracyClass::Weak => "WD",
            DegeneracyClass::Strong => "SD",
        }
    }
}

/// Sampled coefficient with explicit derivative samples, linearly interpolated.
#[derive(Debug, Clone)]
pub struct Table {
    x: Vec<f64>,
    a: Vec<f64>,
    da: Vec<f64>,
    /// `cumulative[i] = \int_0^{x_i} v / a(v) dv`.
    cumulative: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum CoefficientKind {
    PowerLaw { alpha: f64 },
    Tabulated(Table),
}

#[derive(Debug, Clone)]
pub struct DiffusionCoefficient {
    kind: CoefficientKind,
    k: f64,
    class: DegeneracyClass,
    mono_exponent: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub class: DegeneracyClass,
    /// Smallest `K` with `x a' <= K a` on the probe grid.
    pub k: f64,
    /// Exponent `g` for which `a(x) / x^g` is nondecreasing near 0 (strong case only).
    pub mono_exponent: Option<f64>,
    /// Largest value of `x a' - K a` over the probes (should be <= 0 up to rounding).
    pub max_violation: f64,
    /// Whether `x^2 / a(x)` is nondecreasing on the probes.
    pub x2_over_a_monotone: bool,
    pub probe_count: usize,
}

/// `count` points log-spaced in `[1e-8, 1]`, clustered toward 0.
pub fn default_probe_grid(count: usize) -> Vec<f64> {
    let count = count.max(2);
    let lo = 1e-8f64.ln();
    (0..count)
        .map(|i| (lo * (1.0 - i as f64 / (count - 1) as f64)).exp())
        .collect()
}

impl DiffusionCoefficient {
    /// `a(x) = x^alpha`. `alpha = 0` gives the nondegenerate coefficient `a = 1`.
    pub fn power_law(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::InvalidCoefficient(format!(
                "power-law exponent must be a nonnegative real, got {alpha}"
            )));
        }
        if alpha >= 2.0 - DEGENERACY_TOL {
            return Err(Error::DegeneracyTooStrong { k: alpha });
        }
        let class = classify(alpha, if alpha == 0.0 { 1.0 } else { 0.0 });
        let mut coef = DiffusionCoefficient {
            kind: CoefficientKind::PowerLaw { alpha },
            k: alpha,
            class,
            mono_exponent: None,
        };
        if class == DegeneracyClass::Strong {
            coef.mono_exponent = coef.scan_mono_exponent(&default_probe_grid(10_000));
        }
        Ok(coef)
    }

    /// Build from samples `(x_i, a_i, a'_i)`. The first sample must be `x = 0`
    /// and the last `x = 1`.
    pub fn tabulated(x: Vec<f64>, a: Vec<f64>, da: Vec<f64>) -> Result<Self> {
        let n = x.len();
        if n < 2 || a.len() != n || da.len() != n {
            return Err(Error::InvalidCoefficient(
                "tabulated coefficient needs at least two rows of equal length".into(),
            ));
        }
        if x[0] != 0.0 || (x[n - 1] - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidCoefficient(
                "tabulated abscissae must start at 0 and end at 1".into(),
            ));
        }
        if x.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidCoefficient(
                "tabulated abscissae must be strictly increasing".into(),
            ));
        }
        if a.iter().chain(da.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidCoefficient(
                "tabulated values must be finite".into(),
            ));
        }
        if a[0] < 0.0 {
            return Err(Error::NonPositive {
                x: 0.0,
                value: a[0],
            });
        }
        for i in 1..n {
            if a[i] <= 0.0 {
                return Err(Error::NonPositive {
                    x: x[i],
                    value: a[i],
                });
            }
        }
        let mut x = x;
        x[n - 1] = 1.0;
        let mut table = Table {
            x,
            a,
            da,
            cumulative: vec![0.0; n],
        };
        for i in 1..n {
            let cell = table.cell_integral(i - 1, table.x[i - 1], table.x[i]);
            table.cumulative[i] = table.cumulative[i - 1] + cell;
        }
        let mut coef = DiffusionCoefficient {
            kind: CoefficientKind::Tabulated(table),
            k: 0.0,
            class: DegeneracyClass::NonDegenerate,
            mono_exponent: None,
        };
        let report = coef.validate_degeneracy(&default_probe_grid(10_000))?;
        coef.k = report.k;
        coef.class = report.class;
        coef.mono_exponent = report.mono_exponent;
        Ok(coef)
    }

    /// Read a headed CSV with columns `x, a, da`.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let (mut x, mut a, mut da) = (Vec::new(), Vec::new(), Vec::new());
        for record in reader.records() {
            let record = record?;
            let mut vals = [0.0; 3];
            for (j, v) in vals.iter_mut().enumerate() {
                let field = record.get(j).ok_or_else(|| {
                    Error::InvalidCoefficient("coefficient CSV rows need three columns".into())
                })?;
                *v = field.trim().parse().map_err(|_| {
                    Error::InvalidCoefficient(format!("cannot parse '{field}' as a number"))
                })?;
            }
            x.push(vals[0]);
            a.push(vals[1]);
            da.push(vals[2]);
        }
        Self::tabulated(x, a, da)
    }

    pub fn kind(&self) -> &CoefficientKind {
        &self.kind
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn class(&self) -> DegeneracyClass {
        self.class
    }

    pub fn mono_exponent(&self) -> Option<f64> {
        self.mono_exponent
    }

    pub fn is_degenerate(&self) -> bool {
        self.class != DegeneracyClass::NonDegenerate
    }

    /// Short human-readable description, e.g. `x^0.5`.
    pub fn describe(&self) -> String {
        match &self.kind {
            CoefficientKind::PowerLaw { alpha } => format!("x^{alpha}"),
            CoefficientKind::Tabulated(t) => format!("tabulated ({} samples)", t.x.len()),
        }
    }

    fn check_domain(x: f64) -> Result<()> {
        if (0.0..=1.0).contains(&x) {
            Ok(())
        } else {
            Err(Error::OutOfDomain(x))
        }
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        Self::check_domain(x)?;
        Ok(self.a(x))
    }

    pub fn eval_derivative(&self, x: f64) -> Result<f64> {
        Self::check_domain(x)?;
        Ok(self.da(x))
    }

    /// Unchecked evaluation for `x` already known to lie in `[0, 1]`.
    pub(crate) fn a(&self, x: f64) -> f64 {
        match &self.kind {
            CoefficientKind::PowerLaw { alpha } => {
                if *alpha == 0.0 {
                    1.0
                } else {
                    x.powf(*alpha)
                }
            }
            CoefficientKind::Tabulated(t) => t.interp(&t.a, x),
        }
    }

    pub(crate) fn da(&self, x: f64) -> f64 {
        match &self.kind {
            CoefficientKind::PowerLaw { alpha } => {
                if *alpha == 0.0 {
                    0.0
                } else if x == 0.0 {
                    if *alpha < 1.0 {
                        f64::INFINITY
                    } else if *alpha == 1.0 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    alpha * x.powf(alpha - 1.0)
                }
            }
            CoefficientKind::Tabulated(t) => t.interp(&t.da, x),
        }
    }

    /// `x / a(x)`, with the limit taken at `x = 0`.
    pub fn x_over_a(&self, x: f64) -> f64 {
        match &self.kind {
            CoefficientKind::PowerLaw { alpha } => {
                if x == 0.0 {
                    if *alpha < 1.0 {
                        0.0
                    } else if *alpha == 1.0 {
                        1.0
                    } else {
                        f64::INFINITY
                    }
                } else {
                    x.powf(1.0 - alpha)
                }
            }
            CoefficientKind::Tabulated(t) => {
                if x == 0.0 {
                    if t.a[0] > 0.0 {
                        0.0
                    } else {
                        t.x[1] / t.a[1]
                    }
                } else {
                    x / t.interp(&t.a, x)
                }
            }
        }
    }

    /// `x^2 / a(x)`, equal to 0 at `x = 0` for every admissible coefficient.
    pub fn x2_over_a(&self, x: f64) -> f64 {
        if x == 0.0 {
            return 0.0;
        }
        match &self.kind {
            CoefficientKind::PowerLaw { alpha } => x.powf(2.0 - alpha),
            CoefficientKind::Tabulated(t) => x * x / t.interp(&t.a, x),
        }
    }

    /// `I(x) = \int_0^x v / a(v) dv`.
    pub fn integral_v_over_a(&self, x: f64) -> f64 {
        match &self.kind {
            CoefficientKind::PowerLaw { alpha } => x.powf(2.0 - alpha) / (2.0 - alpha),
            CoefficientKind::Tabulated(t) => {
                let i = t.cell(x);
                t.cumulative[i] + t.cell_integral(i, t.x[i], x)
            }
        }
    }

    /// Classify the coefficient from samples on `probe_grid`.
    pub fn validate_degeneracy(&self, probe_grid: &[f64]) -> Result<ValidationReport> {
        if probe_grid.is_empty() {
            return Err(Error::Parameter("probe grid is empty".into()));
        }
        if probe_grid.iter().any(|&x| !(x > 0.0 && x <= 1.0)) {
            return Err(Error::Parameter("probe grid must lie in (0, 1]".into()));
        }
        if probe_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Parameter("probe grid must be increasing".into()));
        }
        let mut k = 0.0f64;
        for &x in probe_grid {
            let a = self.a(x);
            if !(a > 0.0) {
                return Err(Error::NonPositive { x, value: a });
            }
            k = k.max(x * self.da(x) / a);
        }
        if let CoefficientKind::PowerLaw { alpha } = self.kind {
            k = alpha;
        }
        if k > 2.0 - DEGENERACY_TOL {
            return Err(Error::DegeneracyTooStrong { k });
        }
        let max_violation = probe_grid
            .iter()
            .map(|&x| x * self.da(x) - k * self.a(x))
            .fold(f64::NEG_INFINITY, f64::max);
        let class = classify(k, self.a(0.0));
        let mono_exponent = if class == DegeneracyClass::Strong {
            let scratch = DiffusionCoefficient {
                kind: self.kind.clone(),
                k,
                class,
                mono_exponent: None,
            };
            scratch.scan_mono_exponent(probe_grid)
        } else {
            None
        };
        let x2_over_a_monotone = probe_grid.windows(2).all(|w| {
            let (p, q) = (self.x2_over_a(w[0]), self.x2_over_a(w[1]));
            q >= p * (1.0 - 1e-12)
        });
        Ok(ValidationReport {
            class,
            k,
            mono_exponent,
            max_violation,
            x2_over_a_monotone,
            probe_count: probe_grid.len(),
        })
    }

    /// Largest candidate exponent `g` for which `a(x) / x^g` is nondecreasing
    /// on the probes with `x <= 0.1`.
    fn scan_mono_exponent(&self, probe_grid: &[f64]) -> Option<f64> {
        let near: Vec<f64> = probe_grid.iter().copied().filter(|&x| x <= 0.1).collect();
        if near.len() < 2 {
            return None;
        }
        let candidates: Vec<f64> = if (self.k - 1.0).abs() <= DEGENERACY_TOL {
            (1..100).rev().map(|j| j as f64 / 100.0).collect()
        } else {
            (1..=100)
                .rev()
                .map(|j| 1.0 + j as f64 / 100.0 * (self.k - 1.0))
                .collect()
        };
        candidates.into_iter().find(|&g| {
            near.windows(2).all(|w| {
                let r0 = self.a(w[0]) / w[0].powf(g);
                let r1 = self.a(w[1]) / w[1].powf(g);
                r1 >= r0 * (1.0 - 1e-12)
            })
        })
    }
}

fn classify(k: f64, a0: f64) -> DegeneracyClass {
    if a0 > 0.0 {
        DegeneracyClass::NonDegenerate
    } else if k < 1.0 - DEGENERACY_TOL {
        DegeneracyClass::Weak
    } else {
        DegeneracyClass::Strong
    }
}

impl Table {
    /// Index `i` of the cell `[x_i, x_{i+1}]` containing `x`.
    fn cell(&self, x: f64) -> usize {
        let n = self.x.len();
        match self.x.binary_search_by(|p| p.partial_cmp(&x).unwrap()) {
            Ok(i) => i.min(n - 2),
            Err(i) => i.saturating_sub(1).min(n - 2),
        }
    }

    fn interp(&self, values: &[f64], x: f64) -> f64 {
        let i = self.cell(x);
        let (x0, x1) = (self.x[i], self.x[i + 1]);
        let t = (x - x0) / (x1 - x0);
        values[i] + t * (values[i + 1] - values[i])
    }

    /// `\int_lo^hi v / a(v) dv` inside cell `i`. When `a` vanishes at the left
    /// end of the first cell, the linear interpolant makes `v / a` constant.
    fn cell_integral(&self, i: usize, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return 0.0;
        }
        if i == 0 && self.a[0] == 0.0 {
            return (hi - lo) * self.x[1] / self.a[1];
        }
        quadrature::integrate(|v| v / self.interp(&self.a, v), lo, hi)
    }
}
