//! Empirical verification of the weighted energy inequalities.
//!
//! Every verifier reduces an ensemble of discrete solutions to per-level
//! second-moment profiles: `E[y_i^2]`, `E[y_i y_{i+1}]` and the cellwise
//! `E[y_x^2]`. Weighted space-time integrals are then evaluated by Gauss
//! quadrature of the analytic weights against the piecewise linear
//! interpolant of the discrete solution (eight points per cell and per time
//! step). Exponential weights are taken relative to their largest value over
//! the quadrature points, so both sides of an inequality carry a common
//! factor `e^{log_scale}` that cancels in the ratio; reported sides are
//! natural logarithms.

use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{AdaptedField, Filtration, RecombiningLattice};
use crate::quadrature::gauss_legendre_8;
use crate::random::{ModeSeries, TrigField};
use crate::setup::Setup;
use crate::solvers::{
    BackwardProblem, BackwardSolution, ForwardProblem, Source, StepField, Terminal,
};
use crate::spacegrid::{BoundaryRegime, DegenerateOperator};
use crate::weights::{Direction, Interval, ThetaVariant, WeightSystem};

/// How the random ensemble is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub size: usize,
    pub seed: u64,
    /// Number of eigenfunction modes in random initial / terminal data.
    pub modes: usize,
    /// Bound on `sup |b|`.
    pub b_bound: f64,
    /// Bound on `sup |c|`.
    pub c_bound: f64,
    pub time_modes: usize,
    pub space_modes: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            size: 20,
            seed: 0,
            modes: 8,
            b_bound: 1.0,
            c_bound: 1.0,
            time_modes: 3,
            space_modes: 3,
        }
    }
}

/// Data of one forward ensemble member: `y0`, and coefficients `b`, `c`
/// frozen for the whole run.
#[derive(Debug, Clone, Serialize)]
pub struct Sample {
    pub y0: ModeSeries,
    pub b: TrigField,
    pub c: TrigField,
}

/// Data of one backward ensemble member: terminal value
/// `p0(x) + (W_T / sqrt T) p1(x)` and source `f0 + (W_t / sqrt T) f1`.
#[derive(Debug, Clone, Serialize)]
pub struct BackwardSample {
    pub p0: ModeSeries,
    pub p1: ModeSeries,
    pub f0: TrigField,
    pub f1: TrigField,
}

pub fn draw_ensemble(cfg: &EnsembleConfig, horizon: f64, bc: BoundaryRegime) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.size)
        .map(|_| {
            let y0 = ModeSeries::random(&mut rng, cfg.modes, bc);
            let b = TrigField::random(
                &mut rng,
                horizon,
                cfg.time_modes,
                cfg.space_modes,
                cfg.b_bound,
            );
            let c = TrigField::random(
                &mut rng,
                horizon,
                cfg.time_modes,
                cfg.space_modes,
                cfg.c_bound,
            );
            Sample { y0, b, c }
        })
        .collect()
}

/// Backward ensemble; `source_bound` bounds `sup |f0| + sup |f1|`.
pub fn draw_backward_ensemble(
    cfg: &EnsembleConfig,
    horizon: f64,
    bc: BoundaryRegime,
    source_bound: f64,
    random_terminal: bool,
) -> Vec<BackwardSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.size)
        .map(|_| {
            let p0 = ModeSeries::random(&mut rng, cfg.modes, bc);
            let p1 = ModeSeries::random(&mut rng, cfg.modes, bc);
            let f0 = TrigField::random(
                &mut rng,
                horizon,
                cfg.time_modes,
                cfg.space_modes,
                0.5 * source_bound,
            );
            let f1 = TrigField::random(
                &mut rng,
                horizon,
                cfg.time_modes,
                cfg.space_modes,
                0.5 * source_bound,
            );
            if random_terminal {
                BackwardSample { p0, p1, f0, f1 }
            } else {
                BackwardSample {
                    p0,
                    p1: p1.scaled(0.0),
                    f0,
                    f1: TrigField::zero(horizon),
                }
            }
        })
        .collect()
}

/// How forward second moments are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Enumerate all `2^N` tree nodes.
    Tree,
    /// Propagate mean and second-moment matrix (same numbers, `O(N M^2)`).
    Moments,
}

/// Second moments of one time level: `E[y_i^2]`, `E[y_c y_{c+1}]` and
/// `E[((y_{c+1} - y_c) / h_c)^2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelProfile {
    pub node_sq: Vec<f64>,
    pub cross: Vec<f64>,
    pub grad_sq: Vec<f64>,
}

impl LevelProfile {
    pub fn zero(m: usize) -> Self {
        LevelProfile {
            node_sq: vec![0.0; m],
            cross: vec![0.0; m - 1],
            grad_sq: vec![0.0; m - 1],
        }
    }

    fn with_gradients(op: &DegenerateOperator, node_sq: Vec<f64>, cross: Vec<f64>) -> Self {
        let grid = op.grid();
        let grad_sq = (0..cross.len())
            .map(|c| {
                let h = grid.width(c);
                ((node_sq[c + 1] + node_sq[c] - 2.0 * cross[c]) / (h * h)).max(0.0)
            })
            .collect();
        LevelProfile {
            node_sq,
            cross,
            grad_sq,
        }
    }

    pub fn from_second_moment(op: &DegenerateOperator, r: &DMatrix<f64>) -> Self {
        let m = op.len();
        let node_sq = (0..m).map(|i| r[(i, i)].max(0.0)).collect();
        let cross = (0..m - 1).map(|c| r[(c, c + 1)]).collect();
        Self::with_gradients(op, node_sq, cross)
    }

    /// Expectation over the nodes of one level of an adapted field.
    pub fn from_level<F: Filtration + ?Sized>(
        op: &DegenerateOperator,
        filtration: &F,
        level: usize,
        values: &[f64],
    ) -> Self {
        let m = op.len();
        let mut node_sq = vec![0.0; m];
        let mut cross = vec![0.0; m - 1];
        for (j, v) in values.chunks(m).enumerate() {
            let p = filtration.probability(level, j);
            for i in 0..m {
                node_sq[i] += p * v[i] * v[i];
            }
            for c in 0..m - 1 {
                cross[c] += p * v[c] * v[c + 1];
            }
        }
        Self::with_gradients(op, node_sq, cross)
    }

    pub fn from_vector(op: &DegenerateOperator, v: &[f64]) -> Self {
        let node_sq = v.iter().map(|x| x * x).collect();
        let cross = v.windows(2).map(|w| w[0] * w[1]).collect();
        Self::with_gradients(op, node_sq, cross)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let sc = |v: &Vec<f64>| v.iter().map(|x| x * factor).collect();
        LevelProfile {
            node_sq: sc(&self.node_sq),
            cross: sc(&self.cross),
            grad_sq: sc(&self.grad_sq),
        }
    }
}

/// Exponent sign of the weight `e^{sign 2 s phi}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSign {
    Negative,
    Positive,
}

impl WeightSign {
    fn factor(self) -> f64 {
        match self {
            WeightSign::Negative => -1.0,
            WeightSign::Positive => 1.0,
        }
    }
}

const CELL_POINTS: usize = 8;

/// Eight Gauss points in every cell, with the barycentric coordinate
/// `lambda` of each point and weights that include the cell width.
struct CellRule {
    x: Vec<f64>,
    w: Vec<f64>,
    lambda: Vec<f64>,
    cells: usize,
}

impl CellRule {
    fn new(op: &DegenerateOperator) -> Self {
        let grid = op.grid();
        let cells = op.len() - 1;
        let mut x = Vec::with_capacity(cells * CELL_POINTS);
        let mut w = Vec::with_capacity(cells * CELL_POINTS);
        let mut lambda = Vec::with_capacity(cells * CELL_POINTS);
        for c in 0..cells {
            let (lo, hi) = (grid.nodes()[c], grid.nodes()[c + 1]);
            for (xq, wq) in gauss_legendre_8(lo, hi) {
                x.push(xq);
                w.push(wq);
                lambda.push((xq - lo) / (hi - lo));
            }
        }
        CellRule {
            x,
            w,
            lambda,
            cells,
        }
    }

    fn eval(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.x.iter().map(|&x| f(x)).collect()
    }

    fn mask(&self, region: &Interval) -> Vec<f64> {
        self.eval(|x| if region.contains(x) { 1.0 } else { 0.0 })
    }

    /// `∫ f e E[y^2]` with `y` the linear interpolant of the nodal values.
    fn square(&self, f: &[f64], e: &[f64], p: &LevelProfile) -> f64 {
        let mut acc = 0.0;
        for c in 0..self.cells {
            let (r0, r1, x01) = (p.node_sq[c], p.node_sq[c + 1], p.cross[c]);
            if r0 == 0.0 && r1 == 0.0 {
                continue;
            }
            for q in c * CELL_POINTS..(c + 1) * CELL_POINTS {
                let l = self.lambda[q];
                let sq = (1.0 - l) * (1.0 - l) * r0 + 2.0 * l * (1.0 - l) * x01 + l * l * r1;
                acc += self.w[q] * f[q] * e[q] * sq;
            }
        }
        acc
    }

    /// `∫ f e E[y_x^2]` with the cellwise constant discrete gradient.
    fn gradient(&self, f: &[f64], e: &[f64], p: &LevelProfile) -> f64 {
        let mut acc = 0.0;
        for c in 0..self.cells {
            let g = p.grad_sq[c];
            if g == 0.0 {
                continue;
            }
            let mut cell = 0.0;
            for q in c * CELL_POINTS..(c + 1) * CELL_POINTS {
                cell += self.w[q] * f[q] * e[q];
            }
            acc += g * cell;
        }
        acc
    }
}

/// Step averages of `(s theta)^k e^{sign 2 s theta beta(x) - log_scale}`,
/// `k = 0..=3`, at the spatial quadrature points, with eight Gauss points
/// per time step.
struct WeightGrid {
    s: f64,
    sign: f64,
    log_scale: f64,
    beta: Vec<f64>,
    avg: [Vec<Vec<f64>>; 4],
    /// As `avg`, weighted by the position `tau in [0, 1]` within the step;
    /// pairs with the right-hand level of a profile interpolated in time.
    late: [Vec<Vec<f64>>; 4],
}

impl WeightGrid {
    fn new(
        ws: &WeightSystem,
        rule: &CellRule,
        dt: f64,
        steps: usize,
        sign: WeightSign,
    ) -> Result<Self> {
        Self::build(ws, rule, dt, steps, sign, None)
    }

    /// As [`WeightGrid::new`], with the scale taken only over points where
    /// `relevant` is nonzero.
    fn build(
        ws: &WeightSystem,
        rule: &CellRule,
        dt: f64,
        steps: usize,
        sign: WeightSign,
        relevant: Option<&[f64]>,
    ) -> Result<Self> {
        let s = ws.s();
        let beta = rule.eval(|x| ws.beta(x));
        let sg = sign.factor();
        let mut points = Vec::with_capacity(steps);
        for n in 0..steps {
            let mut step = Vec::with_capacity(8);
            for (t, w) in gauss_legendre_8(n as f64 * dt, (n + 1) as f64 * dt) {
                step.push((s * ws.theta(t)?, w / dt, t / dt - n as f64));
            }
            points.push(step);
        }
        let (bmin, bmax) = beta
            .iter()
            .enumerate()
            .filter(|&(q, _)| relevant.is_none_or(|r| r[q] != 0.0))
            .map(|(_, b)| b)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &b| {
                (lo.min(b), hi.max(b))
            });
        let mut log_scale = f64::NEG_INFINITY;
        for &(st, _, _) in points.iter().flatten() {
            log_scale = log_scale
                .max(sg * 2.0 * st * bmin)
                .max(sg * 2.0 * st * bmax);
        }
        if !log_scale.is_finite() {
            return Err(Error::Parameter("weight exponent is not finite".into()));
        }
        let mut avg: [Vec<Vec<f64>>; 4] = Default::default();
        let mut late: [Vec<Vec<f64>>; 4] = Default::default();
        for step in &points {
            let mut acc: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; beta.len()]);
            let mut acc_late = acc.clone();
            for &(st, w, tau) in step {
                for (q, &b) in beta.iter().enumerate() {
                    // Outside the relevant points the scaled weight may overflow.
                    if relevant.is_some_and(|r| r[q] == 0.0) {
                        continue;
                    }
                    let e = w * (sg * 2.0 * st * b - log_scale).exp();
                    let mut term = e;
                    for k in 0..4 {
                        acc[k][q] += term;
                        acc_late[k][q] += tau * term;
                        term *= st;
                    }
                }
            }
            for (k, (a, l)) in acc.into_iter().zip(acc_late).enumerate() {
                avg[k].push(a);
                late[k].push(l);
            }
        }
        Ok(WeightGrid {
            s,
            sign: sg,
            log_scale,
            beta,
            avg,
            late,
        })
    }

    /// `e^{sign 2 s theta beta(x) - log_scale}` at one time.
    fn at_theta(&self, theta: f64) -> Vec<f64> {
        self.beta
            .iter()
            .map(|&b| (self.sign * 2.0 * self.s * theta * b - self.log_scale).exp())
            .collect()
    }
}

/// One `(sample, s)` evaluation. Sides are natural logarithms.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RatioEntry {
    pub sample: usize,
    pub s: f64,
    pub ln_lhs: f64,
    pub ln_rhs: f64,
    pub ratio: f64,
    pub violation: bool,
}

impl RatioEntry {
    fn new(sample: usize, s: f64, ln_lhs: f64, ln_rhs: f64) -> Self {
        let (ratio, violation) = if ln_lhs == f64::NEG_INFINITY {
            (0.0, false)
        } else if ln_rhs == f64::NEG_INFINITY {
            (f64::INFINITY, true)
        } else {
            ((ln_lhs - ln_rhs).exp(), false)
        };
        RatioEntry {
            sample,
            s,
            ln_lhs,
            ln_rhs,
            ratio,
            violation,
        }
    }

    pub fn ln_ratio(&self) -> f64 {
        if self.ln_lhs == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.ln_lhs - self.ln_rhs
        }
    }
}

/// Ratio statistics of one inequality over an ensemble and an `s` sweep.
#[derive(Debug, Clone, Serialize)]
pub struct InequalityReport {
    pub id: String,
    pub s_values: Vec<f64>,
    pub ensemble_size: usize,
    pub entries: Vec<RatioEntry>,
    /// Logarithm of the largest ratio at each `s`.
    pub per_s_ln_max: Vec<f64>,
    pub per_s_max: Vec<f64>,
    pub per_s_mean: Vec<f64>,
    pub max_ratio: f64,
    pub mean_ratio: f64,
    pub violations: usize,
}

impl InequalityReport {
    fn from_entries(
        id: &str,
        s_values: &[f64],
        ensemble_size: usize,
        entries: Vec<RatioEntry>,
    ) -> Self {
        let mut per_s_ln_max = Vec::with_capacity(s_values.len());
        let mut per_s_max = Vec::with_capacity(s_values.len());
        let mut per_s_mean = Vec::with_capacity(s_values.len());
        for (k, _) in s_values.iter().enumerate() {
            let group: Vec<&RatioEntry> = entries
                .iter()
                .skip(k * ensemble_size)
                .take(ensemble_size)
                .collect();
            let ln_max = group
                .iter()
                .map(|e| e.ln_ratio())
                .fold(f64::NEG_INFINITY, f64::max);
            let ln_max = if group.iter().any(|e| e.violation) {
                f64::INFINITY
            } else {
                ln_max
            };
            per_s_ln_max.push(ln_max);
            per_s_max.push(ln_max.exp());
            per_s_mean.push(group.iter().map(|e| e.ratio).sum::<f64>() / group.len().max(1) as f64);
        }
        let max_ratio = per_s_max.iter().copied().fold(0.0, f64::max);
        let mean_ratio = entries.iter().map(|e| e.ratio).sum::<f64>() / entries.len().max(1) as f64;
        let violations = entries.iter().filter(|e| e.violation).count();
        InequalityReport {
            id: id.to_string(),
            s_values: s_values.to_vec(),
            ensemble_size,
            entries,
            per_s_ln_max,
            per_s_max,
            per_s_mean,
            max_ratio,
            mean_ratio,
            violations,
        }
    }

    /// Every ratio is finite and no right-hand side vanished under a positive left side.
    pub fn all_finite(&self) -> bool {
        self.violations == 0
            && self
                .per_s_ln_max
                .iter()
                .all(|v| !v.is_nan() && *v < f64::INFINITY)
    }

    /// Write `sample, s, ln_lhs, ln_rhs, ratio` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["sample", "s", "ln_lhs", "ln_rhs", "ratio"])?;
        for e in &self.entries {
            w.write_record(&[
                e.sample.to_string(),
                format!("{:.12e}", e.s),
                format!("{:.12e}", e.ln_lhs),
                format!("{:.12e}", e.ln_rhs),
                format!("{:.12e}", e.ratio),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Outcome of comparing a report with its rerun at doubled resolution.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GateOutcome {
    pub finite: bool,
    /// Largest `|r_fine / r_coarse - 1|` over the `s` values.
    pub max_relative_change: f64,
    pub stable: bool,
    /// Largest relative increase of the max ratio between consecutive `s`
    /// values of the top decade (<= 0 means non-increasing).
    pub top_decade_increase: f64,
    pub monotone: bool,
    pub passed: bool,
}

/// Relative change of ratios given as logarithms.
fn relative_change(ln_a: f64, ln_b: f64) -> f64 {
    if ln_a == f64::NEG_INFINITY && ln_b == f64::NEG_INFINITY {
        0.0
    } else {
        ((ln_b - ln_a).exp() - 1.0).abs()
    }
}

/// Finite ratios, `<= max_change` relative change under refinement and (when
/// `check_monotone`) a non-increasing max ratio over the top decade of `s`.
pub fn refinement_gate(
    coarse: &InequalityReport,
    fine: &InequalityReport,
    max_change: f64,
    check_monotone: bool,
    monotone_tol: f64,
) -> GateOutcome {
    let finite = coarse.all_finite() && fine.all_finite();
    let max_relative_change = coarse
        .per_s_ln_max
        .iter()
        .zip(&fine.per_s_ln_max)
        .map(|(&a, &b)| relative_change(a, b))
        .fold(0.0, f64::max);
    let stable = finite && max_relative_change <= max_change;
    let top_decade_increase = [coarse, fine]
        .iter()
        .map(|r| top_decade_increase(r))
        .fold(f64::NEG_INFINITY, f64::max);
    let monotone = !check_monotone || top_decade_increase <= monotone_tol;
    GateOutcome {
        finite,
        max_relative_change,
        stable,
        top_decade_increase,
        monotone,
        passed: finite && stable && monotone,
    }
}

fn top_decade_increase(r: &InequalityReport) -> f64 {
    let s_max = r.s_values.iter().copied().fold(0.0, f64::max);
    let idx: Vec<usize> = (0..r.s_values.len())
        .filter(|&k| r.s_values[k] >= s_max / 10.0 * (1.0 - 1e-12))
        .collect();
    idx.windows(2)
        .map(|w| (r.per_s_ln_max[w[1]] - r.per_s_ln_max[w[0]]).exp() - 1.0)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `count` geometrically spaced values from `lo` to `hi`.
pub fn geometric_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    (0..count)
        .map(|k| lo * (hi / lo).powf(k as f64 / (count - 1) as f64))
        .collect()
}

/// Default Carleman parameters: `s theta_min` spans two decades from 1,
/// where `theta_min = (2 / T)^8` is the minimum of the time weight.
pub fn default_s_grid(horizon: f64, count: usize) -> Vec<f64> {
    let scale = (0.5 * horizon).powi(8);
    geometric_grid(scale, 100.0 * scale, count)
}

/// Second-moment profiles of the forward solution at levels `0..=N`.
pub fn forward_profiles(
    setup: &Setup,
    op: &DegenerateOperator,
    sample: &Sample,
    backend: Backend,
) -> Result<Vec<LevelProfile>> {
    let steps = setup.steps();
    let dt = setup.dt();
    let solver = setup.solver(op)?;
    let nodes = op.nodes();
    let b = sample.b.step_field(steps, dt, nodes);
    let c = sample.c.step_field(steps, dt, nodes);
    let y0 = sample.y0.sample(nodes);
    let problem = ForwardProblem {
        b: &b,
        c: &c,
        f: Source::Zero,
        g: Source::Zero,
        y0: &y0,
    };
    match backend {
        Backend::Moments => {
            let mom = solver.forward_moments(steps, &problem)?;
            Ok(mom
                .second
                .iter()
                .map(|r| LevelProfile::from_second_moment(op, r))
                .collect())
        }
        Backend::Tree => {
            let tree = setup.tree()?;
            let y = solver.forward(&tree, &problem)?;
            Ok((0..=steps)
                .map(|n| LevelProfile::from_level(op, &tree, n, y.level(n)))
                .collect())
        }
    }
}

fn ensemble_profiles(
    setup: &Setup,
    op: &DegenerateOperator,
    samples: &[Sample],
    backend: Backend,
) -> Result<Vec<Vec<LevelProfile>>> {
    samples
        .par_iter()
        .map(|s| forward_profiles(setup, op, s, backend))
        .collect()
}

/// Quadrature and spatial factors shared by all verifiers on one grid.
struct Integrator {
    rule: CellRule,
    ones: Vec<f64>,
    a: Vec<f64>,
    x2_over_a: Vec<f64>,
    dt: f64,
    steps: usize,
}

impl Integrator {
    fn new(setup: &Setup, op: &DegenerateOperator) -> Self {
        let rule = CellRule::new(op);
        let coef = op.coefficient();
        Integrator {
            ones: vec![1.0; rule.x.len()],
            a: rule.eval(|x| coef.a(x)),
            x2_over_a: rule.eval(|x| coef.x2_over_a(x)),
            rule,
            dt: setup.dt(),
            steps: setup.steps(),
        }
    }

    fn weights(&self, ws: &WeightSystem, s: f64, sign: WeightSign) -> Result<WeightGrid> {
        WeightGrid::new(&ws.with_s(s), &self.rule, self.dt, self.steps, sign)
    }

    /// `∫∫ f (s theta)^k e E[y^2]` with the level profiles interpolated
    /// linearly in time.
    fn state_square(&self, f: &[f64], wg: &WeightGrid, k: usize, prof: &[LevelProfile]) -> f64 {
        self.state_integral(wg, k, prof, |e, p| self.rule.square(f, e, p))
    }

    /// `∫∫ f (s theta)^k e E[y_x^2]`, interpolated in time as above.
    fn state_gradient(&self, f: &[f64], wg: &WeightGrid, k: usize, prof: &[LevelProfile]) -> f64 {
        self.state_integral(wg, k, prof, |e, p| self.rule.gradient(f, e, p))
    }

    fn state_integral(
        &self,
        wg: &WeightGrid,
        k: usize,
        prof: &[LevelProfile],
        form: impl Fn(&[f64], &LevelProfile) -> f64,
    ) -> f64 {
        let mut acc = 0.0;
        let mut early = vec![0.0; self.rule.x.len()];
        for n in 0..self.steps {
            let (avg, late) = (&wg.avg[k][n], &wg.late[k][n]);
            for q in 0..early.len() {
                early[q] = avg[q] - late[q];
            }
            acc += self.dt * (form(&early, &prof[n]) + form(late, &prof[n + 1]));
        }
        acc
    }

    /// Left side `∫∫ s theta a y_x^2 e + ∫∫ s^3 theta^3 (x^2/a) y^2 e` and the
    /// observation term `∫∫_omega s^3 theta^3 y^2 e`.
    fn carleman_sides(&self, wg: &WeightGrid, omega: &[f64], prof: &[LevelProfile]) -> (f64, f64) {
        let lhs = self.state_gradient(&self.a, wg, 1, prof)
            + self.state_square(&self.x2_over_a, wg, 3, prof);
        (lhs, self.state_square(omega, wg, 3, prof))
    }
}

fn ln(v: f64) -> f64 {
    if v > 0.0 {
        v.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Global Carleman inequality for the forward equation:
/// `E∫∫ s a theta y_x^2 e^{-2s phi} + E∫∫ s^3 theta^3 (x^2/a) y^2 e^{-2s phi}`
/// against `E∫∫_omega s^3 theta^3 y^2 e^{-2s phi}`.
pub fn verify_carleman_forward(
    setup: &Setup,
    ws: &WeightSystem,
    samples: &[Sample],
    s_values: &[f64],
    backend: Backend,
) -> Result<InequalityReport> {
    let op = setup.operator()?;
    let profiles = ensemble_profiles(setup, &op, samples, backend)?;
    carleman_from_profiles("carleman_forward", setup, &op, ws, &profiles, s_values)
}

/// Evaluate the forward Carleman sides from precomputed profiles, linear in
/// time between consecutive levels.
pub fn carleman_from_profiles(
    id: &str,
    setup: &Setup,
    op: &DegenerateOperator,
    ws: &WeightSystem,
    profiles: &[Vec<LevelProfile>],
    s_values: &[f64],
) -> Result<InequalityReport> {
    let int = Integrator::new(setup, op);
    let omega = int.rule.mask(&ws.omega());
    let mut entries = Vec::with_capacity(s_values.len() * profiles.len());
    for &s in s_values {
        let wg = int.weights(ws, s, WeightSign::Negative)?;
        for (k, prof) in profiles.iter().enumerate() {
            let (lhs, rhs) = int.carleman_sides(&wg, &omega, prof);
            entries.push(RatioEntry::new(
                k,
                s,
                ln(lhs) + wg.log_scale,
                ln(rhs) + wg.log_scale,
            ));
        }
    }
    Ok(InequalityReport::from_entries(
        id,
        s_values,
        profiles.len(),
        entries,
    ))
}

/// Sources of the inhomogeneous forward problem used by
/// [`verify_source_carleman`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceSpec {
    /// `f = g = 0`.
    Zero,
    /// Random smooth deterministic `f`, `g` with the given sup bounds.
    Random { f_bound: f64, g_bound: f64 },
    /// `f = b y`, `g = c y` with `y` the solution of each sample with its own
    /// `b`, `c`; the inhomogeneous problem then reproduces `y`.
    Reduction,
}

/// Report of the inhomogeneous estimate; for [`SourceSpec::Reduction`] also
/// the largest deviation of the reproduced solution relative to its size.
#[derive(Debug, Clone, Serialize)]
pub struct SourceReport {
    pub report: InequalityReport,
    pub reproduction_error: Option<f64>,
}

struct SourceProfiles {
    y: Vec<LevelProfile>,
    f: Vec<LevelProfile>,
    g: Vec<LevelProfile>,
    err: f64,
}

/// Weighted estimate for `dy - (a y_x)_x dt = f dt + g dW`: the forward left
/// side against
/// `E∫∫ f^2 e^{-2s phi} + s^2 theta^2 (x^2/a) g^2 e^{-2s phi} + a g_x^2 e^{-2s phi}`
/// plus the observation term.
pub fn verify_source_carleman(
    setup: &Setup,
    ws: &WeightSystem,
    samples: &[Sample],
    sources: SourceSpec,
    source_seed: u64,
    s_values: &[f64],
) -> Result<SourceReport> {
    let op = setup.operator()?;
    let profiles: Vec<SourceProfiles> = samples
        .par_iter()
        .enumerate()
        .map(|(k, sample)| {
            source_profiles(
                setup,
                &op,
                sample,
                sources,
                source_seed.wrapping_add(k as u64),
            )
        })
        .collect::<Result<_>>()?;
    let int = Integrator::new(setup, &op);
    let omega = int.rule.mask(&ws.omega());
    let dt = int.dt;
    let mut entries = Vec::new();
    for &s in s_values {
        let wg = int.weights(ws, s, WeightSign::Negative)?;
        for (k, p) in profiles.iter().enumerate() {
            let (lhs, mut rhs) = int.carleman_sides(&wg, &omega, &p.y);
            for n in 0..int.steps {
                rhs += dt * int.rule.square(&int.ones, &wg.avg[0][n], &p.f[n]);
                rhs += dt * int.rule.square(&int.x2_over_a, &wg.avg[2][n], &p.g[n]);
                rhs += dt * int.rule.gradient(&int.a, &wg.avg[0][n], &p.g[n]);
            }
            entries.push(RatioEntry::new(
                k,
                s,
                ln(lhs) + wg.log_scale,
                ln(rhs) + wg.log_scale,
            ));
        }
    }
    let reproduction_error = match sources {
        SourceSpec::Reduction => Some(profiles.iter().map(|p| p.err).fold(0.0, f64::max)),
        _ => None,
    };
    Ok(SourceReport {
        report: InequalityReport::from_entries(
            "carleman_with_sources",
            s_values,
            samples.len(),
            entries,
        ),
        reproduction_error,
    })
}

fn source_profiles(
    setup: &Setup,
    op: &DegenerateOperator,
    sample: &Sample,
    sources: SourceSpec,
    seed: u64,
) -> Result<SourceProfiles> {
    let steps = setup.steps();
    let dt = setup.dt();
    let m = op.len();
    let solver = setup.solver(op)?;
    let nodes = op.nodes();
    let zero = StepField::zero(steps, m);
    let y0 = sample.y0.sample(nodes);
    match sources {
        SourceSpec::Zero | SourceSpec::Random { .. } => {
            let (f, g) = match sources {
                SourceSpec::Random { f_bound, g_bound } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let ft = TrigField::random(&mut rng, setup.horizon, 3, 4, f_bound);
                    let gt = TrigField::random(&mut rng, setup.horizon, 3, 4, g_bound);
                    (
                        ft.step_field(steps, dt, nodes),
                        gt.step_field(steps, dt, nodes),
                    )
                }
                _ => (zero.clone(), zero.clone()),
            };
            let problem = ForwardProblem {
                b: &zero,
                c: &zero,
                f: Source::Deterministic(&f),
                g: Source::Deterministic(&g),
                y0: &y0,
            };
            let mom = solver.forward_moments(steps, &problem)?;
            let as_profile = |field: &StepField, n: usize| {
                field
                    .row(n)
                    .map_or(LevelProfile::zero(m), |r| LevelProfile::from_vector(op, r))
            };
            Ok(SourceProfiles {
                y: mom
                    .second
                    .iter()
                    .map(|r| LevelProfile::from_second_moment(op, r))
                    .collect(),
                f: (0..steps).map(|n| as_profile(&f, n)).collect(),
                g: (0..steps).map(|n| as_profile(&g, n)).collect(),
                err: 0.0,
            })
        }
        SourceSpec::Reduction => {
            let tree = setup.tree()?;
            let b = sample.b.step_field(steps, dt, nodes);
            let c = sample.c.step_field(steps, dt, nodes);
            let direct = solver.forward(
                &tree,
                &ForwardProblem {
                    b: &b,
                    c: &c,
                    f: Source::Zero,
                    g: Source::Zero,
                    y0: &y0,
                },
            )?;
            let mut f = AdaptedField::zeros_to(&tree, m, steps - 1);
            let mut g = f.clone();
            for n in 0..steps {
                let (br, cr) = (b.row(n), c.row(n));
                for j in 0..tree.nodes_at(n) {
                    let y = direct.node(n, j).to_vec();
                    let fv = f.node_mut(n, j);
                    for i in 0..m {
                        fv[i] = br.map_or(0.0, |b| b[i] * y[i]);
                    }
                    let gv = g.node_mut(n, j);
                    for i in 0..m {
                        gv[i] = cr.map_or(0.0, |c| c[i] * y[i]);
                    }
                }
            }
            let reduced = solver.forward(
                &tree,
                &ForwardProblem {
                    b: &zero,
                    c: &zero,
                    f: Source::Adapted(&f),
                    g: Source::Adapted(&g),
                    y0: &y0,
                },
            )?;
            let mut scale = 0.0f64;
            let mut err = 0.0f64;
            for n in 0..=steps {
                for (a, b) in direct.level(n).iter().zip(reduced.level(n)) {
                    scale = scale.max(a.abs());
                    err = err.max((a - b).abs());
                }
            }
            Ok(SourceProfiles {
                y: (0..=steps)
                    .map(|n| LevelProfile::from_level(op, &tree, n, reduced.level(n)))
                    .collect(),
                f: (0..steps)
                    .map(|n| LevelProfile::from_level(op, &tree, n, f.level(n)))
                    .collect(),
                g: (0..steps)
                    .map(|n| LevelProfile::from_level(op, &tree, n, g.level(n)))
                    .collect(),
                err: if scale > 0.0 { err / scale } else { err },
            })
        }
    }
}

/// Terminal-energy observability: `E|y(T)|^2` against
/// `E∫∫_region s^3 theta^3 y^2 e^{-2s phi}`.
pub fn verify_observability(
    setup: &Setup,
    ws: &WeightSystem,
    samples: &[Sample],
    s: f64,
    region: Interval,
    backend: Backend,
) -> Result<InequalityReport> {
    let op = setup.operator()?;
    let profiles = ensemble_profiles(setup, &op, samples, backend)?;
    observability_from_profiles(setup, &op, ws, &profiles, s, region)
}

pub fn observability_from_profiles(
    setup: &Setup,
    op: &DegenerateOperator,
    ws: &WeightSystem,
    profiles: &[Vec<LevelProfile>],
    s: f64,
    region: Interval,
) -> Result<InequalityReport> {
    let int = Integrator::new(setup, op);
    let mask = int.rule.mask(&region);
    let wg = int.weights(ws, s, WeightSign::Negative)?;
    let mut entries = Vec::new();
    for (k, prof) in profiles.iter().enumerate() {
        let lhs = int.rule.square(&int.ones, &int.ones, &prof[int.steps]);
        let rhs = int.state_square(&mask, &wg, 3, prof);
        entries.push(RatioEntry::new(k, s, ln(lhs), ln(rhs) + wg.log_scale));
    }
    Ok(InequalityReport::from_entries(
        "observability",
        &[s],
        profiles.len(),
        entries,
    ))
}

/// Profiles of one backward ensemble member solved on the recombining
/// lattice.
pub struct BackwardProfiles {
    /// `y` at levels `0..=N`.
    pub y: Vec<LevelProfile>,
    /// Martingale integrand at steps `0..N`.
    pub k: Vec<LevelProfile>,
    /// Source at steps `0..N`.
    pub f: Vec<LevelProfile>,
}

pub fn backward_profiles(
    setup: &Setup,
    op: &DegenerateOperator,
    sample: &BackwardSample,
) -> Result<BackwardProfiles> {
    let (lattice, sol, source) = solve_backward_sample(setup, op, sample)?;
    let steps = setup.steps();
    Ok(BackwardProfiles {
        y: (0..=steps)
            .map(|n| LevelProfile::from_level(op, &lattice, n, sol.z.level(n)))
            .collect(),
        k: (0..steps)
            .map(|n| LevelProfile::from_level(op, &lattice, n, sol.k.level(n)))
            .collect(),
        f: (0..steps)
            .map(|n| LevelProfile::from_level(op, &lattice, n, source.level(n)))
            .collect(),
    })
}

/// Solve the backward equation of one ensemble member (`b = c = 0`) on the
/// recombining lattice. Also returns the lattice and the adapted source.
pub fn solve_backward_sample(
    setup: &Setup,
    op: &DegenerateOperator,
    sample: &BackwardSample,
) -> Result<(RecombiningLattice, BackwardSolution, AdaptedField)> {
    let lattice = setup.lattice()?;
    let steps = setup.steps();
    let dt = setup.dt();
    let m = op.len();
    let nodes = op.nodes();
    let solver = setup.solver(op)?;
    let root_t = setup.horizon.sqrt();
    let p0 = sample.p0.sample(nodes);
    let p1 = sample.p1.sample(nodes);
    let mut terminal = vec![0.0; lattice.nodes_at(steps) * m];
    for (j, v) in terminal.chunks_mut(m).enumerate() {
        let w = lattice.brownian(steps, j) / root_t;
        for i in 0..m {
            v[i] = p0[i] + w * p1[i];
        }
    }
    let f0 = sample.f0.step_field(steps, dt, nodes);
    let f1 = sample.f1.step_field(steps, dt, nodes);
    let mut source = AdaptedField::zeros_to(&lattice, m, steps - 1);
    for n in 0..steps {
        for j in 0..lattice.nodes_at(n) {
            let w = lattice.brownian(n, j) / root_t;
            let v = source.node_mut(n, j);
            for i in 0..m {
                v[i] = f0.row(n).map_or(0.0, |r| r[i]) + w * f1.row(n).map_or(0.0, |r| r[i]);
            }
        }
    }
    let zero = StepField::zero(steps, m);
    let sol = solver.backward(
        &lattice,
        &BackwardProblem {
            b: &zero,
            c: &zero,
            terminal: Terminal::Level(&terminal),
            terminal_scale: 1.0,
            source: Source::Adapted(&source),
        },
    )?;
    Ok((lattice, sol, source))
}

/// Backward Carleman estimate with a time weight that is finite at `t = 0`:
/// `E∫ A(0) e^{-2s phi(0)} y(0)^2 + E∫∫ s a theta y_x^2 e + E∫∫ s^3 theta^3 (x^2/a) y^2 e`
/// against `E∫∫ F^2 e + E∫∫ s^2 theta^2 Y^2 e + E∫∫_omega s^3 theta^3 y^2 e`,
/// where `Y` is the martingale integrand of `y`.
pub fn verify_backward_carleman(
    setup: &Setup,
    ws: &WeightSystem,
    samples: &[BackwardSample],
    s_values: &[f64],
) -> Result<InequalityReport> {
    if ws.time_weight().variant() == ThetaVariant::Standard {
        return Err(Error::Parameter(
            "the backward estimate needs a time weight that is finite at t = 0".into(),
        ));
    }
    let op = setup.operator()?;
    let profiles: Vec<BackwardProfiles> = samples
        .par_iter()
        .map(|s| backward_profiles(setup, &op, s))
        .collect::<Result<_>>()?;
    let int = Integrator::new(setup, &op);
    let omega = int.rule.mask(&ws.omega());
    let mut entries = Vec::new();
    for &s in s_values {
        let wss = ws.with_s(s);
        let wg = int.weights(ws, s, WeightSign::Negative)?;
        let e0 = wg.at_theta(wss.theta(0.0)?);
        let mut a0 = Vec::with_capacity(int.rule.x.len());
        for &x in &int.rule.x {
            a0.push(wss.drift_factor(Direction::Backward, 0.0, x)?);
        }
        for (k, p) in profiles.iter().enumerate() {
            let (mut lhs, mut rhs) = int.carleman_sides(&wg, &omega, &p.y);
            lhs += int.rule.square(&a0, &e0, &p.y[0]);
            for n in 0..int.steps {
                rhs += int.dt * int.rule.square(&int.ones, &wg.avg[0][n], &p.f[n]);
                rhs += int.dt * int.rule.square(&int.ones, &wg.avg[2][n], &p.k[n]);
            }
            entries.push(RatioEntry::new(
                k,
                s,
                ln(lhs) + wg.log_scale,
                ln(rhs) + wg.log_scale,
            ));
        }
    }
    Ok(InequalityReport::from_entries(
        "carleman_backward",
        s_values,
        samples.len(),
        entries,
    ))
}

/// Interior energy estimate on `inner ⋐ outer` for solutions of
/// `dv = (a v_x)_x dt + b v dt`:
/// `E∫∫_inner v_x^2 e^{±2 mu phi}` against `E∫∫_outer mu^2 theta^2 v^2 e^{±2 mu phi}`.
pub fn verify_caccioppoli(
    setup: &Setup,
    ws: &WeightSystem,
    samples: &[Sample],
    inner: Interval,
    outer: Interval,
    mu_values: &[f64],
    sign: WeightSign,
) -> Result<InequalityReport> {
    if !inner.inside(&outer) {
        return Err(Error::Interval(
            "inner interval must lie strictly inside the outer one".into(),
        ));
    }
    if !(ws.coefficient().a(outer.lo) > 0.0) {
        return Err(Error::Interval(
            "coefficient must be positive on the outer interval".into(),
        ));
    }
    let op = setup.operator()?;
    let interior: Vec<Sample> = samples
        .iter()
        .map(|s| Sample {
            y0: s.y0.clone(),
            b: s.b.clone(),
            c: TrigField::zero(s.c.horizon),
        })
        .collect();
    let profiles = ensemble_profiles(setup, &op, &interior, Backend::Moments)?;
    caccioppoli_from_profiles(setup, &op, ws, &profiles, inner, outer, mu_values, sign)
}

#[allow(clippy::too_many_arguments)]
pub fn caccioppoli_from_profiles(
    setup: &Setup,
    op: &DegenerateOperator,
    ws: &WeightSystem,
    profiles: &[Vec<LevelProfile>],
    inner: Interval,
    outer: Interval,
    mu_values: &[f64],
    sign: WeightSign,
) -> Result<InequalityReport> {
    let int = Integrator::new(setup, op);
    let inner_mask = int.rule.mask(&inner);
    let outer_mask = int.rule.mask(&outer);
    // Each side is scaled by the weight's maximum over its own interval. With
    // the positive exponent the weight grows without bound near t = 0 and
    // t = T, and a common scale would flush the smaller side to zero.
    let mut entries = Vec::new();
    for &mu in mu_values {
        let wsm = ws.with_s(mu);
        let w_in = WeightGrid::build(&wsm, &int.rule, int.dt, int.steps, sign, Some(&inner_mask))?;
        let w_out = WeightGrid::build(&wsm, &int.rule, int.dt, int.steps, sign, Some(&outer_mask))?;
        for (k, prof) in profiles.iter().enumerate() {
            let lhs = int.state_gradient(&inner_mask, &w_in, 0, prof);
            let rhs = int.state_square(&outer_mask, &w_out, 2, prof);
            entries.push(RatioEntry::new(
                k,
                mu,
                ln(lhs) + w_in.log_scale,
                ln(rhs) + w_out.log_scale,
            ));
        }
    }
    Ok(InequalityReport::from_entries(
        "caccioppoli",
        mu_values,
        profiles.len(),
        entries,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::DiffusionCoefficient;
    use crate::setup::Resolution;
    use crate::weights::ThetaVariant;

    fn setup(alpha: f64, m: usize, steps: usize) -> Setup {
        Setup::new(
            DiffusionCoefficient::power_law(alpha).unwrap(),
            0.5,
            Resolution::new(m, steps),
        )
    }

    fn ws(setup: &Setup, variant: ThetaVariant) -> WeightSystem {
        WeightSystem::build(
            &setup.coef,
            setup.horizon,
            Interval::new(0.3, 0.8).unwrap(),
            Interval::new(0.4, 0.7).unwrap(),
            1.0,
            variant,
        )
        .unwrap()
    }

    #[test]
    fn zero_data_gives_zero_ratio() {
        let st = setup(0.5, 30, 6);
        let w = ws(&st, ThetaVariant::Standard);
        let mut samples = draw_ensemble(
            &EnsembleConfig {
                size: 2,
                ..Default::default()
            },
            0.5,
            BoundaryRegime::Dirichlet,
        );
        for s in &mut samples {
            s.y0 = s.y0.scaled(0.0);
        }
        let r =
            verify_carleman_forward(&st, &w, &samples, &default_s_grid(0.5, 3), Backend::Moments)
                .unwrap();
        assert!(r.entries.iter().all(|e| e.ratio == 0.0 && !e.violation));
        let o = verify_observability(&st, &w, &samples, 0.01, w.omega(), Backend::Moments).unwrap();
        assert_eq!(o.max_ratio, 0.0);
    }

    #[test]
    fn tree_and_moments_agree() {
        let st = setup(1.5, 24, 8);
        let w = ws(&st, ThetaVariant::Standard);
        let samples = draw_ensemble(
            &EnsembleConfig {
                size: 3,
                ..Default::default()
            },
            0.5,
            BoundaryRegime::FluxFreeLeft,
        );
        let s = default_s_grid(0.5, 3);
        let a = verify_carleman_forward(&st, &w, &samples, &s, Backend::Tree).unwrap();
        let b = verify_carleman_forward(&st, &w, &samples, &s, Backend::Moments).unwrap();
        for (x, y) in a.entries.iter().zip(&b.entries) {
            assert!((x.ratio / y.ratio - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ratio_is_invariant_under_amplitude_scaling() {
        let st = setup(0.5, 24, 6);
        let w = ws(&st, ThetaVariant::Standard);
        let samples = draw_ensemble(
            &EnsembleConfig {
                size: 2,
                ..Default::default()
            },
            0.5,
            BoundaryRegime::Dirichlet,
        );
        let scaled: Vec<Sample> = samples
            .iter()
            .map(|s| Sample {
                y0: s.y0.scaled(7.0),
                ..s.clone()
            })
            .collect();
        let s = default_s_grid(0.5, 2);
        let a = verify_carleman_forward(&st, &w, &samples, &s, Backend::Moments).unwrap();
        let b = verify_carleman_forward(&st, &w, &scaled, &s, Backend::Moments).unwrap();
        for (x, y) in a.entries.iter().zip(&b.entries) {
            assert!((y.ln_lhs - x.ln_lhs - 2.0 * 7f64.ln()).abs() < 1e-10);
            assert!((y.ratio / x.ratio - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn vanishing_rhs_is_flagged() {
        let e = RatioEntry::new(0, 1.0, 0.0, f64::NEG_INFINITY);
        assert!(e.violation && e.ratio.is_infinite());
        let z = RatioEntry::new(0, 1.0, f64::NEG_INFINITY, f64::NEG_INFINITY);
        assert!(!z.violation && z.ratio == 0.0);
    }
}
