//! Penalized HUM controls on the noise tree.
//!
//! [`null_control_backward`] drives the backward equation to `z(0) ≈ 0` with
//! one control supported in `omega`, found by conjugate gradient on the
//! penalized dual functional over deterministic initial data of the forward
//! equation. [`two_control_forward`] drives the forward equation to
//! `y(T) ≈ 0` with a drift control in `omega` and a noise control, by
//! conjugate gradient directly on the pair `(h, H)`. Both rely on the exact
//! discrete duality of the solvers, so the gradients are exact for the
//! discrete problem. [`dense`] holds small dense oracles for both.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::carleman::Sample;
use crate::error::{Error, Result};
use crate::noise::{AdaptedField, Filtration, NoiseTree};
use crate::setup::Setup;
use crate::solvers::{BackwardProblem, ForwardProblem, Solver, Source, StepField, Terminal};
use crate::spacegrid::DegenerateOperator;
use crate::weights::{Interval, ThetaVariant, TimeWeight, WeightSystem};

pub const DEFAULT_CG_TOL: f64 = 1e-8;
pub const DEFAULT_CG_MAX_ITER: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgOptions {
    /// Relative residual at which to stop, in the preconditioner norm.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CgOptions {
    fn default() -> Self {
        CgOptions {
            tol: DEFAULT_CG_TOL,
            max_iter: DEFAULT_CG_MAX_ITER,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

fn pdiag(p: &[f64], r: &[f64]) -> Vec<f64> {
    r.iter().zip(p).map(|(a, b)| a * b).collect()
}

fn dot(metric: &[f64], a: &[f64], b: &[f64]) -> f64 {
    metric
        .iter()
        .zip(a.iter().zip(b))
        .map(|(w, (x, y))| w * x * y)
        .sum()
}

/// Preconditioned conjugate gradient for `A x = rhs` with `A` self-adjoint
/// and positive definite in the inner product `sum_i metric_i a_i b_i`.
/// `precond` holds the diagonal `P` of the inverse preconditioner. The
/// residual is measured as `|r|_P / |rhs|_P`, the relative residual of the
/// symmetrically scaled system `P^{1/2} A P^{1/2}`; without `precond` this is
/// the plain relative residual.
pub fn conjugate_gradient(
    mut apply: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    rhs: &[f64],
    x0: Option<&[f64]>,
    metric: &[f64],
    precond: Option<&[f64]>,
    opts: CgOptions,
) -> Result<CgOutcome> {
    let n = rhs.len();
    let precondition = |r: &[f64]| precond.map_or_else(|| r.to_vec(), |p| pdiag(p, r));
    let rhs_norm = dot(metric, rhs, &precondition(rhs)).sqrt();
    let mut x = x0.map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
    if rhs_norm == 0.0 {
        return Ok(CgOutcome {
            x: vec![0.0; n],
            iterations: 0,
            residual: 0.0,
        });
    }
    let ax = apply(&x)?;
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut z = precondition(&r);
    let mut p = z.clone();
    let mut rz = dot(metric, &r, &z);
    let mut residual = rz.max(0.0).sqrt() / rhs_norm;
    let mut iterations = 0;
    while residual > opts.tol {
        if iterations == opts.max_iter {
            return Err(Error::CgNotConverged {
                iterations,
                residual,
            });
        }
        let ap = apply(&p)?;
        let pap = dot(metric, &p, &ap);
        if !(pap > 0.0) {
            return Err(Error::LinearSolve(format!(
                "operator is not positive definite (p^T A p = {pap:e})"
            )));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        z = precondition(&r);
        let rz_new = dot(metric, &r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        iterations += 1;
        residual = rz.max(0.0).sqrt() / rhs_norm;
    }
    Ok(CgOutcome {
        x,
        iterations,
        residual,
    })
}

/// Controls found by a HUM solve.
#[derive(Debug, Clone)]
pub enum Controls {
    /// `v` on levels `0..N`, supported in `omega`.
    Backward { v: AdaptedField },
    /// Drift control `h` (supported in `omega`) and noise control `H`.
    TwoControls {
        h: AdaptedField,
        big_h: AdaptedField,
    },
}

/// Costs of the controls. For the two-control problem both weightings are
/// reported: the bounded one used in the functional, and the growing one
/// `e^{2 s phi} (s theta)^{-3} h^2 + e^{2 s phi} s^{-2} theta^{-3} H^2` with
/// the singular time weight, as a natural logarithm since it overflows
/// easily.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ControlCosts {
    /// `E sum dt |control|^2` over all controls.
    pub unweighted: f64,
    pub weighted_bounded: Option<f64>,
    pub ln_weighted_growing: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ControlResult {
    pub controls: Controls,
    /// `|z(0)|^2` for the backward problem, `E|y(T)|^2` for the forward one.
    pub achieved: f64,
    pub epsilon: f64,
    pub iterations: usize,
    /// Final relative CG residual.
    pub residual: f64,
    /// Value of the minimized functional.
    pub functional: f64,
    pub costs: ControlCosts,
    /// Relative defect of the duality identity at the minimizer.
    pub duality_residual: Option<f64>,
    /// Relative violation of the optimality relations
    /// `h = -1_omega W_h^{-1} z`, `H = -W_H^{-1} Z`, in the norm of the CG
    /// residual.
    pub optimality_residual: Option<f64>,
    /// CG unknown at the minimizer, usable as a warm start.
    pub minimizer: Vec<f64>,
}

/// Numbers of a [`ControlResult`] for reports.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ControlSummary {
    pub epsilon: f64,
    pub achieved: f64,
    pub achieved_over_epsilon: f64,
    pub iterations: usize,
    pub residual: f64,
    pub functional: f64,
    pub costs: ControlCosts,
    pub duality_residual: Option<f64>,
    pub optimality_residual: Option<f64>,
}

impl ControlResult {
    pub fn summary(&self) -> ControlSummary {
        ControlSummary {
            epsilon: self.epsilon,
            achieved: self.achieved,
            achieved_over_epsilon: self.achieved / self.epsilon,
            iterations: self.iterations,
            residual: self.residual,
            functional: self.functional,
            costs: self.costs,
            duality_residual: self.duality_residual,
            optimality_residual: self.optimality_residual,
        }
    }
}

/// Indicator of `region` on the active nodes.
fn node_mask(op: &DegenerateOperator, region: &Interval) -> Vec<f64> {
    op.nodes()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            if op.is_active(i) && region.contains(x) {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

fn check_epsilon(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "penalty must be positive, got {eps}"
        )))
    }
}

/// `E sum_n dt <u_n, v_n>` over levels `0..N`.
fn expect_running<F: Filtration + ?Sized>(
    op: &DegenerateOperator,
    f: &F,
    u: &AdaptedField,
    v: &AdaptedField,
) -> f64 {
    let m = op.len();
    let mut acc = 0.0;
    for n in 0..f.steps() {
        for (j, (a, b)) in u.level(n).chunks(m).zip(v.level(n).chunks(m)).enumerate() {
            acc += f.dt() * f.probability(n, j) * op.inner(a, b);
        }
    }
    acc
}

fn expect_level<F: Filtration + ?Sized>(
    op: &DegenerateOperator,
    f: &F,
    n: usize,
    u: &[f64],
) -> f64 {
    u.chunks(op.len())
        .enumerate()
        .map(|(j, v)| f.probability(n, j) * op.norm_sq(v))
        .sum()
}

/// Multiply every node vector of levels `0..N` by `mask` (and `weight(n)`).
fn masked_levels(
    tree: &NoiseTree,
    field: &AdaptedField,
    mask: &[f64],
    weight: impl Fn(usize) -> Option<Vec<f64>>,
) -> AdaptedField {
    let m = mask.len();
    let steps = tree.steps();
    let mut out = AdaptedField::zeros_to(tree, m, steps - 1);
    for n in 0..steps {
        let w = weight(n);
        for (o, v) in out.level_mut(n).chunks_mut(m).zip(field.level(n).chunks(m)) {
            for i in 0..m {
                o[i] = mask[i] * v[i] * w.as_ref().map_or(1.0, |w| w[i]);
            }
        }
    }
    out
}

/// Data of the backward null-control problem
/// `dz = (-(a z_x)_x - b z - c Z + 1_omega v) dt + Z dW`, `z(T) = eta`.
#[derive(Debug, Clone, Copy)]
pub struct BackwardControlProblem<'a> {
    pub b: &'a StepField,
    pub c: &'a StepField,
    pub omega: Interval,
    pub terminal: Terminal<'a>,
}

struct BackwardHum<'a> {
    solver: Solver<'a>,
    tree: NoiseTree,
    b: &'a StepField,
    c: &'a StepField,
    mask: Vec<f64>,
    terminal: Terminal<'a>,
}

impl<'a> BackwardHum<'a> {
    fn forward(&self, y0: &[f64]) -> Result<AdaptedField> {
        self.solver.forward(
            &self.tree,
            &ForwardProblem {
                b: self.b,
                c: self.c,
                f: Source::Zero,
                g: Source::Zero,
                y0,
            },
        )
    }

    fn backward(
        &self,
        terminal: Terminal,
        scale: f64,
        src: Source,
    ) -> Result<crate::solvers::BackwardSolution> {
        self.solver.backward(
            &self.tree,
            &BackwardProblem {
                b: self.b,
                c: self.c,
                terminal,
                terminal_scale: scale,
                source: src,
            },
        )
    }

    /// `u -> G^* G u`, `G` the observation `u -> 1_omega y` on levels `0..N`.
    fn gram(&self, u: &[f64]) -> Result<Vec<f64>> {
        let y = self.forward(u)?;
        let v = masked_levels(&self.tree, &y, &self.mask, |_| None);
        let zero = vec![0.0; u.len()];
        let back = self.backward(Terminal::Deterministic(&zero), 0.0, Source::Adapted(&v))?;
        Ok(back.z.node(0, 0).iter().map(|z| -z).collect())
    }
}

/// Penalized HUM for the backward equation. Minimizes over deterministic
/// `y0` the functional
/// `1/2 E sum dt |1_omega y_n|^2 + eps/2 |y0|^2 - E<eta, y_N>`,
/// with `y` the forward solution from `y0`; the control is
/// `v = 1_omega y` at the minimizer, for which `z(0) = eps y0`.
pub fn null_control_backward(
    setup: &Setup,
    problem: &BackwardControlProblem,
    eps: f64,
    opts: CgOptions,
    warm: Option<&[f64]>,
) -> Result<ControlResult> {
    check_epsilon(eps)?;
    let op = setup.operator()?;
    let hum = BackwardHum {
        solver: setup.solver(&op)?,
        tree: setup.tree()?,
        b: problem.b,
        c: problem.c,
        mask: node_mask(&op, &problem.omega),
        terminal: problem.terminal,
    };
    let m = op.len();
    let metric = op.weights().to_vec();
    let rhs = hum
        .backward(hum.terminal, 1.0, Source::Zero)?
        .z
        .node(0, 0)
        .to_vec();
    let cg = conjugate_gradient(
        |u| {
            let mut out = hum.gram(u)?;
            for i in 0..m {
                out[i] += eps * u[i];
            }
            Ok(out)
        },
        &rhs,
        warm,
        &metric,
        None,
        opts,
    )?;
    let y0 = cg.x.clone();
    let y = hum.forward(&y0)?;
    let v = masked_levels(&hum.tree, &y, &hum.mask, |_| None);
    let back = hum.backward(hum.terminal, 1.0, Source::Adapted(&v))?;
    let z0 = back.z.node(0, 0);
    let audit = hum.solver.duality_terms(
        &hum.tree,
        &y,
        Source::Zero,
        Source::Zero,
        &back,
        Source::Adapted(&v),
    )?;
    let cost = expect_running(&op, &hum.tree, &v, &v);
    let steps = hum.tree.steps();
    let pairing: f64 = back
        .z
        .level(steps)
        .chunks(m)
        .zip(y.level(steps).chunks(m))
        .enumerate()
        .map(|(j, (e, yn))| hum.tree.probability(steps, j) * op.inner(e, yn))
        .sum();
    Ok(ControlResult {
        controls: Controls::Backward { v },
        achieved: op.norm_sq(z0),
        epsilon: eps,
        iterations: cg.iterations,
        residual: cg.residual,
        functional: 0.5 * cost + 0.5 * eps * op.norm_sq(&y0) - pairing,
        costs: ControlCosts {
            unweighted: cost,
            ..Default::default()
        },
        duality_residual: Some(audit.residual),
        optimality_residual: None,
        minimizer: y0,
    })
}

/// The map `u -> (G^* G + eps) u` of [`null_control_backward`] and the
/// inner product it is self-adjoint in, for symmetry checks.
pub fn backward_hum_operator(
    setup: &Setup,
    problem: &BackwardControlProblem,
    eps: f64,
    u: &[f64],
) -> Result<Vec<f64>> {
    let op = setup.operator()?;
    let hum = BackwardHum {
        solver: setup.solver(&op)?,
        tree: setup.tree()?,
        b: problem.b,
        c: problem.c,
        mask: node_mask(&op, &problem.omega),
        terminal: problem.terminal,
    };
    let mut out = hum.gram(u)?;
    for (o, x) in out.iter_mut().zip(u) {
        *o += eps * x;
    }
    Ok(out)
}

/// Data of the two-control problem
/// `dy = ((a y_x)_x + b y + F + 1_omega h) dt + (G + H) dW`, `y(0) = y0`.
#[derive(Debug, Clone, Copy)]
pub struct TwoControlProblem<'a> {
    pub b: &'a StepField,
    pub f: &'a StepField,
    pub g: &'a StepField,
    pub y0: &'a [f64],
    /// Regularization of the time weight inside `W_y`. `None` ties it to the
    /// penalty, so `W_y` changes along an `eps` sweep; a fixed value keeps
    /// the functionals of a sweep nested.
    pub weight_eps: Option<f64>,
}

impl<'a> TwoControlProblem<'a> {
    fn weight_eps(&self, eps: f64) -> Result<f64> {
        let e = self.weight_eps.unwrap_or(eps);
        check_epsilon(e)?;
        Ok(e)
    }
}

/// Weights of the functional at the nodes: `w_y` per level `0..N` at
/// `t_n`, `w_h`, `w_big_h` per step at `t_{n+1/2}`.
struct ControlWeights {
    w_y: Vec<Vec<f64>>,
    w_h: Vec<Vec<f64>>,
    w_big_h: Vec<Vec<f64>>,
    /// `ln(e^{2 s phi} (s theta)^{-3})` and `ln(e^{2 s phi} s^{-2} theta^{-3})`
    /// with the singular time weight.
    ln_growing_h: Vec<Vec<f64>>,
    ln_growing_big_h: Vec<Vec<f64>>,
}

impl ControlWeights {
    fn new(ws: &WeightSystem, nodes: &[f64], steps: usize, dt: f64, eps: f64) -> Result<Self> {
        let s = ws.s();
        let regular = ws.with_variant(ThetaVariant::BarEps(eps))?;
        let standard = TimeWeight::new(ws.horizon(), ThetaVariant::Standard)?;
        let beta: Vec<f64> = nodes.iter().map(|&x| ws.beta(x)).collect();
        let mut w = ControlWeights {
            w_y: Vec::with_capacity(steps),
            w_h: Vec::with_capacity(steps),
            w_big_h: Vec::with_capacity(steps),
            ln_growing_h: Vec::with_capacity(steps),
            ln_growing_big_h: Vec::with_capacity(steps),
        };
        for n in 0..steps {
            let te = regular.theta(n as f64 * dt)?;
            w.w_y
                .push(beta.iter().map(|b| (-2.0 * s * te * b).exp()).collect());
            let t = (n as f64 + 0.5) * dt;
            let th = ws.theta(t)?;
            let st = s * th;
            w.w_h.push(
                beta.iter()
                    .map(|b| (-2.0 * st * b).exp() / (st * st * st))
                    .collect(),
            );
            w.w_big_h.push(
                beta.iter()
                    .map(|b| (-2.0 * st * b).exp() / (s * s * th * th * th))
                    .collect(),
            );
            let ts = standard.theta(t)?;
            let ss = s * ts;
            w.ln_growing_h
                .push(beta.iter().map(|b| 2.0 * ss * b - 3.0 * ss.ln()).collect());
            w.ln_growing_big_h.push(
                beta.iter()
                    .map(|b| 2.0 * ss * b - 2.0 * s.ln() - 3.0 * ts.ln())
                    .collect(),
            );
        }
        Ok(w)
    }
}

/// Flat layout of `(h, H)`: levels `0..N` of `h`, then the same for `H`.
struct Layout {
    m: usize,
    steps: usize,
    half: usize,
}

impl Layout {
    fn new(m: usize, steps: usize) -> Self {
        Layout {
            m,
            steps,
            half: ((1usize << steps) - 1) * m,
        }
    }

    fn offset(&self, n: usize) -> usize {
        ((1usize << n) - 1) * self.m
    }

    fn len(&self) -> usize {
        2 * self.half
    }

    fn split(&self, tree: &NoiseTree, u: &[f64]) -> (AdaptedField, AdaptedField) {
        let mut h = AdaptedField::zeros_to(tree, self.m, self.steps - 1);
        let mut big_h = h.clone();
        for n in 0..self.steps {
            let len = (1usize << n) * self.m;
            let o = self.offset(n);
            h.level_mut(n).copy_from_slice(&u[o..o + len]);
            big_h
                .level_mut(n)
                .copy_from_slice(&u[self.half + o..self.half + o + len]);
        }
        (h, big_h)
    }

    fn join(&self, h: &AdaptedField, big_h: &AdaptedField) -> Vec<f64> {
        let mut u = vec![0.0; self.len()];
        for n in 0..self.steps {
            let len = (1usize << n) * self.m;
            let o = self.offset(n);
            u[o..o + len].copy_from_slice(&h.level(n)[..len]);
            u[self.half + o..self.half + o + len].copy_from_slice(&big_h.level(n)[..len]);
        }
        u
    }

    /// Apply `f(n, i)` to every entry of both halves.
    fn fill(&self, f: impl Fn(bool, usize, usize) -> f64) -> Vec<f64> {
        let mut u = vec![0.0; self.len()];
        for (second, base) in [(false, 0), (true, self.half)] {
            for n in 0..self.steps {
                let o = base + self.offset(n);
                for (k, v) in u[o..o + (1usize << n) * self.m].iter_mut().enumerate() {
                    *v = f(second, n, k % self.m);
                }
            }
        }
        u
    }
}

struct TwoControlHum<'a> {
    op: &'a DegenerateOperator,
    solver: Solver<'a>,
    tree: NoiseTree,
    b: &'a StepField,
    zero: StepField,
    omega: Vec<f64>,
    active: Vec<f64>,
    weights: ControlWeights,
    layout: Layout,
    eps: f64,
}

impl<'a> TwoControlHum<'a> {
    fn new(
        setup: &Setup,
        op: &'a DegenerateOperator,
        ws: &WeightSystem,
        problem: &TwoControlProblem<'a>,
        eps: f64,
    ) -> Result<Self> {
        if ws.time_weight().variant() == ThetaVariant::Standard {
            return Err(Error::Parameter(
                "the two-control functional needs a time weight that is finite at t = 0".into(),
            ));
        }
        let tree = setup.tree()?;
        let steps = tree.steps();
        let m = op.len();
        Ok(TwoControlHum {
            op,
            solver: setup.solver(op)?,
            b: problem.b,
            zero: StepField::zero(steps, m),
            omega: node_mask(op, &ws.omega()),
            active: (0..m)
                .map(|i| if op.is_active(i) { 1.0 } else { 0.0 })
                .collect(),
            weights: ControlWeights::new(
                ws,
                op.nodes(),
                steps,
                tree.dt(),
                problem.weight_eps(eps)?,
            )?,
            layout: Layout::new(m, steps),
            tree,
            eps,
        })
    }

    /// State driven by `1_omega h` and `H` from zero data. Components outside
    /// the supports do not act.
    fn control_response(&self, h: &AdaptedField, big_h: &AdaptedField) -> Result<AdaptedField> {
        let y0 = vec![0.0; self.op.len()];
        let h = masked_levels(&self.tree, h, &self.omega, |_| None);
        let big_h = masked_levels(&self.tree, big_h, &self.active, |_| None);
        self.solver.forward(
            &self.tree,
            &ForwardProblem {
                b: self.b,
                c: &self.zero,
                f: Source::Adapted(&h),
                g: Source::Adapted(&big_h),
                y0: &y0,
            },
        )
    }

    /// Gradient of the state part of the functional with respect to the
    /// controls, and the adjoint solution it came from.
    fn state_gradient(
        &self,
        y: &AdaptedField,
    ) -> Result<(Vec<f64>, crate::solvers::BackwardSolution)> {
        let steps = self.tree.steps();
        let src = masked_levels(&self.tree, y, &self.active, |n| {
            Some(self.weights.w_y[n].iter().map(|w| -w).collect())
        });
        let back = self.solver.backward(
            &self.tree,
            &BackwardProblem {
                b: self.b,
                c: &self.zero,
                terminal: Terminal::Level(y.level(steps)),
                terminal_scale: 1.0 / self.eps,
                source: Source::Adapted(&src),
            },
        )?;
        let gh = masked_levels(&self.tree, &back.drift_adjoint, &self.omega, |_| None);
        let g_big = masked_levels(&self.tree, &back.noise_adjoint, &self.active, |_| None);
        Ok((self.layout.join(&gh, &g_big), back))
    }

    fn control_weight(&self) -> Vec<f64> {
        self.layout.fill(|second, n, i| {
            if second {
                self.active[i] * self.weights.w_big_h[n][i]
            } else {
                self.omega[i] * self.weights.w_h[n][i]
            }
        })
    }

    fn metric(&self) -> Vec<f64> {
        let dt = self.tree.dt();
        let w = self.op.weights();
        let p: Vec<f64> = (0..self.tree.steps())
            .map(|n| self.tree.probability(n, 0))
            .collect();
        self.layout.fill(|_, n, i| dt * p[n] * w[i])
    }

    /// Exact diagonal of the state part of the Hessian. A unit control at
    /// one node of one branch moves the state deterministically (no
    /// multiplicative noise), by `dt P_n e_i` for `h` and `±sqrt(dt) P_n e_i`
    /// for `H`, on a subtree of the branch's probability.
    fn state_diagonal(&self) -> Vec<f64> {
        let steps = self.tree.steps();
        let m = self.op.len();
        let dt = self.tree.dt();
        let w = self.op.weights();
        // cur[n][i]: sum_{k>n} dt |y_k|^2_{W_y} + |y_N|^2 / eps for y_{n+1} = P_n e_i.
        let mut cur = vec![vec![0.0; m]; steps];
        let mut y = vec![0.0; m];
        let mut next = vec![0.0; m];
        for n in 0..steps {
            for i in 0..m {
                if !self.op.is_active(i) {
                    continue;
                }
                y.fill(0.0);
                y[i] = 1.0;
                self.solver.propagate(n, &mut y);
                let mut acc = 0.0;
                for k in n + 1..steps {
                    acc += dt
                        * (0..m)
                            .map(|l| w[l] * self.weights.w_y[k][l] * y[l] * y[l])
                            .sum::<f64>();
                    self.solver.apply_explicit(k, self.b.row(k), &y, &mut next);
                    self.solver.propagate(k, &mut next);
                    std::mem::swap(&mut y, &mut next);
                }
                acc += self.op.norm_sq(&y) / self.eps;
                cur[n][i] = acc / w[i];
            }
        }
        self.layout.fill(|second, n, i| {
            if second {
                self.active[i] * cur[n][i]
            } else {
                self.omega[i] * dt * cur[n][i]
            }
        })
    }

    fn hessian(&self, u: &[f64], r: &[f64]) -> Result<Vec<f64>> {
        let (h, big_h) = self.layout.split(&self.tree, u);
        let y = self.control_response(&h, &big_h)?;
        let (mut g, _) = self.state_gradient(&y)?;
        for i in 0..g.len() {
            g[i] += r[i] * u[i];
        }
        Ok(g)
    }

    fn functional(&self, y: &AdaptedField, u: &[f64], r: &[f64], metric: &[f64]) -> f64 {
        let steps = self.tree.steps();
        let m = self.op.len();
        let mut state = 0.0;
        for n in 0..steps {
            for (j, v) in y.level(n).chunks(m).enumerate() {
                let p = self.tree.probability(n, j) * self.tree.dt();
                state += p * self
                    .op
                    .weights()
                    .iter()
                    .zip(v)
                    .zip(&self.weights.w_y[n])
                    .map(|((w, x), wy)| w * wy * x * x)
                    .sum::<f64>();
            }
        }
        let control: f64 = (0..u.len()).map(|i| metric[i] * r[i] * u[i] * u[i]).sum();
        let terminal = expect_level(self.op, &self.tree, steps, y.level(steps));
        0.5 * state + 0.5 * control + 0.5 * terminal / self.eps
    }
}

fn log_sum_exp(terms: impl Iterator<Item = f64>) -> f64 {
    let terms: Vec<f64> = terms.filter(|t| *t > f64::NEG_INFINITY).collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Two-control penalized HUM. Minimizes over `(h, H)`
/// `J = 1/2 E∫∫ W_y y^2 + 1/2 E∫∫_omega W_h h^2 + 1/2 E∫∫ W_H H^2 + 1/(2 eps) E|y(T)|^2`
/// with `W_y = e^{-2 s phi_eps}` (regularized time weight with the same
/// `eps`), `W_h = e^{-2 s phi} (s theta)^{-3}` and
/// `W_H = e^{-2 s phi} s^{-2} theta^{-3}` on the time weight of `ws`, which
/// must be finite at `t = 0`.
pub fn two_control_forward(
    setup: &Setup,
    ws: &WeightSystem,
    problem: &TwoControlProblem,
    eps: f64,
    opts: CgOptions,
    warm: Option<&[f64]>,
) -> Result<ControlResult> {
    check_epsilon(eps)?;
    let op = setup.operator()?;
    let hum = TwoControlHum::new(setup, &op, ws, problem, eps)?;
    let steps = hum.tree.steps();
    let m = op.len();
    let free = hum.solver.forward(
        &hum.tree,
        &ForwardProblem {
            b: problem.b,
            c: &hum.zero,
            f: Source::Deterministic(problem.f),
            g: Source::Deterministic(problem.g),
            y0: problem.y0,
        },
    )?;
    let (g0, _) = hum.state_gradient(&free)?;
    let rhs: Vec<f64> = g0.iter().map(|g| -g).collect();
    let r = hum.control_weight();
    let metric = hum.metric();
    // Jacobi preconditioner. Entries outside the supports have a zero
    // Hessian row and zero right-hand side, so any positive value works.
    let precond: Vec<f64> = hum
        .state_diagonal()
        .iter()
        .zip(&r)
        .map(|(d, w)| if d + w > 0.0 { 1.0 / (d + w) } else { 1.0 })
        .collect();
    let cg = conjugate_gradient(
        |u| hum.hessian(u, &r),
        &rhs,
        warm,
        &metric,
        Some(&precond),
        opts,
    )?;
    let u = cg.x;
    let (h, big_h) = hum.layout.split(&hum.tree, &u);
    let mut y = hum.control_response(&h, &big_h)?;
    y.axpy(1.0, &free);
    let (g, _) = hum.state_gradient(&y)?;
    // Optimality: W_h h + 1_omega z = 0 and W_H H + Z = 0. The defect is
    // the true residual of the normal equations, measured like the CG
    // residual.
    let rhs_norm = dot(&metric, &rhs, &pdiag(&precond, &rhs)).sqrt();
    let defect: Vec<f64> = (0..u.len()).map(|i| r[i] * u[i] + g[i]).collect();
    let optimality = if rhs_norm > 0.0 {
        dot(&metric, &defect, &pdiag(&precond, &defect)).sqrt() / rhs_norm
    } else {
        dot(&metric, &defect, &defect).sqrt()
    };
    let functional = hum.functional(&y, &u, &r, &metric);
    let achieved = expect_level(&op, &hum.tree, steps, y.level(steps));
    let unweighted: f64 = (0..u.len()).map(|i| metric[i] * u[i] * u[i]).sum();
    let weighted: f64 = (0..u.len()).map(|i| metric[i] * r[i] * u[i] * u[i]).sum();
    let growing = log_sum_exp((0..u.len()).map(|i| {
        let term = metric[i] * u[i] * u[i];
        if term == 0.0 {
            return f64::NEG_INFINITY;
        }
        let second = i >= hum.layout.half;
        let k = if second { i - hum.layout.half } else { i };
        let n = (0..steps)
            .rev()
            .find(|&n| hum.layout.offset(n) <= k)
            .unwrap_or(0);
        let node = k % m;
        let lw = if second {
            hum.weights.ln_growing_big_h[n][node]
        } else {
            hum.weights.ln_growing_h[n][node]
        };
        term.ln() + lw
    }));
    Ok(ControlResult {
        controls: Controls::TwoControls { h, big_h },
        achieved,
        epsilon: eps,
        iterations: cg.iterations,
        residual: cg.residual,
        functional,
        costs: ControlCosts {
            unweighted,
            weighted_bounded: Some(weighted),
            ln_weighted_growing: Some(growing),
        },
        duality_residual: None,
        optimality_residual: Some(optimality),
        minimizer: u,
    })
}

/// Value and gradient (in the control inner product) of the two-control
/// functional at a flat control vector, for finite-difference audits.
pub fn two_control_objective(
    setup: &Setup,
    ws: &WeightSystem,
    problem: &TwoControlProblem,
    eps: f64,
    u: &[f64],
) -> Result<(f64, Vec<f64>)> {
    check_epsilon(eps)?;
    let op = setup.operator()?;
    let hum = TwoControlHum::new(setup, &op, ws, problem, eps)?;
    if u.len() != hum.layout.len() {
        return Err(Error::Mismatch(format!(
            "control vector has length {}, expected {}",
            u.len(),
            hum.layout.len()
        )));
    }
    let (h, big_h) = hum.layout.split(&hum.tree, u);
    let r = hum.control_weight();
    let mut y = hum.control_response(&h, &big_h)?;
    let free = hum.solver.forward(
        &hum.tree,
        &ForwardProblem {
            b: problem.b,
            c: &hum.zero,
            f: Source::Deterministic(problem.f),
            g: Source::Deterministic(problem.g),
            y0: problem.y0,
        },
    )?;
    y.axpy(1.0, &free);
    let metric = hum.metric();
    let (mut g, _) = hum.state_gradient(&y)?;
    for i in 0..g.len() {
        g[i] += r[i] * u[i];
    }
    Ok((hum.functional(&y, u, &r, &metric), g))
}

/// Length of the flat control vector and its inner-product weights.
pub fn two_control_space(setup: &Setup) -> Result<(usize, Vec<f64>)> {
    let op = setup.operator()?;
    let tree = setup.tree()?;
    let layout = Layout::new(op.len(), tree.steps());
    let dt = tree.dt();
    let w = op.weights();
    let metric = layout.fill(|_, n, i| dt * tree.probability(n, 0) * w[i]);
    Ok((layout.len(), metric))
}

/// Penalties visited by the continuation from `targets[0]` to the last
/// target, halving between consecutive targets and hitting each exactly.
pub fn continuation_schedule(targets: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    for (k, &e) in targets.iter().enumerate() {
        if k > 0 {
            let mut x = targets[k - 1] / 2.0;
            while x > e * (1.0 + 1e-12) {
                out.push(x);
                x /= 2.0;
            }
        }
        out.push(e);
    }
    out
}

/// Two-control solves along the continuation schedule of `targets` (which
/// must decrease), each warm-started from the previous minimizer. Returns
/// the results at the targets only.
pub fn two_control_sweep(
    setup: &Setup,
    ws: &WeightSystem,
    problem: &TwoControlProblem,
    targets: &[f64],
    opts: CgOptions,
) -> Result<Vec<ControlResult>> {
    if targets.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::Parameter("penalties must decrease".into()));
    }
    let mut out = Vec::with_capacity(targets.len());
    let mut warm: Option<Vec<f64>> = None;
    for eps in continuation_schedule(targets) {
        let res = two_control_forward(setup, ws, problem, eps, opts, warm.as_deref())?;
        warm = Some(res.minimizer.clone());
        if targets.iter().any(|&t| (t - eps).abs() <= 1e-12 * t) {
            out.push(res);
        }
    }
    Ok(out)
}

/// Outcome of the unique-continuation probe for one candidate.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ContinuationEntry {
    pub candidate: usize,
    /// `E∫_0^{t1}∫_omega y^2`.
    pub local: f64,
    /// `E∫_0^T∫_0^1 y^2`.
    pub global: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ContinuationReport {
    pub entries: Vec<ContinuationEntry>,
    pub violations: usize,
}

/// Flags candidates whose energy in `omega x (0, t1)` vanishes (relative to
/// `threshold` times the global energy) while the global energy does not.
/// Energies are exact tree expectations over levels `1..=N`.
pub fn unique_continuation_probe(
    setup: &Setup,
    candidates: &[Sample],
    omega: Interval,
    t1: f64,
    threshold: f64,
) -> Result<ContinuationReport> {
    use rayon::prelude::*;
    if !(t1 > 0.0 && t1 <= setup.horizon) {
        return Err(Error::Parameter(format!("t1 = {t1} must lie in (0, T]")));
    }
    let op = setup.operator()?;
    let solver = setup.solver(&op)?;
    let steps = setup.steps();
    let dt = setup.dt();
    let mask = node_mask(&op, &omega);
    let w = op.weights();
    let entries: Vec<ContinuationEntry> = candidates
        .par_iter()
        .enumerate()
        .map(|(k, cand)| -> Result<ContinuationEntry> {
            let nodes = op.nodes();
            let b = cand.b.step_field(steps, dt, nodes);
            let c = cand.c.step_field(steps, dt, nodes);
            let y0 = cand.y0.sample(nodes);
            let mom = solver.forward_moments(
                steps,
                &ForwardProblem {
                    b: &b,
                    c: &c,
                    f: Source::Zero,
                    g: Source::Zero,
                    y0: &y0,
                },
            )?;
            let (mut local, mut global) = (0.0, 0.0);
            for n in 1..=steps {
                let r = &mom.second[n];
                for i in 0..op.len() {
                    let e = dt * w[i] * r[(i, i)];
                    global += e;
                    if n as f64 * dt <= t1 + 1e-12 * dt {
                        local += mask[i] * e;
                    }
                }
            }
            Ok(ContinuationEntry {
                candidate: k,
                local,
                global,
                flagged: global > 0.0 && local <= threshold * global,
            })
        })
        .collect::<Result<_>>()?;
    let violations = entries.iter().filter(|e| e.flagged).count();
    Ok(ContinuationReport {
        entries,
        violations,
    })
}

/// Dense oracles assembling the tree forward map as explicit matrices, for
/// cross-checking the CG solutions on small problems.
pub mod dense {
    use super::*;

    /// `T_n^{±} = P_n (A_n ± sqrt(dt) diag(c_n))` and `P_n` as dense matrices.
    struct StepMatrices {
        up: DMatrix<f64>,
        down: DMatrix<f64>,
        p: DMatrix<f64>,
    }

    fn step_matrices(solver: &Solver, n: usize, b: &StepField, c: &StepField) -> StepMatrices {
        let m = solver.op().len();
        let p = solver.dense_propagator(n);
        let mut a = DMatrix::zeros(m, m);
        let mut e = vec![0.0; m];
        let mut col = vec![0.0; m];
        for i in 0..m {
            e.fill(0.0);
            e[i] = 1.0;
            solver.apply_explicit(n, b.row(n), &e, &mut col);
            a.set_column(i, &DVector::from_column_slice(&col));
        }
        let sq = solver.dt().sqrt();
        let cd = DMatrix::from_diagonal(&DVector::from_iterator(
            m,
            (0..m).map(|i| c.row(n).map_or(0.0, |c| c[i])),
        ));
        StepMatrices {
            up: &p * (&a + &cd * sq),
            down: &p * (&a - &cd * sq),
            p,
        }
    }

    fn projector(op: &DegenerateOperator) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(
            op.len(),
            (0..op.len()).map(|i| if op.is_active(i) { 1.0 } else { 0.0 }),
        ))
    }

    /// Minimizer `y0` of the backward HUM functional from the dense normal
    /// equations.
    pub fn backward_minimizer(
        setup: &Setup,
        problem: &BackwardControlProblem,
        eps: f64,
    ) -> Result<Vec<f64>> {
        let op = setup.operator()?;
        let solver = setup.solver(&op)?;
        let tree = setup.tree()?;
        let steps = tree.steps();
        let m = op.len();
        let dt = tree.dt();
        let w = op.weights();
        let mask = node_mask(&op, &problem.omega);
        let mats: Vec<StepMatrices> = (0..steps)
            .map(|n| step_matrices(&solver, n, problem.b, problem.c))
            .collect();
        let mut hess =
            DMatrix::from_diagonal(&DVector::from_iterator(m, w.iter().map(|w| eps * w)));
        let mut rhs = DVector::zeros(m);
        let q = DMatrix::from_diagonal(&DVector::from_iterator(m, (0..m).map(|i| w[i] * mask[i])));
        let wd = DMatrix::from_diagonal(&DVector::from_column_slice(w));
        let mut level = vec![projector(&op)];
        for n in 0..=steps {
            let prob = tree.probability(n, 0);
            if n < steps {
                for l in &level {
                    hess += l.transpose() * &q * l * (dt * prob);
                }
            } else {
                for (j, l) in level.iter().enumerate() {
                    let eta = match problem.terminal {
                        Terminal::Deterministic(v) => DVector::from_column_slice(v),
                        Terminal::Level(v) => DVector::from_column_slice(&v[j * m..(j + 1) * m]),
                    };
                    rhs += l.transpose() * (&wd * (projector(&op) * eta)) * prob;
                }
                break;
            }
            level = level
                .iter()
                .flat_map(|l| [&mats[n].up * l, &mats[n].down * l])
                .collect();
        }
        let x = hess
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::LinearSolve("dense HUM system is singular".into()))?;
        Ok(x.iter().copied().collect())
    }

    /// Dense solution of the two-control problem.
    #[derive(Debug, Clone)]
    pub struct DenseTwoControl {
        pub controls: Vec<f64>,
        pub functional: f64,
        pub achieved: f64,
    }

    /// Minimizer of the two-control functional from the dense normal
    /// equations, with its value and `E|y(T)|^2`.
    pub fn two_control_minimizer(
        setup: &Setup,
        ws: &WeightSystem,
        problem: &TwoControlProblem,
        eps: f64,
    ) -> Result<DenseTwoControl> {
        let op = setup.operator()?;
        let solver = setup.solver(&op)?;
        let tree = setup.tree()?;
        let steps = tree.steps();
        let m = op.len();
        let dt = tree.dt();
        let sq = dt.sqrt();
        let w = op.weights();
        let layout = Layout::new(m, steps);
        let nu = layout.len();
        check_epsilon(eps)?;
        let weights = ControlWeights::new(ws, op.nodes(), steps, dt, problem.weight_eps(eps)?)?;
        let omega = node_mask(&op, &ws.omega());
        let zero = StepField::zero(steps, m);
        let mats: Vec<StepMatrices> = (0..steps)
            .map(|n| step_matrices(&solver, n, problem.b, &zero))
            .collect();
        // Affine state per node: y = L u + y_free.
        let y0 = projector(&op) * DVector::from_column_slice(problem.y0);
        let mut level: Vec<(DMatrix<f64>, DVector<f64>)> = vec![(DMatrix::zeros(m, nu), y0)];
        let mut hess = DMatrix::<f64>::zeros(nu, nu);
        let mut grad = DVector::<f64>::zeros(nu);
        let mut constant = 0.0;
        let mut terminal: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::new();
        for n in 0..=steps {
            let prob = tree.probability(n, 0);
            let wq: Vec<f64> = if n < steps {
                (0..m)
                    .map(|i| dt * prob * w[i] * weights.w_y[n][i])
                    .collect()
            } else {
                (0..m).map(|i| prob * w[i] / eps).collect()
            };
            let q = DMatrix::from_diagonal(&DVector::from_column_slice(&wq));
            for (l, y) in &level {
                let lq = l.transpose() * &q;
                hess += &lq * l;
                grad += &lq * y;
                constant += y.dot(&(&q * y));
            }
            if n == steps {
                terminal = level;
                break;
            }
            let mut next = Vec::with_capacity(2 * level.len());
            for (j, (l, y)) in level.iter().enumerate() {
                let f = DVector::from_iterator(
                    m,
                    (0..m).map(|i| problem.f.row(n).map_or(0.0, |r| r[i])),
                );
                let g = DVector::from_iterator(
                    m,
                    (0..m).map(|i| problem.g.row(n).map_or(0.0, |r| r[i])),
                );
                // Control columns of node (n, j).
                let base = layout.offset(n) + j * m;
                for (mat, sign) in [(&mats[n].up, 1.0), (&mats[n].down, -1.0)] {
                    let mut ln = mat * l;
                    let yn = mat * y + &mats[n].p * (&f * dt + &g * (sign * sq));
                    for i in 0..m {
                        let col_h = mats[n].p.column(i) * (dt * omega[i]);
                        let col_big_h = mats[n].p.column(i)
                            * (sign * sq * if op.is_active(i) { 1.0 } else { 0.0 });
                        let mut c = ln.column_mut(base + i);
                        c += &col_h;
                        let mut c = ln.column_mut(layout.half + base + i);
                        c += &col_big_h;
                    }
                    let proj = projector(&op);
                    next.push((&proj * ln, &proj * yn));
                }
            }
            level = next;
        }
        let metric = layout.fill(|_, n, i| dt * tree.probability(n, 0) * w[i]);
        let r = layout.fill(|second, n, i| {
            if second {
                if op.is_active(i) {
                    weights.w_big_h[n][i]
                } else {
                    0.0
                }
            } else {
                omega[i] * weights.w_h[n][i]
            }
        });
        for k in 0..nu {
            hess[(k, k)] += metric[k] * r[k];
        }
        // Unknowns without weight or effect are pinned to zero; the rest is
        // solved with symmetric diagonal scaling, since the weights span
        // hundreds of orders of magnitude near t = T.
        let scale: Vec<f64> = (0..nu)
            .map(|k| {
                if hess[(k, k)] > 0.0 {
                    1.0 / hess[(k, k)].sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let mut scaled = hess.clone();
        for i in 0..nu {
            for j in 0..nu {
                scaled[(i, j)] *= scale[i] * scale[j];
            }
            if scale[i] == 0.0 {
                scaled[(i, i)] = 1.0;
            }
        }
        let b = DVector::from_iterator(nu, (0..nu).map(|k| -grad[k] * scale[k]));
        // Late controls outnumber the terminal states they can reach, so the
        // scaled matrix is only semidefinite to rounding; LU copes with that.
        let xs = scaled
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::LinearSolve("dense two-control system is singular".into()))?;
        let x = DVector::from_iterator(nu, (0..nu).map(|k| xs[k] * scale[k]));
        let functional = 0.5 * x.dot(&(&hess * &x)) + grad.dot(&x) + 0.5 * constant;
        let achieved = terminal
            .iter()
            .enumerate()
            .map(|(j, (l, y))| {
                let yt = l * &x + y;
                tree.probability(steps, j) * op.inner(yt.as_slice(), yt.as_slice())
            })
            .sum();
        Ok(DenseTwoControl {
            controls: x.iter().copied().collect(),
            functional,
            achieved,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::DiffusionCoefficient;
    use crate::setup::Resolution;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(m: usize, n: usize) -> Setup {
        Setup::new(
            DiffusionCoefficient::power_law(0.5).unwrap(),
            0.5,
            Resolution::new(m, n),
        )
    }

    #[test]
    fn cg_solves_diagonal_system() {
        let d = [1.0, 4.0, 9.0];
        let metric = [1.0, 2.0, 0.5];
        let rhs = [1.0, 1.0, 1.0];
        let out = conjugate_gradient(
            |u| Ok(u.iter().zip(&d).map(|(a, b)| a * b).collect()),
            &rhs,
            None,
            &metric,
            None,
            CgOptions::default(),
        )
        .unwrap();
        for i in 0..3 {
            assert!((out.x[i] - 1.0 / d[i]).abs() < 1e-12);
        }
        assert!(out.iterations <= 3);
    }

    #[test]
    fn cg_reports_non_convergence() {
        let err = conjugate_gradient(
            |u| {
                Ok(u.iter()
                    .enumerate()
                    .map(|(i, x)| (i + 1) as f64 * x)
                    .collect())
            },
            &[1.0; 10],
            None,
            &[1.0; 10],
            None,
            CgOptions {
                tol: 1e-14,
                max_iter: 2,
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::CgNotConverged { iterations: 2, .. }));
    }

    #[test]
    fn zero_terminal_gives_zero_control() {
        let st = setup(20, 5);
        let zero = StepField::zero(5, 20);
        let eta = vec![0.0; 20];
        let p = BackwardControlProblem {
            b: &zero,
            c: &zero,
            omega: Interval::new(0.3, 0.8).unwrap(),
            terminal: Terminal::Deterministic(&eta),
        };
        let res = null_control_backward(&st, &p, 0.1, CgOptions::default(), None).unwrap();
        assert_eq!(res.achieved, 0.0);
        assert_eq!(res.iterations, 0);
        match res.controls {
            Controls::Backward { v } => {
                assert!((0..5).all(|n| v.level(n).iter().all(|&x| x == 0.0)))
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn backward_operator_is_symmetric() {
        let st = setup(24, 6);
        let op = st.operator().unwrap();
        let c = StepField::constant(6, 24, 0.7);
        let b = StepField::constant(6, 24, -0.3);
        let eta = vec![0.0; 24];
        let p = BackwardControlProblem {
            b: &b,
            c: &c,
            omega: Interval::new(0.3, 0.8).unwrap(),
            terminal: Terminal::Deterministic(&eta),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..3 {
            let mut u: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut v: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
            op.project(&mut u);
            op.project(&mut v);
            let au = backward_hum_operator(&st, &p, 1e-2, &u).unwrap();
            let av = backward_hum_operator(&st, &p, 1e-2, &v).unwrap();
            let (l, r) = (op.inner(&au, &v), op.inner(&u, &av));
            assert!((l - r).abs() <= 1e-10 * l.abs().max(r.abs()), "{l} vs {r}");
            assert!(op.inner(&au, &u) > 0.0);
        }
    }

    #[test]
    fn two_control_zero_data_gives_zero_controls() {
        let st = setup(16, 4);
        let coef = st.coef.clone();
        let ws = WeightSystem::build(
            &coef,
            0.5,
            Interval::new(0.3, 0.8).unwrap(),
            Interval::new(0.47, 0.53).unwrap(),
            (0.25f64).powi(8),
            ThetaVariant::Bar,
        )
        .unwrap();
        let zero = StepField::zero(4, 16);
        let y0 = vec![0.0; 16];
        let p = TwoControlProblem {
            b: &zero,
            f: &zero,
            g: &zero,
            y0: &y0,
            weight_eps: None,
        };
        let res = two_control_forward(&st, &ws, &p, 0.1, CgOptions::default(), None).unwrap();
        assert_eq!(res.achieved, 0.0);
        assert!(res.minimizer.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn two_control_rejects_singular_time_weight() {
        let st = setup(16, 4);
        let ws = WeightSystem::build(
            &st.coef,
            0.5,
            Interval::new(0.3, 0.8).unwrap(),
            Interval::new(0.47, 0.53).unwrap(),
            1.0,
            ThetaVariant::Standard,
        )
        .unwrap();
        let zero = StepField::zero(4, 16);
        let y0 = vec![1.0; 16];
        let p = TwoControlProblem {
            b: &zero,
            f: &zero,
            g: &zero,
            y0: &y0,
            weight_eps: None,
        };
        assert!(two_control_forward(&st, &ws, &p, 0.1, CgOptions::default(), None).is_err());
    }

    #[test]
    fn schedule_halves_and_hits_targets() {
        let s = continuation_schedule(&[0.1, 0.01]);
        assert_eq!(s.first(), Some(&0.1));
        assert_eq!(s.last(), Some(&0.01));
        assert!(s
            .windows(2)
            .all(|w| w[1] < w[0] && w[1] >= w[0] / 2.0 - 1e-15));
    }

    #[test]
    fn log_sum_exp_matches_direct_sum() {
        let v = [0.1f64, -2.0, 3.0];
        let direct = v.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(v.iter().copied()) - direct).abs() < 1e-14);
        assert_eq!(log_sum_exp(std::iter::empty()), f64::NEG_INFINITY);
    }

    #[test]
    fn state_diagonal_matches_unit_responses() {
        let st = setup(12, 4);
        let op = st.operator().unwrap();
        let ws = WeightSystem::build(
            &st.coef,
            st.horizon,
            Interval::new(0.3, 0.8).unwrap(),
            Interval::new(0.47, 0.53).unwrap(),
            0.01,
            ThetaVariant::Bar,
        )
        .unwrap();
        let b = StepField::constant(4, 12, 0.4);
        let zero = StepField::zero(4, 12);
        let y0 = vec![0.0; 12];
        let p = TwoControlProblem {
            b: &b,
            f: &zero,
            g: &zero,
            y0: &y0,
            weight_eps: None,
        };
        let hum = TwoControlHum::new(&st, &op, &ws, &p, 0.05).unwrap();
        let diag = hum.state_diagonal();
        let metric = hum.metric();
        let none = vec![0.0; diag.len()];
        for k in [
            5,
            30,
            70,
            100,
            hum.layout.half + 6,
            hum.layout.half + 44,
            diag.len() - 3,
        ] {
            let mut e = vec![0.0; diag.len()];
            e[k] = 1.0;
            let ae = hum.hessian(&e, &none).unwrap();
            assert!(
                (ae[k] - diag[k]).abs() <= 1e-12 * diag[k].abs().max(1e-300),
                "{k}: {} vs {}",
                ae[k],
                diag[k]
            );
            assert!(metric[k] > 0.0);
        }
    }
}
