//! Forward and backward stochastic solvers on the noise tree.
//!
//! One step of the forward scheme reads
//!
//! ```text
//! y_{n+1} = P [ A_n y_n + dt f_n + (c_n y_n + g_n) dW_n ],
//! P = (W + theta dt S)^{-1} W,   A_n = I + (1 - theta) dt L + dt diag(b_n),
//! ```
//!
//! with `L = -W^{-1} S` the flux-form operator. The backward scheme is its
//! exact transpose in the `W`-weighted inner product: with
//! `zh_n = P E_n[z_{n+1}]` and `Zh_n = P k_n`,
//!
//! ```text
//! z_n = A_n zh_n + dt c_n Zh_n - dt src_n,
//! ```
//!
//! which makes the discrete duality identity hold to rounding error.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::noise::{AdaptedField, Filtration, NoiseTree};
use crate::spacegrid::DegenerateOperator;
use crate::tridiag::TridiagFactor;

/// Default implicitness on the diffusion: Crank-Nicolson.
/// Fully implicit steps at the start of a run.
pub const DEFAULT_STARTUP: usize = 2;

pub const DEFAULT_THETA: f64 = 0.5;

/// A deterministic function of `(t_n, x_i)` sampled for steps `n = 0..N-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepField {
    steps: usize,
    m: usize,
    data: Option<Vec<f64>>,
}

impl StepField {
    pub fn zero(steps: usize, m: usize) -> Self {
        StepField {
            steps,
            m,
            data: None,
        }
    }

    pub fn constant(steps: usize, m: usize, value: f64) -> Self {
        if value == 0.0 {
            return Self::zero(steps, m);
        }
        StepField {
            steps,
            m,
            data: Some(vec![value; steps * m]),
        }
    }

    /// `f(n, i)` for step `n` and node `i`.
    pub fn from_fn(steps: usize, m: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(steps * m);
        for n in 0..steps {
            for i in 0..m {
                data.push(f(n, i));
            }
        }
        StepField {
            steps,
            m,
            data: Some(data),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.data.is_none()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn spatial_len(&self) -> usize {
        self.m
    }

    pub fn row(&self, n: usize) -> Option<&[f64]> {
        self.data.as_ref().map(|d| &d[n * self.m..(n + 1) * self.m])
    }

    pub fn sup_norm(&self) -> f64 {
        self.data
            .as_ref()
            .map(|d| d.iter().fold(0.0f64, |a, v| a.max(v.abs())))
            .unwrap_or(0.0)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        StepField {
            steps: self.steps,
            m: self.m,
            data: self
                .data
                .as_ref()
                .map(|d| d.iter().map(|v| v * factor).collect()),
        }
    }
}

/// Right-hand side entering one step: absent, deterministic, or adapted.
#[derive(Debug, Clone, Copy)]
pub enum Source<'a> {
    Zero,
    Deterministic(&'a StepField),
    Adapted(&'a AdaptedField),
}

impl<'a> Source<'a> {
    pub fn node(&self, n: usize, j: usize) -> Option<&'a [f64]> {
        match self {
            Source::Zero => None,
            Source::Deterministic(f) => f.row(n),
            Source::Adapted(f) => Some(f.node(n, j)),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Source::Zero => true,
            Source::Deterministic(f) => f.is_zero(),
            Source::Adapted(_) => false,
        }
    }
}

/// Terminal condition of a backward problem.
#[derive(Debug, Clone, Copy)]
pub enum Terminal<'a> {
    /// Same spatial vector at every terminal node.
    Deterministic(&'a [f64]),
    /// Flat level-`N` values, one vector per node.
    Level(&'a [f64]),
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardProblem<'a> {
    pub b: &'a StepField,
    pub c: &'a StepField,
    pub f: Source<'a>,
    pub g: Source<'a>,
    pub y0: &'a [f64],
}

#[derive(Debug, Clone, Copy)]
pub struct BackwardProblem<'a> {
    pub b: &'a StepField,
    pub c: &'a StepField,
    pub terminal: Terminal<'a>,
    pub terminal_scale: f64,
    /// `src_n`, entering as `- dt src_n` in step `n`.
    pub source: Source<'a>,
}

/// `(z, k)` together with the intermediate adjoint states of each step.
#[derive(Debug, Clone)]
pub struct BackwardSolution {
    /// Levels `0..=N`.
    pub z: AdaptedField,
    /// Martingale coefficient of `z_{n+1}` given level `n`, levels `0..N`.
    pub k: AdaptedField,
    /// `P E_n[z_{n+1}]`, pairs with drift sources of the forward equation.
    pub drift_adjoint: AdaptedField,
    /// `P k_n`, pairs with noise sources of the forward equation.
    pub noise_adjoint: AdaptedField,
}

/// Mean and second-moment matrix of a forward solution at every level.
#[derive(Debug, Clone)]
pub struct ForwardMoments {
    pub mean: Vec<Vec<f64>>,
    /// `E[y_n y_n^T]`.
    pub second: Vec<DMatrix<f64>>,
}

/// Per-level summary of a field.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LevelStats {
    pub level: usize,
    pub t: f64,
    pub mean_sq_norm: f64,
    pub mean_energy: f64,
}

/// Terms of the discrete duality identity
/// `E<z_N, y_N> - <z_0, y_0> = E sum dt (<src, y> + <zh, f> + <Zh, g>)`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DualityTerms {
    pub terminal: f64,
    pub initial: f64,
    pub source: f64,
    pub drift: f64,
    pub noise: f64,
    pub residual: f64,
}

/// Time stepping on a fixed operator.
#[derive(Debug, Clone)]
pub struct Solver<'a> {
    op: &'a DegenerateOperator,
    dt: f64,
    theta: f64,
    factor: TridiagFactor,
    /// Leading steps taken as two implicit half steps each, which damps the
    /// stiff components that the trapezoidal rule would carry along undamped.
    startup: usize,
    startup_factor: Option<TridiagFactor>,
}

impl<'a> Solver<'a> {
    pub fn new(op: &'a DegenerateOperator, dt: f64, theta: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::Parameter("time step must be positive".into()));
        }
        if !(0.5..=1.0).contains(&theta) {
            return Err(Error::Parameter(format!(
                "implicitness must lie in [0.5, 1], got {theta}"
            )));
        }
        let factor = op.factor_shifted(theta * dt)?;
        Ok(Solver {
            op,
            dt,
            theta,
            factor,
            startup: 0,
            startup_factor: None,
        })
    }

    /// Replace each of the first `steps` steps by two fully implicit half
    /// steps; the explicit part of those steps reduces to `I + dt b_n`.
    pub fn with_startup(mut self, steps: usize) -> Result<Self> {
        self.startup = steps;
        self.startup_factor = if steps > 0 {
            Some(self.op.factor_shifted(0.5 * self.dt)?)
        } else {
            None
        };
        Ok(self)
    }

    pub fn startup(&self) -> usize {
        self.startup
    }

    /// Implicitness used in step `n`.
    pub fn theta_at(&self, n: usize) -> f64 {
        if n < self.startup {
            1.0
        } else {
            self.theta
        }
    }

    pub fn op(&self) -> &DegenerateOperator {
        self.op
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    fn m(&self) -> usize {
        self.op.len()
    }

    /// `r <- P_n r`.
    pub fn propagate(&self, n: usize, r: &mut [f64]) {
        for (v, w) in r.iter_mut().zip(self.op.weights()) {
            *v *= w;
        }
        match &self.startup_factor {
            Some(f) if n < self.startup => {
                f.solve_in_place(r);
                for (v, w) in r.iter_mut().zip(self.op.weights()) {
                    *v *= w;
                }
                f.solve_in_place(r);
            }
            _ => self.factor.solve_in_place(r),
        }
    }

    /// `out = A_n u = u + (1 - theta_n) dt L u + dt b_n u`, pinned entries zeroed.
    pub fn apply_explicit(&self, n: usize, b: Option<&[f64]>, u: &[f64], out: &mut [f64]) {
        self.op.apply(u, out);
        let ex = (1.0 - self.theta_at(n)) * self.dt;
        for i in 0..u.len() {
            out[i] = u[i] + ex * out[i];
        }
        if let Some(b) = b {
            for i in 0..u.len() {
                out[i] += self.dt * b[i] * u[i];
            }
        }
        self.op.project(out);
    }

    fn check_coefficients(&self, steps: usize, fields: &[&StepField]) -> Result<()> {
        for f in fields {
            if f.spatial_len() != self.m() || f.steps() < steps {
                return Err(Error::Mismatch(format!(
                    "coefficient field is {}x{}, solver needs {}x{}",
                    f.steps(),
                    f.spatial_len(),
                    steps,
                    self.m()
                )));
            }
        }
        Ok(())
    }

    fn check_source(&self, steps: usize, source: &Source) -> Result<()> {
        match source {
            Source::Zero => Ok(()),
            Source::Deterministic(f) => self.check_coefficients(steps, &[f]),
            Source::Adapted(f) => {
                if f.spatial_len() != self.m() || f.depth() + 1 < steps {
                    Err(Error::Mismatch("adapted source has the wrong shape".into()))
                } else {
                    Ok(())
                }
            }
        }
    }

    fn check_dt<F: Filtration + ?Sized>(&self, filtration: &F) -> Result<()> {
        if (filtration.dt() - self.dt).abs() > 1e-14 * self.dt {
            return Err(Error::Mismatch(format!(
                "filtration step {} differs from solver step {}",
                filtration.dt(),
                self.dt
            )));
        }
        Ok(())
    }

    /// Solve the forward equation on every node of the tree.
    pub fn forward(&self, tree: &NoiseTree, p: &ForwardProblem) -> Result<AdaptedField> {
        let steps = tree.steps();
        let m = self.m();
        self.check_dt(tree)?;
        self.check_coefficients(steps, &[p.b, p.c])?;
        self.check_source(steps, &p.f)?;
        self.check_source(steps, &p.g)?;
        if p.y0.len() != m {
            return Err(Error::Mismatch("initial datum has the wrong length".into()));
        }
        let mut y = AdaptedField::zeros(tree, m);
        {
            let y0 = y.node_mut(0, 0);
            y0.copy_from_slice(p.y0);
            self.op.project(y0);
        }
        let sq = tree.sqrt_dt();
        for n in 0..steps {
            let (b, c) = (p.b.row(n), p.c.row(n));
            let current = y.level(n).to_vec();
            let next = y.level_mut(n + 1);
            next.par_chunks_mut(2 * m).enumerate().for_each_init(
                || (vec![0.0; m], vec![0.0; m]),
                |(drift, noise), (j, pair)| {
                    let yn = &current[j * m..(j + 1) * m];
                    self.apply_explicit(n, b, yn, drift);
                    if let Some(f) = p.f.node(n, j) {
                        for i in 0..m {
                            drift[i] += self.dt * f[i];
                        }
                    }
                    for i in 0..m {
                        noise[i] = c.map_or(0.0, |c| c[i] * yn[i]);
                    }
                    if let Some(g) = p.g.node(n, j) {
                        for i in 0..m {
                            noise[i] += g[i];
                        }
                    }
                    let (up, down) = pair.split_at_mut(m);
                    for i in 0..m {
                        up[i] = drift[i] + sq * noise[i];
                        down[i] = drift[i] - sq * noise[i];
                    }
                    self.propagate(n, up);
                    self.propagate(n, down);
                },
            );
        }
        Ok(y)
    }

    /// Forward solve along one path of increments (Monte Carlo backend).
    /// Sources must be deterministic.
    pub fn forward_path(&self, p: &ForwardProblem, increments: &[f64]) -> Result<Vec<Vec<f64>>> {
        let steps = increments.len();
        let m = self.m();
        self.check_coefficients(steps, &[p.b, p.c])?;
        for s in [&p.f, &p.g] {
            if matches!(s, Source::Adapted(_)) {
                return Err(Error::Mismatch(
                    "path solves accept deterministic sources only".into(),
                ));
            }
            self.check_source(steps, s)?;
        }
        let mut y = p.y0.to_vec();
        self.op.project(&mut y);
        let mut out = Vec::with_capacity(steps + 1);
        out.push(y.clone());
        let mut next = vec![0.0; m];
        for (n, &dw) in increments.iter().enumerate() {
            self.apply_explicit(n, p.b.row(n), &y, &mut next);
            if let Some(f) = p.f.node(n, 0) {
                for i in 0..m {
                    next[i] += self.dt * f[i];
                }
            }
            let c = p.c.row(n);
            let g = p.g.node(n, 0);
            for i in 0..m {
                let noise = c.map_or(0.0, |c| c[i] * y[i]) + g.map_or(0.0, |g| g[i]);
                next[i] += dw * noise;
            }
            self.propagate(n, &mut next);
            std::mem::swap(&mut y, &mut next);
            out.push(y.clone());
        }
        Ok(out)
    }

    /// Dense matrix of `P_n` (full size, pinned rows and columns zero).
    pub fn dense_propagator(&self, n: usize) -> DMatrix<f64> {
        let m = self.m();
        let mut p = DMatrix::zeros(m, m);
        let mut col = vec![0.0; m];
        for i in 0..m {
            col.fill(0.0);
            col[i] = 1.0;
            self.propagate(n, &mut col);
            p.set_column(i, &nalgebra::DVector::from_column_slice(&col));
        }
        p
    }

    /// Exact tree moments of the forward solution for deterministic data,
    /// without enumerating the `2^N` nodes.
    pub fn forward_moments(&self, steps: usize, p: &ForwardProblem) -> Result<ForwardMoments> {
        let m = self.m();
        self.check_coefficients(steps, &[p.b, p.c])?;
        for s in [&p.f, &p.g] {
            if matches!(s, Source::Adapted(_)) {
                return Err(Error::Mismatch(
                    "moment recursion accepts deterministic sources only".into(),
                ));
            }
            self.check_source(steps, s)?;
        }
        let mut mean = p.y0.to_vec();
        self.op.project(&mut mean);
        let mut second = DMatrix::from_fn(m, m, |i, j| mean[i] * mean[j]);
        let mut means = vec![mean.clone()];
        let mut seconds = vec![second.clone()];
        let mut col = vec![0.0; m];
        let mut tmp = vec![0.0; m];
        for n in 0..steps {
            let b = p.b.row(n);
            let c = p.c.row(n);
            let f = p.f.node(n, 0);
            let g = p.g.node(n, 0);
            // am = A m, u = A m + dt f.
            let mut u = vec![0.0; m];
            self.apply_explicit(n, b, &mean, &mut u);
            if let Some(f) = f {
                for i in 0..m {
                    u[i] += self.dt * f[i];
                }
            }
            // X = A R A^T + dt (A m f^T + f m^T A^T) + dt^2 f f^T
            //   + dt (D_c R D_c + D_c m g^T + g m^T D_c + g g^T).
            let mut ar = DMatrix::zeros(m, m);
            for j in 0..m {
                col.copy_from_slice(second.column(j).as_slice());
                self.apply_explicit(n, b, &col, &mut tmp);
                ar.set_column(j, &nalgebra::DVector::from_column_slice(&tmp));
            }
            let art = ar.transpose();
            let mut x = DMatrix::zeros(m, m);
            for j in 0..m {
                col.copy_from_slice(art.column(j).as_slice());
                self.apply_explicit(n, b, &col, &mut tmp);
                x.set_column(j, &nalgebra::DVector::from_column_slice(&tmp));
            }
            // Mean-dependent terms: the outer product u u^T replaces the
            // deterministic part A m m^T A^T, so add u u^T - (A m)(A m)^T.
            let mut am = vec![0.0; m];
            self.apply_explicit(n, b, &mean, &mut am);
            for i in 0..m {
                for j in 0..m {
                    x[(i, j)] += u[i] * u[j] - am[i] * am[j];
                }
            }
            let cm: Vec<f64> = (0..m).map(|i| c.map_or(0.0, |c| c[i] * mean[i])).collect();
            for i in 0..m {
                let ci = c.map_or(0.0, |c| c[i]);
                let gi = g.map_or(0.0, |g| g[i]);
                for j in 0..m {
                    let cj = c.map_or(0.0, |c| c[j]);
                    let gj = g.map_or(0.0, |g| g[j]);
                    x[(i, j)] +=
                        self.dt * (ci * second[(i, j)] * cj + cm[i] * gj + gi * cm[j] + gi * gj);
                }
            }
            // R' = P X P^T.
            let mut px = DMatrix::zeros(m, m);
            for j in 0..m {
                col.copy_from_slice(x.column(j).as_slice());
                self.propagate(n, &mut col);
                px.set_column(j, &nalgebra::DVector::from_column_slice(&col));
            }
            let pxt = px.transpose();
            for j in 0..m {
                col.copy_from_slice(pxt.column(j).as_slice());
                self.propagate(n, &mut col);
                second.set_column(j, &nalgebra::DVector::from_column_slice(&col));
            }
            second = (&second + second.transpose()) * 0.5;
            self.propagate(n, &mut u);
            mean = u;
            means.push(mean.clone());
            seconds.push(second.clone());
        }
        Ok(ForwardMoments {
            mean: means,
            second: seconds,
        })
    }

    /// Solve the backward equation on any two-successor filtration.
    pub fn backward<F: Filtration + ?Sized>(
        &self,
        filtration: &F,
        p: &BackwardProblem,
    ) -> Result<BackwardSolution> {
        let steps = filtration.steps();
        let m = self.m();
        self.check_dt(filtration)?;
        self.check_coefficients(steps, &[p.b, p.c])?;
        self.check_source(steps, &p.source)?;
        if let Source::Adapted(f) = p.source {
            if f.nodes_at(0) != filtration.nodes_at(0)
                || (steps > 0 && f.nodes_at(steps - 1) != filtration.nodes_at(steps - 1))
            {
                return Err(Error::Mismatch("source lives on another filtration".into()));
            }
        }
        let mut z = AdaptedField::zeros(filtration, m);
        let mut k = AdaptedField::zeros_to(filtration, m, steps.saturating_sub(1));
        let mut zh = k.clone();
        let mut kh = k.clone();
        {
            let terminal = z.level_mut(steps);
            match p.terminal {
                Terminal::Deterministic(v) => {
                    if v.len() != m {
                        return Err(Error::Mismatch(
                            "terminal vector has the wrong length".into(),
                        ));
                    }
                    for chunk in terminal.chunks_mut(m) {
                        chunk.copy_from_slice(v);
                    }
                }
                Terminal::Level(v) => {
                    if v.len() != terminal.len() {
                        return Err(Error::Mismatch("terminal level has the wrong size".into()));
                    }
                    terminal.copy_from_slice(v);
                }
            }
            for chunk in terminal.chunks_mut(m) {
                for v in chunk.iter_mut() {
                    *v *= p.terminal_scale;
                }
                self.op.project(chunk);
            }
        }
        let half_inv_sq = 0.5 / filtration.sqrt_dt();
        for n in (0..steps).rev() {
            let (b, c) = (p.b.row(n), p.c.row(n));
            let next = z.level(n + 1).to_vec();
            let nodes = filtration.nodes_at(n);
            let results: Vec<(usize, Vec<f64>)> = (0..nodes)
                .into_par_iter()
                .map(|j| {
                    let up = &next[filtration.up_child(n, j) * m..][..m];
                    let down = &next[filtration.down_child(n, j) * m..][..m];
                    let mut e: Vec<f64> = (0..m).map(|i| 0.5 * (up[i] + down[i])).collect();
                    let kk: Vec<f64> = (0..m).map(|i| (up[i] - down[i]) * half_inv_sq).collect();
                    let mut kp = kk.clone();
                    self.propagate(n, &mut e);
                    self.propagate(n, &mut kp);
                    let mut zn = vec![0.0; m];
                    self.apply_explicit(n, b, &e, &mut zn);
                    if let Some(c) = c {
                        for i in 0..m {
                            zn[i] += self.dt * c[i] * kp[i];
                        }
                    }
                    if let Some(src) = p.source.node(n, j) {
                        for i in 0..m {
                            zn[i] -= self.dt * src[i];
                        }
                    }
                    self.op.project(&mut zn);
                    let mut packed = Vec::with_capacity(4 * m);
                    packed.extend_from_slice(&zn);
                    packed.extend_from_slice(&kk);
                    packed.extend_from_slice(&e);
                    packed.extend_from_slice(&kp);
                    (j, packed)
                })
                .collect();
            for (j, packed) in results {
                z.node_mut(n, j).copy_from_slice(&packed[..m]);
                k.node_mut(n, j).copy_from_slice(&packed[m..2 * m]);
                zh.node_mut(n, j).copy_from_slice(&packed[2 * m..3 * m]);
                kh.node_mut(n, j).copy_from_slice(&packed[3 * m..]);
            }
        }
        Ok(BackwardSolution {
            z,
            k,
            drift_adjoint: zh,
            noise_adjoint: kh,
        })
    }

    /// Evaluate every term of the duality identity between a forward solution
    /// `y` (with sources `f`, `g`) and a backward solution with source `src`.
    pub fn duality_terms<F: Filtration + ?Sized>(
        &self,
        filtration: &F,
        y: &AdaptedField,
        f: Source,
        g: Source,
        back: &BackwardSolution,
        src: Source,
    ) -> Result<DualityTerms> {
        let steps = filtration.steps();
        if y.depth() != steps || back.z.depth() != steps || y.spatial_len() != self.m() {
            return Err(Error::Mismatch(
                "forward and backward fields differ in shape".into(),
            ));
        }
        if y.nodes_at(steps) != back.z.nodes_at(steps) {
            return Err(Error::Mismatch(
                "forward and backward filtrations differ".into(),
            ));
        }
        let terminal = self.expect_pair(filtration, steps, Source::Adapted(y), &back.z);
        let initial = self.op.inner(y.node(0, 0), back.z.node(0, 0));
        let (mut source, mut drift, mut noise) = (0.0, 0.0, 0.0);
        for n in 0..steps {
            source += self.dt * self.expect_pair(filtration, n, src, y);
            drift += self.dt * self.expect_pair(filtration, n, f, &back.drift_adjoint);
            noise += self.dt * self.expect_pair(filtration, n, g, &back.noise_adjoint);
        }
        let scale = terminal.abs() + initial.abs() + source.abs() + drift.abs() + noise.abs();
        let defect = terminal - initial - source - drift - noise;
        let residual = if scale > 0.0 {
            defect.abs() / scale
        } else {
            0.0
        };
        Ok(DualityTerms {
            terminal,
            initial,
            source,
            drift,
            noise,
            residual,
        })
    }

    /// `E <a_n, b_n>` over the nodes of level `n`.
    fn expect_pair<F: Filtration + ?Sized>(
        &self,
        filtration: &F,
        n: usize,
        a: Source,
        b: &AdaptedField,
    ) -> f64 {
        if a.is_zero() {
            return 0.0;
        }
        let terms: Vec<f64> = (0..filtration.nodes_at(n))
            .into_par_iter()
            .map(|j| match a.node(n, j) {
                Some(v) => filtration.probability(n, j) * self.op.inner(v, b.node(n, j)),
                None => 0.0,
            })
            .collect();
        terms.iter().sum()
    }

    /// Mean squared norm and mean energy of a field at every level.
    pub fn level_statistics<F: Filtration + ?Sized>(
        &self,
        filtration: &F,
        field: &AdaptedField,
    ) -> Vec<LevelStats> {
        let m = self.m();
        (0..=field.depth())
            .map(|n| {
                let (mut sq, mut en) = (0.0, 0.0);
                for (j, v) in field.level(n).chunks(m).enumerate() {
                    let p = filtration.probability(n, j);
                    sq += p * self.op.norm_sq(v);
                    en += p * self.op.energy(v);
                }
                LevelStats {
                    level: n,
                    t: filtration.time(n),
                    mean_sq_norm: sq,
                    mean_energy: en,
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::DiffusionCoefficient;
    use crate::noise::RecombiningLattice;
    use crate::spacegrid::SpatialGrid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn heat_op(alpha: f64, m: usize) -> DegenerateOperator {
        let a = DiffusionCoefficient::power_law(alpha).unwrap();
        DegenerateOperator::assemble(&a, SpatialGrid::uniform(m).unwrap()).unwrap()
    }

    fn random_field<F: Filtration>(f: &F, m: usize, depth: usize, seed: u64) -> AdaptedField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = AdaptedField::zeros_to(f, m, depth);
        for n in 0..=depth {
            for v in out.level_mut(n) {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        out
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let op = heat_op(0.5, 20);
        let tree = NoiseTree::new(0.1, 5).unwrap();
        let s = Solver::new(&op, tree.dt(), DEFAULT_THETA).unwrap();
        let zero = StepField::zero(5, 20);
        let c = StepField::constant(5, 20, 1.0);
        let y0 = vec![0.0; 20];
        let y = s
            .forward(
                &tree,
                &ForwardProblem {
                    b: &zero,
                    c: &c,
                    f: Source::Zero,
                    g: Source::Zero,
                    y0: &y0,
                },
            )
            .unwrap();
        assert!(y.level(5).iter().all(|&v| v == 0.0));
        let back = s
            .backward(
                &tree,
                &BackwardProblem {
                    b: &zero,
                    c: &c,
                    terminal: Terminal::Deterministic(&y0),
                    terminal_scale: 1.0,
                    source: Source::Zero,
                },
            )
            .unwrap();
        assert!(back.z.level(0).iter().all(|&v| v == 0.0));
        assert!(back.k.level(4).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_backward_data_has_no_martingale_part() {
        let op = heat_op(1.5, 24);
        let tree = NoiseTree::new(0.2, 6).unwrap();
        let s = Solver::new(&op, tree.dt(), DEFAULT_THETA).unwrap();
        let zero = StepField::zero(6, 24);
        let src = StepField::from_fn(6, 24, |n, i| (n as f64 + 1.0) * (i as f64 * 0.3).sin());
        let eta: Vec<f64> = op.nodes().iter().map(|x| 1.0 - x * x).collect();
        let back = s
            .backward(
                &tree,
                &BackwardProblem {
                    b: &zero,
                    c: &zero,
                    terminal: Terminal::Deterministic(&eta),
                    terminal_scale: 1.0,
                    source: Source::Deterministic(&src),
                },
            )
            .unwrap();
        for n in 0..6 {
            assert!(back.k.level(n).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn heat_kernel_backward() {
        let op = heat_op(0.0, 200);
        let lattice = RecombiningLattice::new(0.1, 12).unwrap();
        let s = Solver::new(&op, lattice.dt(), DEFAULT_THETA).unwrap();
        let zero = StepField::zero(12, 200);
        let eta: Vec<f64> = op.nodes().iter().map(|x| (PI * x).sin()).collect();
        let back = s
            .backward(
                &lattice,
                &BackwardProblem {
                    b: &zero,
                    c: &zero,
                    terminal: Terminal::Deterministic(&eta),
                    terminal_scale: 1.0,
                    source: Source::Zero,
                },
            )
            .unwrap();
        let decay = (-PI * PI * 0.1f64).exp();
        let exact: Vec<f64> = eta.iter().map(|v| decay * v).collect();
        let err: Vec<f64> = back
            .z
            .node(0, 0)
            .iter()
            .zip(&exact)
            .map(|(a, b)| a - b)
            .collect();
        assert!((op.norm_sq(&err) / op.norm_sq(&exact)).sqrt() < 0.02);
    }

    #[test]
    fn duality_holds_with_all_sources() {
        let op = heat_op(0.5, 16);
        let tree = NoiseTree::new(0.3, 6).unwrap();
        let s = Solver::new(&op, tree.dt(), 0.7)
            .unwrap()
            .with_startup(2)
            .unwrap();
        let b = StepField::from_fn(6, 16, |n, i| 0.3 * ((n + i) as f64).cos());
        let c = StepField::from_fn(6, 16, |n, i| 0.8 * ((n * i) as f64 * 0.1).sin());
        let f = random_field(&tree, 16, 5, 1);
        let g = random_field(&tree, 16, 5, 2);
        let src = random_field(&tree, 16, 5, 3);
        let eta = random_field(&tree, 16, 6, 4);
        let y0: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
        let y = s
            .forward(
                &tree,
                &ForwardProblem {
                    b: &b,
                    c: &c,
                    f: Source::Adapted(&f),
                    g: Source::Adapted(&g),
                    y0: &y0,
                },
            )
            .unwrap();
        let back = s
            .backward(
                &tree,
                &BackwardProblem {
                    b: &b,
                    c: &c,
                    terminal: Terminal::Level(eta.level(6)),
                    terminal_scale: 1.0,
                    source: Source::Adapted(&src),
                },
            )
            .unwrap();
        let d = s
            .duality_terms(
                &tree,
                &y,
                Source::Adapted(&f),
                Source::Adapted(&g),
                &back,
                Source::Adapted(&src),
            )
            .unwrap();
        assert!(d.residual < 1e-13, "{d:?}");
    }

    #[test]
    fn moments_match_tree_enumeration() {
        let op = heat_op(1.5, 14);
        let tree = NoiseTree::new(0.4, 7).unwrap();
        let s = Solver::new(&op, tree.dt(), DEFAULT_THETA)
            .unwrap()
            .with_startup(2)
            .unwrap();
        let b = StepField::from_fn(7, 14, |n, i| 0.5 * ((n + 2 * i) as f64).sin());
        let c = StepField::from_fn(7, 14, |n, i| 0.9 * ((3 * n + i) as f64).cos());
        let f = StepField::from_fn(7, 14, |n, i| ((n * i) as f64 * 0.2).cos());
        let g = StepField::from_fn(7, 14, |n, i| 0.4 * ((n + i) as f64 * 0.5).sin());
        let y0: Vec<f64> = op
            .nodes()
            .iter()
            .map(|x| (1.0 - x) * (3.0 * x).cos())
            .collect();
        let p = ForwardProblem {
            b: &b,
            c: &c,
            f: Source::Deterministic(&f),
            g: Source::Deterministic(&g),
            y0: &y0,
        };
        let y = s.forward(&tree, &p).unwrap();
        let mom = s.forward_moments(7, &p).unwrap();
        for n in 0..=7 {
            let mean = y.expectation(&tree, n);
            let mut second = DMatrix::<f64>::zeros(14, 14);
            for j in 0..(1 << n) {
                let v = y.node(n, j);
                for a in 0..14 {
                    for bb in 0..14 {
                        second[(a, bb)] += tree.probability(n, j) * v[a] * v[bb];
                    }
                }
            }
            let scale = second.amax().max(1e-300);
            assert!((&second - &mom.second[n]).amax() / scale < 1e-12);
            for i in 0..14 {
                assert!((mean[i] - mom.mean[n][i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mean_follows_deterministic_scheme() {
        let op = heat_op(0.5, 18);
        let tree = NoiseTree::new(0.25, 8).unwrap();
        let s = Solver::new(&op, tree.dt(), DEFAULT_THETA).unwrap();
        let b = StepField::from_fn(8, 18, |n, i| ((n + i) as f64).sin());
        let c = StepField::constant(8, 18, 1.3);
        let y0: Vec<f64> = op.nodes().iter().map(|x| x * (1.0 - x)).collect();
        let p = ForwardProblem {
            b: &b,
            c: &c,
            f: Source::Zero,
            g: Source::Zero,
            y0: &y0,
        };
        let y = s.forward(&tree, &p).unwrap();
        let mut mean = y0.clone();
        op.project(&mut mean);
        let mut next = vec![0.0; 18];
        for n in 0..8 {
            s.apply_explicit(n, b.row(n), &mean, &mut next);
            s.propagate(n, &mut next);
            std::mem::swap(&mut mean, &mut next);
            let e = y.expectation(&tree, n + 1);
            for i in 0..18 {
                assert!((e[i] - mean[i]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn path_solve_matches_tree_path() {
        let op = heat_op(0.5, 12);
        let tree = NoiseTree::new(0.5, 5).unwrap();
        let s = Solver::new(&op, tree.dt(), DEFAULT_THETA).unwrap();
        let zero = StepField::zero(5, 12);
        let c = StepField::constant(5, 12, 0.7);
        let y0: Vec<f64> = op.nodes().iter().map(|x| (PI * x).sin()).collect();
        let p = ForwardProblem {
            b: &zero,
            c: &c,
            f: Source::Zero,
            g: Source::Zero,
            y0: &y0,
        };
        let y = s.forward(&tree, &p).unwrap();
        let node = 0b10110;
        let inc: Vec<f64> = (0..5).map(|k| tree.increment(5, node, k)).collect();
        let path = s.forward_path(&p, &inc).unwrap();
        for i in 0..12 {
            assert!((path[5][i] - y.node(5, node)[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_mismatched_steps() {
        let op = heat_op(0.5, 12);
        let tree = NoiseTree::new(0.5, 5).unwrap();
        let s = Solver::new(&op, 0.2, DEFAULT_THETA).unwrap();
        let zero = StepField::zero(5, 12);
        let y0 = vec![0.0; 12];
        let p = ForwardProblem {
            b: &zero,
            c: &zero,
            f: Source::Zero,
            g: Source::Zero,
            y0: &y0,
        };
        assert!(matches!(s.forward(&tree, &p), Err(Error::Mismatch(_))));
        assert!(Solver::new(&op, 0.1, 0.3).is_err());
    }
}
