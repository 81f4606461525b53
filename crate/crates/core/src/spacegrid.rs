//! Flux-form finite differences for `u -> (a u_x)_x` on `[0, 1]`, the
//! discrete weighted norms, and the discrete Hardy-Poincaré constant.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::coeff::{DegeneracyClass, DiffusionCoefficient};
use crate::error::{Error, Result};
use crate::tridiag::TridiagFactor;

/// Nodes `0 = x_0 < ... < x_{M-1} = 1` with dual-cell quadrature weights.
#[derive(Debug, Clone)]
pub struct SpatialGrid {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

/// How the grid is spaced.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Grading {
    #[default]
    Uniform,
    /// Each cell is `ratio` times wider than its left neighbour.
    Geometric { ratio: f64 },
    /// Geometric grading whose first cell has width `h_min`.
    MinSpacing { h_min: f64 },
}

impl SpatialGrid {
    pub fn uniform(m: usize) -> Result<Self> {
        Self::geometric(m, 1.0)
    }

    pub fn geometric(m: usize, ratio: f64) -> Result<Self> {
        if m < 4 {
            return Err(Error::GridTooSmall(m));
        }
        if !(ratio.is_finite() && ratio >= 1.0) {
            return Err(Error::Parameter(format!(
                "grading ratio must be >= 1, got {ratio}"
            )));
        }
        let cells = m - 1;
        let widths: Vec<f64> = (0..cells).map(|i| ratio.powi(i as i32)).collect();
        Self::from_widths(&widths)
    }

    /// Geometric grading with prescribed first-cell width `h_min < 1 / (M-1)`.
    pub fn with_min_spacing(m: usize, h_min: f64) -> Result<Self> {
        if m < 4 {
            return Err(Error::GridTooSmall(m));
        }
        let cells = (m - 1) as f64;
        if !(h_min > 0.0 && h_min * cells <= 1.0) {
            return Err(Error::Parameter(format!(
                "minimum spacing {h_min} incompatible with {m} nodes"
            )));
        }
        let total = |r: f64| -> f64 {
            if (r - 1.0).abs() < 1e-14 {
                h_min * cells
            } else {
                h_min * (r.powf(cells) - 1.0) / (r - 1.0)
            }
        };
        let (mut lo, mut hi) = (1.0f64, 2.0f64);
        while total(hi) < 1.0 {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if total(mid) < 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Self::geometric(m, 0.5 * (lo + hi))
    }

    pub fn build(m: usize, grading: Grading) -> Result<Self> {
        match grading {
            Grading::Uniform => Self::uniform(m),
            Grading::Geometric { ratio } => Self::geometric(m, ratio),
            Grading::MinSpacing { h_min } => Self::with_min_spacing(m, h_min),
        }
    }

    /// Build from relative cell widths (rescaled to total length 1).
    pub fn from_widths(widths: &[f64]) -> Result<Self> {
        let total: f64 = widths.iter().sum();
        let mut nodes = Vec::with_capacity(widths.len() + 1);
        nodes.push(0.0);
        let mut acc = 0.0;
        for w in widths {
            acc += w / total;
            nodes.push(acc);
        }
        *nodes.last_mut().unwrap() = 1.0;
        Self::from_nodes(nodes)
    }

    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        let m = nodes.len();
        if m < 4 {
            return Err(Error::GridTooSmall(m));
        }
        if nodes[0] != 0.0 || nodes[m - 1] != 1.0 {
            return Err(Error::Parameter("grid must span [0, 1]".into()));
        }
        for i in 0..m - 1 {
            if !(nodes[i + 1] > nodes[i]) {
                return Err(Error::DegenerateCell(i, i + 1));
            }
        }
        let mut weights = vec![0.0; m];
        for i in 0..m - 1 {
            let h = nodes[i + 1] - nodes[i];
            weights[i] += 0.5 * h;
            weights[i + 1] += 0.5 * h;
        }
        Ok(SpatialGrid { nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Dual-cell widths; they sum to 1.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn width(&self, cell: usize) -> f64 {
        self.nodes[cell + 1] - self.nodes[cell]
    }

    pub fn midpoint(&self, cell: usize) -> f64 {
        0.5 * (self.nodes[cell] + self.nodes[cell + 1])
    }
}

/// Boundary conditions at `x = 0` (the right end is always Dirichlet).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundaryRegime {
    /// `u(0) = u(1) = 0`.
    Dirichlet,
    /// `(a u_x)(0) = 0`, `u(1) = 0`.
    FluxFreeLeft,
}

impl BoundaryRegime {
    pub fn for_class(class: DegeneracyClass) -> Self {
        match class {
            DegeneracyClass::Strong => BoundaryRegime::FluxFreeLeft,
            _ => BoundaryRegime::Dirichlet,
        }
    }
}

/// The four discrete weighted quantities of a grid function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightedNorms {
    /// `\int u^2`.
    pub l2: f64,
    /// `\int a u_x^2`.
    pub energy: f64,
    /// `\int (x^2 / a) u^2`.
    pub x2_over_a: f64,
    /// `\int (a / x^2) u^2`, sampled at cell midpoints only.
    pub a_over_x2: f64,
}

/// Discrete `L u = W^{-1}(-S) u` where `S` is the symmetric flux stiffness
/// matrix and `W` the diagonal of dual-cell widths.
#[derive(Debug, Clone)]
pub struct DegenerateOperator {
    grid: SpatialGrid,
    coef: DiffusionCoefficient,
    bc: BoundaryRegime,
    /// `a(x_{m+1/2}) / h_m` per cell.
    kappa: Vec<f64>,
    a_mid: Vec<f64>,
    first: usize,
    last: usize,
}

impl DegenerateOperator {
    /// Assemble with the boundary regime implied by the coefficient's class.
    pub fn assemble(coef: &DiffusionCoefficient, grid: SpatialGrid) -> Result<Self> {
        Self::with_boundary(coef, grid, BoundaryRegime::for_class(coef.class()))
    }

    pub fn with_boundary(
        coef: &DiffusionCoefficient,
        grid: SpatialGrid,
        bc: BoundaryRegime,
    ) -> Result<Self> {
        let m = grid.len();
        if m < 4 {
            return Err(Error::GridTooSmall(m));
        }
        let mut kappa = Vec::with_capacity(m - 1);
        let mut a_mid = Vec::with_capacity(m - 1);
        for c in 0..m - 1 {
            let h = grid.width(c);
            if !(h > 0.0) {
                return Err(Error::DegenerateCell(c, c + 1));
            }
            let a = coef.eval(grid.midpoint(c))?;
            a_mid.push(a);
            kappa.push(a / h);
        }
        let first = match bc {
            BoundaryRegime::Dirichlet => 1,
            BoundaryRegime::FluxFreeLeft => 0,
        };
        Ok(DegenerateOperator {
            grid,
            coef: coef.clone(),
            bc,
            kappa,
            a_mid,
            first,
            last: m - 2,
        })
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn coefficient(&self) -> &DiffusionCoefficient {
        &self.coef
    }

    pub fn boundary(&self) -> BoundaryRegime {
        self.bc
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        self.grid.nodes()
    }

    pub fn weights(&self) -> &[f64] {
        self.grid.weights()
    }

    /// Inclusive range of unknowns that are not pinned by a Dirichlet condition.
    pub fn active(&self) -> std::ops::RangeInclusive<usize> {
        self.first..=self.last
    }

    pub fn active_count(&self) -> usize {
        self.last + 1 - self.first
    }

    pub fn is_active(&self, i: usize) -> bool {
        i >= self.first && i <= self.last
    }

    /// Flux coefficients `a_{m+1/2} / h_m`.
    pub fn kappa(&self) -> &[f64] {
        &self.kappa
    }

    /// Coefficient sampled at cell midpoints.
    pub fn a_mid(&self) -> &[f64] {
        &self.a_mid
    }

    /// Zero the pinned entries of `u`.
    pub fn project(&self, u: &mut [f64]) {
        for (i, v) in u.iter_mut().enumerate() {
            if !self.is_active(i) {
                *v = 0.0;
            }
        }
    }

    /// `S u` (symmetric, positive semidefinite), with pinned entries of `u`
    /// treated as zero and pinned rows of the result set to zero.
    pub fn apply_stiffness(&self, u: &[f64], out: &mut [f64]) {
        let m = self.len();
        let val = |i: usize| if self.is_active(i) { u[i] } else { 0.0 };
        for i in 0..m {
            out[i] = 0.0;
        }
        for c in 0..m - 1 {
            let flux = self.kappa[c] * (val(c + 1) - val(c));
            if self.is_active(c) {
                out[c] -= flux;
            }
            if self.is_active(c + 1) {
                out[c + 1] += flux;
            }
        }
    }

    /// `L u = -W^{-1} S u`, the discrete `(a u_x)_x`.
    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        self.apply_stiffness(u, out);
        for (o, w) in out.iter_mut().zip(self.grid.weights()) {
            *o = -*o / w;
        }
    }

    /// Discrete inner product `sum_i w_i u_i v_i`.
    pub fn inner(&self, u: &[f64], v: &[f64]) -> f64 {
        self.grid
            .weights()
            .iter()
            .zip(u.iter().zip(v))
            .map(|(w, (a, b))| w * a * b)
            .sum()
    }

    pub fn norm_sq(&self, u: &[f64]) -> f64 {
        self.inner(u, u)
    }

    /// `sum_m a_{m+1/2} (u_{m+1} - u_m)^2 / h_m`.
    pub fn energy(&self, u: &[f64]) -> f64 {
        let val = |i: usize| if self.is_active(i) { u[i] } else { 0.0 };
        self.kappa
            .iter()
            .enumerate()
            .map(|(c, k)| {
                let d = val(c + 1) - val(c);
                k * d * d
            })
            .sum()
    }

    pub fn weighted_norms(&self, u: &[f64]) -> WeightedNorms {
        let nodes = self.grid.nodes();
        let x2_over_a = self
            .grid
            .weights()
            .iter()
            .enumerate()
            .map(|(i, w)| w * self.coef.x2_over_a(nodes[i]) * u[i] * u[i])
            .sum();
        let a_over_x2 = (0..self.len() - 1)
            .map(|c| {
                let xm = self.grid.midpoint(c);
                let ubar = 0.5 * (u[c] + u[c + 1]);
                self.grid.width(c) * self.a_mid[c] / (xm * xm) * ubar * ubar
            })
            .sum();
        WeightedNorms {
            l2: self.norm_sq(u),
            energy: self.energy(u),
            x2_over_a,
            a_over_x2,
        }
    }

    /// Factor `W + gamma S` on the active block.
    pub fn factor_shifted(&self, gamma: f64) -> Result<TridiagFactor> {
        let n = self.active_count();
        let w = self.grid.weights();
        let mut diag = Vec::with_capacity(n);
        let mut off = Vec::with_capacity(n.saturating_sub(1));
        for i in self.active() {
            let mut d = 0.0;
            if i > 0 {
                d += self.kappa[i - 1];
            }
            if i + 1 < self.len() {
                d += self.kappa[i];
            }
            diag.push(w[i] + gamma * d);
            if i < self.last {
                off.push(-gamma * self.kappa[i]);
            }
        }
        TridiagFactor::new(self.first, self.len(), &diag, &off)
    }

    /// Dense stiffness matrix `S` restricted to the active block.
    pub fn dense_stiffness(&self) -> DMatrix<f64> {
        let n = self.active_count();
        let mut s = DMatrix::zeros(n, n);
        for c in 0..self.len() - 1 {
            let k = self.kappa[c];
            let (l, r) = (c, c + 1);
            if self.is_active(l) {
                s[(l - self.first, l - self.first)] += k;
            }
            if self.is_active(r) {
                s[(r - self.first, r - self.first)] += k;
            }
            if self.is_active(l) && self.is_active(r) {
                s[(l - self.first, r - self.first)] -= k;
                s[(r - self.first, l - self.first)] -= k;
            }
        }
        s
    }

    /// Dense Gram matrix of the midpoint form `\int (a / x^2) u^2` on the active block.
    fn dense_hardy_form(&self) -> DMatrix<f64> {
        let n = self.active_count();
        let mut b = DMatrix::zeros(n, n);
        for c in 0..self.len() - 1 {
            let xm = self.grid.midpoint(c);
            let q = 0.25 * self.grid.width(c) * self.a_mid[c] / (xm * xm);
            let idx = [c, c + 1];
            for &p in &idx {
                for &r in &idx {
                    if self.is_active(p) && self.is_active(r) {
                        b[(p - self.first, r - self.first)] += q;
                    }
                }
            }
        }
        b
    }

    /// Smallest `C` with `\int (a/x^2) u^2 <= C \int a u_x^2` over admissible grid
    /// functions: the largest generalized eigenvalue of the two forms.
    pub fn hardy_poincare_constant(&self) -> Result<f64> {
        if self.active_count() == 0 {
            return Err(Error::SingularEnergy("no active unknowns".into()));
        }
        let e = self.dense_stiffness();
        let b = self.dense_hardy_form();
        let chol = e
            .cholesky()
            .ok_or_else(|| Error::SingularEnergy("energy form is not positive definite".into()))?;
        let l = chol.l();
        let linv = l
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::SingularEnergy("Cholesky factor is singular".into()))?;
        let c = &linv * b * linv.transpose();
        let c = (&c + c.transpose()) * 0.5;
        let eig = SymmetricEigen::new(c);
        Ok(eig
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max))
    }

    /// Eigenvalues of `-L` in increasing order.
    pub fn spectrum(&self) -> Vec<f64> {
        let s = self.dense_stiffness();
        let w = self.grid.weights();
        let n = self.active_count();
        let scaled = DMatrix::from_fn(n, n, |i, j| {
            s[(i, j)] / (w[i + self.first] * w[j + self.first]).sqrt()
        });
        let mut ev: Vec<f64> = SymmetricEigen::new(scaled)
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ev
    }

    /// Write the nonzero entries of `L` as `row col value` lines.
    pub fn write_coordinate(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "% {} x {} operator (a u_x)_x", self.len(), self.len())?;
        let w = self.grid.weights();
        for i in self.active() {
            let mut diag = 0.0;
            if i > 0 {
                diag += self.kappa[i - 1];
                if self.is_active(i - 1) {
                    writeln!(out, "{} {} {:.17e}", i, i - 1, self.kappa[i - 1] / w[i])?;
                }
            }
            if i + 1 < self.len() {
                diag += self.kappa[i];
            }
            writeln!(out, "{} {} {:.17e}", i, i, -diag / w[i])?;
            if i + 1 < self.len() && self.is_active(i + 1) {
                writeln!(out, "{} {} {:.17e}", i, i + 1, self.kappa[i] / w[i])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}
