//! Discretization parameters shared by the verifiers and control solvers.

use serde::{Deserialize, Serialize};

use crate::coeff::DiffusionCoefficient;
use crate::error::Result;
use crate::noise::{NoiseTree, RecombiningLattice};
use crate::solvers::{Solver, DEFAULT_STARTUP, DEFAULT_THETA};
use crate::spacegrid::{DegenerateOperator, Grading, SpatialGrid};

/// Space-time resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    /// Spatial nodes `M`.
    pub m: usize,
    /// Time steps `N`.
    pub steps: usize,
    #[serde(default)]
    pub grading: Grading,
    /// Implicitness of the diffusion step (1/2 = Crank-Nicolson, 1 = implicit Euler).
    #[serde(default = "default_theta")]
    pub theta: f64,
    /// Leading fully implicit steps.
    #[serde(default = "default_startup")]
    pub startup: usize,
}

fn default_startup() -> usize {
    DEFAULT_STARTUP
}

fn default_theta() -> f64 {
    DEFAULT_THETA
}

impl Resolution {
    pub fn new(m: usize, steps: usize) -> Self {
        Resolution {
            m,
            steps,
            grading: Grading::Uniform,
            theta: DEFAULT_THETA,
            startup: DEFAULT_STARTUP,
        }
    }

    /// Twice the nodes and twice the steps. A geometric ratio is replaced by
    /// its square root so the grading profile is preserved.
    pub fn refined(&self) -> Self {
        let grading = match self.grading {
            Grading::Geometric { ratio } => Grading::Geometric {
                ratio: ratio.sqrt(),
            },
            g => g,
        };
        Resolution {
            m: 2 * self.m,
            steps: 2 * self.steps,
            grading,
            theta: self.theta,
            startup: self.startup,
        }
    }
}

/// Coefficient, horizon and resolution of one discrete problem.
#[derive(Debug, Clone)]
pub struct Setup {
    pub coef: DiffusionCoefficient,
    pub horizon: f64,
    pub resolution: Resolution,
}

impl Setup {
    pub fn new(coef: DiffusionCoefficient, horizon: f64, resolution: Resolution) -> Self {
        Setup {
            coef,
            horizon,
            resolution,
        }
    }

    pub fn refined(&self) -> Self {
        Setup {
            coef: self.coef.clone(),
            horizon: self.horizon,
            resolution: self.resolution.refined(),
        }
    }

    pub fn steps(&self) -> usize {
        self.resolution.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.resolution.steps as f64
    }

    pub fn grid(&self) -> Result<SpatialGrid> {
        SpatialGrid::build(self.resolution.m, self.resolution.grading)
    }

    pub fn operator(&self) -> Result<DegenerateOperator> {
        DegenerateOperator::assemble(&self.coef, self.grid()?)
    }

    pub fn solver<'a>(&self, op: &'a DegenerateOperator) -> Result<Solver<'a>> {
        Solver::new(op, self.dt(), self.resolution.theta)?.with_startup(self.resolution.startup)
    }

    pub fn tree(&self) -> Result<NoiseTree> {
        NoiseTree::new(self.horizon, self.resolution.steps)
    }

    pub fn lattice(&self) -> Result<RecombiningLattice> {
        RecombiningLattice::new(self.horizon, self.resolution.steps)
    }

    /// Midpoints `t_{n+1/2}` of the time steps.
    pub fn half_steps(&self) -> Vec<f64> {
        let dt = self.dt();
        (0..self.steps()).map(|n| (n as f64 + 0.5) * dt).collect()
    }
}
