//! Smooth random data: initial profiles as short eigenfunction series and
//! bounded space-time coefficients as trigonometric polynomials. Both are
//! drawn in coefficient space so the same sample can be evaluated on any grid.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::solvers::StepField;
use crate::spacegrid::BoundaryRegime;

/// `sum_k c_k e_k(x)` with `e_k = sin(k pi x)` (Dirichlet) or
/// `cos((k - 1/2) pi x)` (flux-free at 0, zero at 1).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeSeries {
    pub coeffs: Vec<f64>,
    pub bc: BoundaryRegime,
}

impl ModeSeries {
    pub fn single(mode: usize, bc: BoundaryRegime) -> Self {
        let mut coeffs = vec![0.0; mode];
        coeffs[mode - 1] = 1.0;
        ModeSeries { coeffs, bc }
    }

    /// Coefficients `N(0, 1) / k^2`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, terms: usize, bc: BoundaryRegime) -> Self {
        let coeffs = (1..=terms)
            .map(|k| {
                let z: f64 = StandardNormal.sample(rng);
                z / (k * k) as f64
            })
            .collect();
        ModeSeries { coeffs, bc }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let pi = std::f64::consts::PI;
        self.coeffs
            .iter()
            .enumerate()
            .map(|(j, c)| {
                let k = (j + 1) as f64;
                match self.bc {
                    BoundaryRegime::Dirichlet => c * (k * pi * x).sin(),
                    BoundaryRegime::FluxFreeLeft => c * ((k - 0.5) * pi * x).cos(),
                }
            })
            .sum()
    }

    pub fn sample(&self, nodes: &[f64]) -> Vec<f64> {
        nodes.iter().map(|&x| self.eval(x)).collect()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        ModeSeries {
            coeffs: self.coeffs.iter().map(|c| c * factor).collect(),
            bc: self.bc,
        }
    }
}

/// `sum_{j,k} d_{jk} cos(j pi t / T) cos(k pi x)` with `sum |d_{jk}| <= bound`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrigField {
    pub horizon: f64,
    /// Row `j` (time frequency), column `k` (space frequency).
    pub coeffs: Vec<Vec<f64>>,
}

impl TrigField {
    pub fn zero(horizon: f64) -> Self {
        TrigField {
            horizon,
            coeffs: Vec::new(),
        }
    }

    pub fn constant(horizon: f64, value: f64) -> Self {
        TrigField {
            horizon,
            coeffs: vec![vec![value]],
        }
    }

    /// Uniform coefficients rescaled so that `sum |d| = bound`.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        horizon: f64,
        time_modes: usize,
        space_modes: usize,
        bound: f64,
    ) -> Self {
        if bound == 0.0 {
            return Self::zero(horizon);
        }
        let mut coeffs: Vec<Vec<f64>> = (0..time_modes)
            .map(|_| {
                (0..space_modes)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect()
            })
            .collect();
        let total: f64 = coeffs.iter().flatten().map(|v: &f64| v.abs()).sum();
        if total > 0.0 {
            for v in coeffs.iter_mut().flatten() {
                *v *= bound / total;
            }
        }
        TrigField { horizon, coeffs }
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().flatten().all(|&v| v == 0.0)
    }

    pub fn eval(&self, t: f64, x: f64) -> f64 {
        let pi = std::f64::consts::PI;
        let mut acc = 0.0;
        for (j, row) in self.coeffs.iter().enumerate() {
            let ct = (j as f64 * pi * t / self.horizon).cos();
            for (k, d) in row.iter().enumerate() {
                acc += d * ct * (k as f64 * pi * x).cos();
            }
        }
        acc
    }

    /// Sample at `t_n = n dt` for `n < steps` on `nodes`.
    pub fn step_field(&self, steps: usize, dt: f64, nodes: &[f64]) -> StepField {
        if self.is_zero() {
            return StepField::zero(steps, nodes.len());
        }
        StepField::from_fn(steps, nodes.len(), |n, i| {
            self.eval(n as f64 * dt, nodes[i])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mode_series_boundary_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = ModeSeries::random(&mut rng, 6, BoundaryRegime::Dirichlet);
        assert!(d.eval(0.0).abs() < 1e-15 && d.eval(1.0).abs() < 1e-14);
        let f = ModeSeries::random(&mut rng, 6, BoundaryRegime::FluxFreeLeft);
        assert!(f.eval(1.0).abs() < 1e-14);
        let h = 1e-6;
        assert!(((f.eval(h) - f.eval(0.0)) / h).abs() < 1e-3);
    }

    #[test]
    fn trig_field_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = TrigField::random(&mut rng, 0.5, 3, 3, 1.0);
        let sup = (0..200)
            .flat_map(|i| (0..200).map(move |j| (i as f64 / 199.0 * 0.5, j as f64 / 199.0)))
            .map(|(t, x)| f.eval(t, x).abs())
            .fold(0.0, f64::max);
        assert!(sup <= 1.0 + 1e-12);
        let total: f64 = f.coeffs.iter().flatten().map(|v| v.abs()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
