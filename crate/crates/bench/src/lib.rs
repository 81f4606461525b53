//! Fixtures shared by the benchmarks.

use carleman_core::{DiffusionCoefficient, Resolution, Setup, StepField};

/// `a(x) = x^alpha` on `(0, 1) x (0, 0.5)` with a uniform grid.
pub fn power_law_setup(alpha: f64, m: usize, steps: usize) -> Setup {
    let coef = DiffusionCoefficient::power_law(alpha).expect("valid exponent");
    Setup::new(coef, 0.5, Resolution::new(m, steps))
}

/// `sin(pi x)` restricted to the active nodes.
pub fn sine(setup: &Setup) -> Vec<f64> {
    let op = setup.operator().expect("valid grid");
    let mut v: Vec<f64> = op
        .nodes()
        .iter()
        .map(|x| (std::f64::consts::PI * x).sin())
        .collect();
    op.project(&mut v);
    v
}

pub fn constant(setup: &Setup, value: f64) -> StepField {
    StepField::constant(setup.steps(), setup.resolution.m, value)
}
