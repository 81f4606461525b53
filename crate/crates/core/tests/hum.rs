use carleman_core::carleman::{draw_ensemble, EnsembleConfig, Sample};
use carleman_core::hum::dense::{backward_minimizer, two_control_minimizer};
use carleman_core::hum::*;
use carleman_core::random::ModeSeries;
use carleman_core::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const HORIZON: f64 = 0.5;

fn sqrt_setup(m: usize, n: usize) -> Setup {
    Setup::new(
        DiffusionCoefficient::power_law(0.5).unwrap(),
        HORIZON,
        Resolution::new(m, n),
    )
}

fn omega() -> Interval {
    Interval::new(0.3, 0.8).unwrap()
}

fn weights(setup: &Setup, sigma: f64) -> WeightSystem {
    WeightSystem::build(
        &setup.coef,
        HORIZON,
        omega(),
        Interval::new(0.47, 0.53).unwrap(),
        sigma * (HORIZON / 2.0).powi(8),
        ThetaVariant::Bar,
    )
    .unwrap()
}

fn random_terminal(setup: &Setup, seed: u64) -> Vec<f64> {
    let op = setup.operator().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModeSeries::random(&mut rng, 6, op.boundary()).sample(op.nodes())
}

fn sine(setup: &Setup) -> Vec<f64> {
    let op = setup.operator().unwrap();
    op.nodes()
        .iter()
        .map(|x| (std::f64::consts::PI * x).sin())
        .collect()
}

fn random_vector(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn metric_dot(metric: &[f64], a: &[f64], b: &[f64]) -> f64 {
    metric
        .iter()
        .zip(a.iter().zip(b))
        .map(|(w, (x, y))| w * x * y)
        .sum()
}

#[test]
fn backward_sweep_is_monotone_and_bounded() {
    let st = sqrt_setup(40, 8);
    let zero = StepField::zero(8, 40);
    let eta = random_terminal(&st, 11);
    let p = BackwardControlProblem {
        b: &zero,
        c: &zero,
        omega: omega(),
        terminal: Terminal::Deterministic(&eta),
    };
    let mut prev = f64::INFINITY;
    let mut warm: Option<Vec<f64>> = None;
    let mut ratios = Vec::new();
    for eps in [1e-1, 1e-2, 1e-3, 1e-4] {
        let res =
            null_control_backward(&st, &p, eps, CgOptions::default(), warm.as_deref()).unwrap();
        assert!(
            res.achieved <= prev,
            "eps {eps}: {} after {prev}",
            res.achieved
        );
        assert!(res.duality_residual.unwrap() <= 1e-9);
        prev = res.achieved;
        ratios.push(res.achieved / eps);
        warm = Some(res.minimizer);
    }
    let first = ratios[0];
    assert!(ratios.iter().all(|r| *r <= 10.0 * first), "{ratios:?}");
}

#[test]
fn backward_control_matches_dense_normal_equations() {
    let st = sqrt_setup(20, 6);
    let c = StepField::constant(6, 20, 0.5);
    let b = StepField::constant(6, 20, -0.2);
    let eta = random_terminal(&st, 3);
    let p = BackwardControlProblem {
        b: &b,
        c: &c,
        omega: omega(),
        terminal: Terminal::Deterministic(&eta),
    };
    let opts = CgOptions {
        tol: 1e-12,
        max_iter: 500,
    };
    let res = null_control_backward(&st, &p, 1e-3, opts, None).unwrap();
    let dense = backward_minimizer(&st, &p, 1e-3).unwrap();
    let op = st.operator().unwrap();
    let diff: Vec<f64> = res
        .minimizer
        .iter()
        .zip(&dense)
        .map(|(a, b)| a - b)
        .collect();
    let rel = (op.norm_sq(&diff) / op.norm_sq(&dense)).sqrt();
    assert!(rel <= 1e-6, "relative difference {rel:e}");
}

#[test]
fn backward_control_is_supported_in_omega() {
    let st = sqrt_setup(20, 5);
    let zero = StepField::zero(5, 20);
    let eta = random_terminal(&st, 8);
    let p = BackwardControlProblem {
        b: &zero,
        c: &zero,
        omega: omega(),
        terminal: Terminal::Deterministic(&eta),
    };
    let res = null_control_backward(&st, &p, 1e-2, CgOptions::default(), None).unwrap();
    let op = st.operator().unwrap();
    let Controls::Backward { v } = res.controls else {
        panic!("expected a backward control");
    };
    for n in 0..5 {
        for node in v.level(n).chunks(20) {
            for (x, val) in op.nodes().iter().zip(node) {
                if !omega().contains(*x) {
                    assert_eq!(*val, 0.0);
                }
            }
        }
    }
}

#[test]
fn backward_rejects_nonpositive_penalty() {
    let st = sqrt_setup(10, 3);
    let zero = StepField::zero(3, 10);
    let eta = vec![1.0; 10];
    let p = BackwardControlProblem {
        b: &zero,
        c: &zero,
        omega: omega(),
        terminal: Terminal::Deterministic(&eta),
    };
    assert!(null_control_backward(&st, &p, 0.0, CgOptions::default(), None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn backward_hum_operator_is_symmetric_positive(seed in any::<u64>(), c in -1.0f64..1.0, eps in 1e-4f64..1.0) {
        let st = sqrt_setup(16, 5);
        let op = st.operator().unwrap();
        let cf = StepField::constant(5, 16, c);
        let zero = StepField::zero(5, 16);
        let eta = vec![0.0; 16];
        let p = BackwardControlProblem {
            b: &zero,
            c: &cf,
            omega: omega(),
            terminal: Terminal::Deterministic(&eta),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = random_vector(&mut rng, 16);
        let mut w = random_vector(&mut rng, 16);
        op.project(&mut u);
        op.project(&mut w);
        let au = backward_hum_operator(&st, &p, eps, &u).unwrap();
        let aw = backward_hum_operator(&st, &p, eps, &w).unwrap();
        let (l, r) = (op.inner(&au, &w), op.inner(&u, &aw));
        prop_assert!((l - r).abs() <= 1e-10 * l.abs().max(r.abs()).max(1e-300));
        prop_assert!(op.inner(&au, &u) > 0.0);
    }

    #[test]
    fn two_control_hessian_is_symmetric(seed in any::<u64>(), eps in 1e-3f64..1.0) {
        let st = sqrt_setup(12, 4);
        let ws = weights(&st, 1.0);
        let zero = StepField::zero(4, 12);
        let y0 = vec![0.0; 12];
        let p = TwoControlProblem { b: &zero, f: &zero, g: &zero, y0: &y0, weight_eps: None };
        let (len, metric) = two_control_space(&st).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random_vector(&mut rng, len);
        let w = random_vector(&mut rng, len);
        // With zero data the gradient is the Hessian applied to the controls.
        let au = two_control_objective(&st, &ws, &p, eps, &u).unwrap().1;
        let aw = two_control_objective(&st, &ws, &p, eps, &w).unwrap().1;
        let (l, r) = (metric_dot(&metric, &au, &w), metric_dot(&metric, &u, &aw));
        prop_assert!((l - r).abs() <= 1e-10 * l.abs().max(r.abs()));
    }
}

#[test]
fn two_control_gradient_matches_central_differences() {
    let st = sqrt_setup(20, 6);
    let ws = weights(&st, 1.0);
    let b = StepField::constant(6, 20, 0.3);
    let f = StepField::constant(6, 20, 0.1);
    let zero = StepField::zero(6, 20);
    let y0 = sine(&st);
    let p = TwoControlProblem {
        b: &b,
        f: &f,
        g: &zero,
        y0: &y0,
        weight_eps: None,
    };
    let (len, metric) = two_control_space(&st).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let u = random_vector(&mut rng, len);
    let (_, grad) = two_control_objective(&st, &ws, &p, 1e-2, &u).unwrap();
    for _ in 0..10 {
        let d = random_vector(&mut rng, len);
        let h = 1e-3;
        let plus: Vec<f64> = u.iter().zip(&d).map(|(a, b)| a + h * b).collect();
        let minus: Vec<f64> = u.iter().zip(&d).map(|(a, b)| a - h * b).collect();
        let jp = two_control_objective(&st, &ws, &p, 1e-2, &plus).unwrap().0;
        let jm = two_control_objective(&st, &ws, &p, 1e-2, &minus).unwrap().0;
        let fd = (jp - jm) / (2.0 * h);
        let exact = metric_dot(&metric, &grad, &d);
        assert!((fd - exact).abs() <= 1e-6 * exact.abs(), "{fd} vs {exact}");
    }
}

#[test]
fn two_control_satisfies_optimality_and_descent() {
    let st = sqrt_setup(20, 6);
    let ws = weights(&st, 1.0);
    let zero = StepField::zero(6, 20);
    let y0 = sine(&st);
    let p = TwoControlProblem {
        b: &zero,
        f: &zero,
        g: &zero,
        y0: &y0,
        weight_eps: None,
    };
    let opts = CgOptions::default();
    let res = two_control_forward(&st, &ws, &p, 1e-2, opts, None).unwrap();
    assert!(
        res.optimality_residual.unwrap() <= 2.0 * opts.tol,
        "{:?}",
        res.optimality_residual
    );
    let (len, _) = two_control_space(&st).unwrap();
    let (j0, _) = two_control_objective(&st, &ws, &p, 1e-2, &vec![0.0; len]).unwrap();
    assert!(res.functional <= j0);
    let (j, _) = two_control_objective(&st, &ws, &p, 1e-2, &res.minimizer).unwrap();
    assert!((j - res.functional).abs() <= 1e-12 * j.abs());
    let Controls::TwoControls { h, .. } = &res.controls else {
        panic!("expected two controls");
    };
    let op = st.operator().unwrap();
    for n in 0..6 {
        for node in h.level(n).chunks(20) {
            for (x, val) in op.nodes().iter().zip(node) {
                if !omega().contains(*x) {
                    assert_eq!(*val, 0.0);
                }
            }
        }
    }
}

#[test]
fn two_control_matches_dense_normal_equations() {
    let st = sqrt_setup(20, 6);
    let ws = weights(&st, 1.0);
    let zero = StepField::zero(6, 20);
    let y0 = sine(&st);
    let p = TwoControlProblem {
        b: &zero,
        f: &zero,
        g: &zero,
        y0: &y0,
        weight_eps: None,
    };
    let opts = CgOptions {
        tol: 1e-11,
        max_iter: 2000,
    };
    for eps in [1e-1, 1e-3] {
        let res = two_control_forward(&st, &ws, &p, eps, opts, None).unwrap();
        let dense = two_control_minimizer(&st, &ws, &p, eps).unwrap();
        let dj = (res.functional - dense.functional).abs() / dense.functional;
        let dy = (res.achieved - dense.achieved).abs() / dense.achieved;
        assert!(dj <= 1e-6 && dy <= 1e-6, "eps {eps}: J {dj:e}, y(T) {dy:e}");
    }
}

#[test]
fn two_control_terminal_norm_is_monotone_for_fixed_weight() {
    let st = sqrt_setup(20, 6);
    let ws = weights(&st, 1.0);
    let zero = StepField::zero(6, 20);
    let y0 = sine(&st);
    let p = TwoControlProblem {
        b: &zero,
        f: &zero,
        g: &zero,
        y0: &y0,
        weight_eps: Some(1e-4),
    };
    let targets = [1e-1, 1e-2, 1e-3, 1e-4];
    let res = two_control_sweep(&st, &ws, &p, &targets, CgOptions::default()).unwrap();
    for pair in res.windows(2) {
        assert!(
            pair[1].achieved <= pair[0].achieved * (1.0 + 1e-6),
            "{} then {}",
            pair[0].achieved,
            pair[1].achieved
        );
    }
}

#[test]
fn two_control_zero_data_and_bad_inputs() {
    let st = sqrt_setup(12, 4);
    let ws = weights(&st, 1.0);
    let zero = StepField::zero(4, 12);
    let y0 = vec![0.0; 12];
    let p = TwoControlProblem {
        b: &zero,
        f: &zero,
        g: &zero,
        y0: &y0,
        weight_eps: None,
    };
    let res = two_control_forward(&st, &ws, &p, 1e-2, CgOptions::default(), None).unwrap();
    assert_eq!(res.achieved, 0.0);
    assert!(res.minimizer.iter().all(|u| *u == 0.0));
    assert!(two_control_forward(&st, &ws, &p, -1.0, CgOptions::default(), None).is_err());
    let standard = ws.with_variant(ThetaVariant::Standard).unwrap();
    assert!(two_control_forward(&st, &standard, &p, 1e-2, CgOptions::default(), None).is_err());
    assert!(two_control_sweep(&st, &ws, &p, &[1e-3, 1e-2], CgOptions::default()).is_err());
}

#[test]
fn continuation_probe_trivial_candidate() {
    let st = sqrt_setup(20, 6);
    let horizon = st.horizon;
    let zero = Sample {
        y0: ModeSeries::single(1, st.operator().unwrap().boundary()).scaled(0.0),
        b: random::TrigField::zero(horizon),
        c: random::TrigField::zero(horizon),
    };
    let report = unique_continuation_probe(&st, &[zero], omega(), 0.25, 1e-12).unwrap();
    assert_eq!(report.violations, 0);
    assert_eq!(report.entries[0].local, 0.0);
    assert_eq!(report.entries[0].global, 0.0);
}

#[test]
fn continuation_probe_sees_data_supported_outside_omega() {
    let st = sqrt_setup(40, 8);
    let op = st.operator().unwrap();
    // A bump on (0.05, 0.25), away from omega = (0.3, 0.8).
    let bump: Vec<f64> = op
        .nodes()
        .iter()
        .map(|&x| {
            if x > 0.05 && x < 0.25 {
                ((x - 0.05) * (0.25 - x)).powi(2)
            } else {
                0.0
            }
        })
        .collect();
    let solver = st.solver(&op).unwrap();
    let zero = StepField::zero(8, 40);
    let y = solver
        .forward(
            &st.tree().unwrap(),
            &ForwardProblem {
                b: &zero,
                c: &zero,
                f: Source::Zero,
                g: Source::Zero,
                y0: &bump,
            },
        )
        .unwrap();
    let inside: f64 = op
        .nodes()
        .iter()
        .zip(y.level(1).chunks(40).next().unwrap())
        .filter(|(x, _)| omega().contains(**x))
        .map(|(_, v)| v * v)
        .sum();
    assert!(inside > 0.0);
}

#[test]
fn continuation_probe_random_candidates() {
    let st = sqrt_setup(80, 10);
    let op = st.operator().unwrap();
    let cfg = EnsembleConfig {
        size: 200,
        seed: 7,
        ..EnsembleConfig::default()
    };
    let candidates = draw_ensemble(&cfg, st.horizon, op.boundary());
    let report = unique_continuation_probe(&st, &candidates, omega(), 0.25, 1e-8).unwrap();
    assert_eq!(report.entries.len(), 200);
    assert_eq!(report.violations, 0);
}
