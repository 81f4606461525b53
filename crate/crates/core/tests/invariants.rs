use carleman_core::carleman::{draw_ensemble, EnsembleConfig};
use carleman_core::weights::verify_theta_bounds;
use carleman_core::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup(alpha: f64, m: usize, steps: usize, grading: Grading) -> Setup {
    let mut res = Resolution::new(m, steps);
    res.grading = grading;
    Setup::new(DiffusionCoefficient::power_law(alpha).unwrap(), 0.5, res)
}

fn random_field(rng: &mut ChaCha8Rng, tree: &NoiseTree, m: usize) -> AdaptedField {
    let mut field = AdaptedField::zeros(tree, m);
    for n in 0..=tree.steps() {
        for v in field.level_mut(n) {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    field
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn duality_holds_for_random_data(
        alpha in prop_oneof![Just(0.0), 0.1f64..0.95, 1.05f64..1.9],
        seed in any::<u64>(),
        geometric in any::<bool>(),
    ) {
        let grading = if geometric { Grading::Geometric { ratio: 1.05 } } else { Grading::Uniform };
        let st = setup(alpha, 18, 5, grading);
        let op = st.operator().unwrap();
        let tree = st.tree().unwrap();
        let solver = st.solver(&op).unwrap();
        let cfg = EnsembleConfig { size: 1, seed, ..EnsembleConfig::default() };
        let sample = &draw_ensemble(&cfg, st.horizon, op.boundary())[0];
        let b = sample.b.step_field(5, st.dt(), op.nodes());
        let c = sample.c.step_field(5, st.dt(), op.nodes());
        let y0 = sample.y0.sample(op.nodes());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_field(&mut rng, &tree, 18);
        let g = random_field(&mut rng, &tree, 18);
        let src = random_field(&mut rng, &tree, 18);
        let terminal: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = solver
            .forward(&tree, &ForwardProblem { b: &b, c: &c, f: Source::Adapted(&f), g: Source::Adapted(&g), y0: &y0 })
            .unwrap();
        let back = solver
            .backward(&tree, &BackwardProblem {
                b: &b,
                c: &c,
                terminal: Terminal::Deterministic(&terminal),
                terminal_scale: 1.0,
                source: Source::Adapted(&src),
            })
            .unwrap();
        let terms = solver
            .duality_terms(&tree, &y, Source::Adapted(&f), Source::Adapted(&g), &back, Source::Adapted(&src))
            .unwrap();
        prop_assert!(terms.residual <= 1e-12, "residual {:e}", terms.residual);
    }

    #[test]
    fn unforced_energy_does_not_grow(alpha in 0.0f64..1.9, seed in any::<u64>(), theta in 0.5f64..1.0) {
        let mut st = setup(alpha, 24, 6, Grading::Uniform);
        st.resolution.theta = theta;
        let op = st.operator().unwrap();
        let solver = st.solver(&op).unwrap();
        let zero = StepField::zero(6, 24);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y0 = random::ModeSeries::random(&mut rng, 8, op.boundary()).sample(op.nodes());
        let mom = solver
            .forward_moments(6, &ForwardProblem { b: &zero, c: &zero, f: Source::Zero, g: Source::Zero, y0: &y0 })
            .unwrap();
        let norms: Vec<f64> = mom.mean.iter().map(|v| op.norm_sq(v)).collect();
        for w in norms.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn lattice_backward_matches_tree(seed in any::<u64>(), alpha in 0.1f64..1.9) {
        let st = setup(alpha, 14, 6, Grading::Uniform);
        let op = st.operator().unwrap();
        let solver = st.solver(&op).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = StepField::constant(6, 14, rng.random_range(-1.0..1.0));
        let c = StepField::constant(6, 14, rng.random_range(-1.0..1.0));
        let eta: Vec<f64> = (0..14).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = BackwardProblem {
            b: &b,
            c: &c,
            terminal: Terminal::Deterministic(&eta),
            terminal_scale: 1.0,
            source: Source::Zero,
        };
        let on_tree = solver.backward(&st.tree().unwrap(), &p).unwrap();
        let on_lattice = solver.backward(&st.lattice().unwrap(), &p).unwrap();
        let (a, l) = (on_tree.z.node(0, 0), on_lattice.z.node(0, 0));
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        for i in 0..14 {
            prop_assert!((a[i] - l[i]).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn theta_bounds_hold_for_any_horizon(horizon in 0.05f64..5.0) {
        let report = verify_theta_bounds(horizon, 2_000).unwrap();
        prop_assert!(report.all_hold(1e-9), "{:?}", report.residuals);
    }

    #[test]
    fn hardy_constant_bounds_every_ratio(alpha in 0.0f64..1.9, seed in any::<u64>()) {
        let st = setup(alpha, 30, 1, Grading::Uniform);
        let op = st.operator().unwrap();
        let c = op.hardy_poincare_constant().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        op.project(&mut u);
        let n = op.weighted_norms(&u);
        prop_assert!(n.a_over_x2 <= c * n.energy * (1.0 + 1e-10));
    }
}
