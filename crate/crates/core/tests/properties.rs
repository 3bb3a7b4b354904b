use std::sync::Arc;

use approx::assert_relative_eq;
use proptest::prelude::*;

use smp_core::fbsde::*;
use smp_core::hamiltonian::*;
use smp_core::model::*;
use smp_core::paths::*;
use smp_core::spike::*;

fn panel(steps: usize, paths: usize, data: Vec<f64>) -> ProcessPanel<f64> {
    ProcessPanel::new("v", TimeGrid::new(1.0, steps).unwrap(), paths, 1, data).unwrap()
}

fn panel_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (2usize..12, 1usize..6).prop_flat_map(|(steps, paths)| {
        (Just(steps), Just(paths), prop::collection::vec(-5.0f64..5.0, (steps + 1) * paths))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn moment_norm_is_homogeneous(
        (steps, paths, data) in panel_strategy(),
        lambda in -4.0f64..4.0,
        beta in 2.0f64..8.0,
        sup in any::<bool>(),
    ) {
        let p = panel(steps, paths, data);
        let spec = MomentSpec::new(beta, if sup { NormKind::Sup } else { NormKind::Int2 }).unwrap();
        let base = moment_norm(&p, spec).mean;
        let scaled = moment_norm(&p.scaled(lambda), spec).mean;
        assert_relative_eq!(scaled, lambda.abs().powf(beta) * base, max_relative = 1e-12, epsilon = 1e-300);
    }

    #[test]
    fn brownian_sampling_is_pure(seed in any::<u64>(), steps in 2usize..20, paths in 1usize..8, extra in 1usize..5) {
        let g = TimeGrid::<f64>::new(1.0, steps).unwrap();
        let a = sample_brownian(g, paths, SeedSpec::new(seed)).unwrap();
        let b = sample_brownian(g, paths, SeedSpec::new(seed)).unwrap();
        prop_assert_eq!(a.path_panel(), b.path_panel());
        let wider = sample_brownian(g, paths + extra, SeedSpec::new(seed)).unwrap();
        for i in 0..steps {
            for m in 0..paths {
                prop_assert_eq!(a.db(m, i).to_bits(), wider.db(m, i).to_bits());
            }
        }
    }

    #[test]
    fn non_finite_panels_are_rejected((steps, paths, mut data) in panel_strategy(), at in any::<prop::sample::Index>(), which in 0usize..3) {
        let bad = [f64::NAN, f64::INFINITY, f64::NEG_INFINITY][which];
        let j = at.index(data.len());
        data[j] = bad;
        prop_assert!(ProcessPanel::new("v", TimeGrid::new(1.0, steps).unwrap(), paths, 1, data).is_err());
    }

    #[test]
    fn binary_dump_round_trips((steps, paths, data) in panel_strategy()) {
        let p = panel(steps, paths, data);
        let mut buf = Vec::new();
        p.write_binary(&mut buf).unwrap();
        let q = ProcessPanel::<f64>::read_binary(buf.as_slice()).unwrap();
        prop_assert_eq!(p, q);
    }

    #[test]
    fn spike_window_has_exact_measure(steps in 4usize..200, a in 0.0f64..1.0, b in 0.0f64..1.0, u in -3.0f64..3.0) {
        let grid = TimeGrid::new(2.0, steps).unwrap();
        let dt = grid.dt();
        let start = ((steps - 1) as f64 * a) as usize;
        let width = 1 + ((steps - start - 1) as f64 * b) as usize;
        let s = SpikeSpec::new(grid, start as f64 * dt, width as f64 * dt, Perturbation::Value(vec![u])).unwrap();
        prop_assert_eq!(s.window(), start..start + width);
        prop_assert_eq!(s.epsilon(), width as f64 * dt);
        let ubar = ProcessPanel::constant("ubar", grid, 3, &[0.25]);
        let spiked = s.spiked_panel(&ubar);
        for i in 0..grid.nodes() {
            for m in 0..3 {
                let want = if s.contains(i) { u } else { 0.25 };
                prop_assert_eq!(spiked.get(m, i), want);
            }
        }
    }
}

fn nonlinear_spec() -> ProblemSpec<f64> {
    ProblemSpec::new(
        "nonlinear",
        1,
        1,
        1.0,
        vec![0.3],
        Arc::new(|p: &Point<f64>, o: &mut [f64]| o[0] = p.x[0] * p.u[0] - p.y),
        Arc::new(|p: &Point<f64>, o: &mut [f64]| o[0] = 0.4 * p.z.sin() + p.x[0].cos() * p.u[0]),
        Arc::new(|p: &Point<f64>| p.x[0] * p.u[0] + p.y * p.z + p.u[0] * p.u[0]),
        Arc::new(|x: &[f64]| x[0]),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn generalized_hamiltonian_self_gap_is_zero(
        x in -2.0f64..2.0, y in -2.0f64..2.0, z in -2.0f64..2.0,
        ubar in -2.0f64..2.0, p in -1.0f64..1.0, q in -2.0f64..2.0, pm in -2.0f64..2.0,
    ) {
        let spec = nonlinear_spec();
        let ctx = HamiltonianContext {
            spec: &spec, t: 0.5, x: vec![x], y, z, ubar: vec![ubar],
            p: vec![p], q: vec![q], pm: vec![pm], method: None, c_min: 0.1,
        };
        prop_assert_eq!(script_h_gap(&ctx, &[ubar]).unwrap(), 0.0);
    }

    #[test]
    fn delta_solves_its_fixed_point(
        x in -2.0f64..2.0, y in -2.0f64..2.0, z in -2.0f64..2.0,
        ubar in -2.0f64..2.0, u in -2.0f64..2.0, p in -1.0f64..1.0,
    ) {
        let spec = nonlinear_spec();
        let ub = [ubar];
        let pt = Point::new(0.5, std::slice::from_ref(&x), y, z, &ub);
        let (d, residual) = delta_at(&spec, &pt, &[u], &[p], DeltaMethod::FixedPoint, 0.1).unwrap();
        let mut s1 = [0.0];
        let mut s0 = [0.0];
        spec.sigma(&pt.with_z(z + d).with_u(&[u]), &mut s1);
        spec.sigma(&pt, &mut s0);
        prop_assert!((d - p * (s1[0] - s0[0])).abs() <= 1e-10);
        prop_assert!(residual <= 1e-10);
    }

    #[test]
    fn linear_in_z_reconstructs_sigma(t in 0.0f64..1.0, x in -3.0f64..3.0, y in -3.0f64..3.0, z in -3.0f64..3.0, u in -1.0f64..1.0) {
        let cz = benchmark_coupled_z::<f64>(0.1).unwrap();
        let SigmaForm::LinearInZ { a, sigma1 } = &cz.spec.sigma_form else { panic!("not linear in z") };
        let (xs, us) = ([x], [u]);
        let pt = Point::new(t, &xs, y, z, &us);
        let (mut s, mut am, mut s1) = ([0.0], [0.0], [0.0]);
        cz.spec.sigma(&pt, &mut s);
        a(t, &mut am);
        sigma1(&pt, &mut s1);
        prop_assert!((s[0] - (am[0] * z + s1[0])).abs() <= 4.0 * f64::EPSILON * (1.0 + s[0].abs()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn linear_solver_is_superposable(
        seed in any::<u64>(),
        f in prop::collection::vec(-1.5f64..1.5, 10),
    ) {
        let b = sample_brownian(TimeGrid::<f64>::new(1.0, 32).unwrap(), 300, SeedSpec::new(seed)).unwrap();
        let c = LinearCoefficients {
            alpha1: vec![-0.5], alpha2: vec![0.2], alpha3: vec![0.3],
            beta1: vec![0.1], beta2: vec![0.1], beta3: -0.2,
            gamma1: vec![0.1], gamma2: vec![0.2], gamma3: 0.1, kappa: vec![0.5],
        };
        let f1 = LinearForcing { x0: vec![f[0]], l1: vec![f[1]], l2: vec![f[2]], l3: f[3], varsigma: f[4] };
        let f2 = LinearForcing { x0: vec![f[5]], l1: vec![f[6]], l2: vec![f[7]], l3: f[8], varsigma: f[9] };
        let solve = |f: &LinearForcing| {
            let spec = LinearFbsdeSpec::constant(b.grid(), b.paths(), &c, f).unwrap();
            let dec = decouple_linear(&spec, &b, &SolverOpts::default()).unwrap();
            solve_linear_fbsde(&spec, &b, &dec, 0.1).unwrap()
        };
        let (s1, s2, s12) = (solve(&f1), solve(&f2), solve(&f1.plus(&f2)));
        for (a, p, q) in [(&s12.x, &s1.x, &s2.x), (&s12.y, &s1.y, &s2.y), (&s12.z, &s1.z, &s2.z)] {
            for ((s, u), v) in a.data().iter().zip(p.data()).zip(q.data()) {
                prop_assert!((s - u - v).abs() <= 1e-12, "{} vs {}", s, u + v);
            }
        }
    }

    #[test]
    fn feedback_and_tabulated_controls_agree(seed in any::<u64>(), x0 in -2.0f64..2.0, sigma0 in 0.0f64..1.0) {
        let lq = benchmark_lq_with::<f64>(LqParams { x0, sigma0, ..Default::default() });
        let b = sample_brownian(TimeGrid::<f64>::new(1.0, 32).unwrap(), 50, SeedSpec::new(seed)).unwrap();
        let x = simulate_forward(&lq.spec, &lq.optimal, None, &b).unwrap();
        let table = ControlLaw::OpenLoop(lq.optimal.tabulate(&x, 1));
        let x2 = simulate_forward(&lq.spec, &table, None, &b).unwrap();
        prop_assert_eq!(x.data(), x2.data());
    }
}
