use std::sync::Arc;

use smp_core::fbsde::*;
use smp_core::model::*;
use smp_core::paths::*;

fn spec_with(
    b: impl Fn(&Point<f64>, &mut [f64]) + Send + Sync + 'static,
    sigma: impl Fn(&Point<f64>, &mut [f64]) + Send + Sync + 'static,
    g: impl Fn(&Point<f64>) -> f64 + Send + Sync + 'static,
    phi: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    x0: f64,
) -> ProblemSpec<f64> {
    let mut s = ProblemSpec::new("test", 1, 1, 1.0, vec![x0], Arc::new(b), Arc::new(sigma), Arc::new(g), Arc::new(phi));
    s.forward_coupled = false;
    s
}

fn zero_control() -> ControlLaw<f64> {
    ControlLaw::constant(vec![0.0])
}

#[test]
fn frozen_state_without_coefficients() {
    let s = spec_with(|_, o| o[0] = 0.0, |_, o| o[0] = 0.0, |_| 0.0, |x| x[0], 0.7);
    let b = sample_brownian(TimeGrid::new(1.0, 16).unwrap(), 50, SeedSpec::new(1)).unwrap();
    let x = simulate_forward(&s, &zero_control(), None, &b).unwrap();
    assert!(x.data().iter().all(|v| *v == 0.7));
}

fn geometric(mu: f64, nu: f64) -> ProblemSpec<f64> {
    spec_with(move |p, o| o[0] = mu * p.x[0], move |p, o| o[0] = nu * p.x[0], |_| 0.0, |x| x[0], 1.0)
}

#[test]
fn geometric_mean_matches_exponential() {
    let (mu, nu) = (0.5, 0.3);
    let b = sample_brownian(TimeGrid::new(1.0, 512).unwrap(), 10_000, SeedSpec::new(11)).unwrap();
    let x = simulate_forward(&geometric(mu, nu), &zero_control(), None, &b).unwrap();
    let finals: Vec<f64> = (0..b.paths()).map(|m| x.get(m, 512)).collect();
    let e = smp_core::stats::mean_stderr(&finals);
    assert!((e.mean - mu.exp()).abs() <= 3.0 * e.stderr, "{e:?}");
}

#[test]
fn weak_error_halves_with_step() {
    let (mu, nu) = (1.0, 0.2);
    let fine = sample_brownian(TimeGrid::new(1.0, 32).unwrap(), 10_000, SeedSpec::new(5)).unwrap();
    let coarse = fine.coarsen(2).unwrap();
    let s = geometric(mu, nu);
    let err = |b: &BrownianBundle<f64>| {
        let x = simulate_forward(&s, &zero_control(), None, b).unwrap();
        let n = b.grid().steps;
        ((0..b.paths()).map(|m| x.get(m, n)).sum::<f64>() / b.paths() as f64 - mu.exp()).abs()
    };
    let ratio = err(&coarse) / err(&fine);
    assert!((1.0..=3.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn forward_is_deterministic() {
    let b = sample_brownian(TimeGrid::new(1.0, 64).unwrap(), 300, SeedSpec::new(2)).unwrap();
    let s = geometric(0.1, 0.4);
    let a = simulate_forward(&s, &zero_control(), None, &b).unwrap();
    let c = simulate_forward(&s, &zero_control(), None, &b).unwrap();
    assert_eq!(a, c);
}

#[test]
fn non_finite_state_reports_location() {
    let s = spec_with(|p, o| o[0] = if p.t > 0.5 { f64::INFINITY } else { 0.0 }, |_, o| o[0] = 1.0, |_| 0.0, |x| x[0], 0.0);
    let b = sample_brownian(TimeGrid::new(1.0, 8).unwrap(), 3, SeedSpec::new(2)).unwrap();
    match simulate_forward(&s, &zero_control(), None, &b) {
        Err(smp_core::SmpError::NonFinite { path, node, .. }) => assert_eq!((path, node), (0, 6)),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn coupled_forward_needs_closures() {
    let spec = benchmark_coupled_z::<f64>(0.1).unwrap().spec;
    let b = sample_brownian(TimeGrid::new(1.0, 8).unwrap(), 3, SeedSpec::new(2)).unwrap();
    assert!(simulate_forward(&spec, &zero_control(), None, &b).is_err());
    let closure = |_: usize, _: usize, _: &[f64]| (0.0, 0.0);
    assert!(simulate_forward(&spec, &zero_control(), Some(&Decoupling::Closure(&closure)), &b).is_ok());
}

#[test]
fn constant_terminal_gives_constant_solution() {
    let s = spec_with(|_, o| o[0] = 0.0, |_, o| o[0] = 1.0, |_| 0.0, |_| 2.5, 0.0);
    let b = sample_brownian(TimeGrid::new(1.0, 32).unwrap(), 500, SeedSpec::new(3)).unwrap();
    let x = simulate_forward(&s, &zero_control(), None, &b).unwrap();
    let sol = solve_bsde_regression(&s, &zero_control(), &x, &b, &SolverOpts::default()).unwrap();
    assert!(sol.y.data().iter().all(|v| (v - 2.5).abs() < 1e-12));
    assert!(sol.z.data().iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn martingale_representation_of_brownian_motion() {
    let s = spec_with(|_, o| o[0] = 0.0, |_, o| o[0] = 1.0, |_| 0.0, |x| x[0], 0.0);
    let b = sample_brownian(TimeGrid::new(1.0, 256).unwrap(), 10_000, SeedSpec::new(4)).unwrap();
    let x = simulate_forward(&s, &zero_control(), None, &b).unwrap();
    let sol = solve_bsde_regression(&s, &zero_control(), &x, &b, &SolverOpts::default()).unwrap();
    let dy = sol.y.sub(&x, "Y-B").unwrap();
    assert!(dy.sup_node_mean_abs() <= 5e-2);
    let ones = ProcessPanel::constant("1", b.grid(), b.paths(), &[1.0]);
    assert!(sol.z.sub(&ones, "Z-1").unwrap().sup_node_mean_abs() <= 5e-2);
}

#[test]
fn linear_driver_grows_exponentially() {
    let (a, c) = (0.8, 1.5);
    let s = spec_with(|_, o| o[0] = 0.0, |_, o| o[0] = 1.0, move |p| a * p.y, move |_| c, 0.0);
    let b = sample_brownian(TimeGrid::new(1.0, 256).unwrap(), 2_000, SeedSpec::new(8)).unwrap();
    let x = simulate_forward(&s, &zero_control(), None, &b).unwrap();
    let sol = solve_bsde_regression(&s, &zero_control(), &x, &b, &SolverOpts::default()).unwrap();
    let pic = solve_coupled_picard(&s, &zero_control(), &b, &PicardOpts::default()).unwrap();
    let est = pic.y0_estimate(&s, &b);
    let oracle = c * a.exp();
    // first-order time-discretization bias of the implicit step
    let bias = oracle * a * a * b.grid().dt();
    assert!((sol.y.get(0, 0) - oracle).abs() <= 3.0 * est.stderr + bias);
    assert_eq!(sol.inner_unconverged, 0);
}

#[test]
fn decoupled_problem_converges_in_two_sweeps() {
    let bm = benchmark_lq::<f64>();
    let b = sample_brownian(TimeGrid::new(1.0, 64).unwrap(), 2_000, SeedSpec::new(9)).unwrap();
    let sol = solve_coupled_picard(&bm.spec, &bm.optimal, &b, &PicardOpts::default()).unwrap();
    assert!(sol.sweeps() <= 2);
    assert_eq!(*sol.trace.last().unwrap(), 0.0);
}

#[test]
fn coupled_benchmark_residuals_decrease() {
    let bm = benchmark_coupled_z::<f64>(0.1).unwrap();
    let b = sample_brownian(TimeGrid::new(1.0, 256).unwrap(), 10_000, SeedSpec::new(10)).unwrap();
    let sol = solve_coupled_picard(&bm.spec, &bm.optimal, &b, &PicardOpts::default()).unwrap();
    assert!(*sol.trace.last().unwrap() <= 1e-6);
    for w in sol.trace[1..].windows(2) {
        assert!(w[1] < w[0], "{:?}", sol.trace);
    }
    assert!(!sol.damping_engaged);
    // closed form along u = -1: Y = X + (exp(t - T) - 1) / 2 up to O(dt)
    let g = b.grid();
    for i in [0, 64, 128, 255] {
        let t = g.t(i);
        let err = (0..b.paths()).map(|m| (sol.y.get(m, i) - sol.x.get(m, i) - 0.5 * ((t - 1.0f64).exp() - 1.0)).abs()).fold(0.0, f64::max);
        assert!(err < 5e-3, "node {i}: {err}");
    }
}

#[test]
fn picard_reports_non_convergence_with_trace() {
    let bm = benchmark_coupled_z::<f64>(0.1).unwrap();
    let b = sample_brownian(TimeGrid::new(1.0, 32).unwrap(), 500, SeedSpec::new(10)).unwrap();
    let opts = PicardOpts { max_sweeps: 2, tol: 1e-14, ..Default::default() };
    match solve_coupled_picard(&bm.spec, &bm.optimal, &b, &opts) {
        Err(smp_core::SmpError::NoConvergence { detail, .. }) => assert!(detail.contains("residual trace")),
        other => panic!("unexpected {:?}", other.map(|s| s.trace)),
    }
}

#[test]
fn fine_grid_reference_agrees() {
    let bm = benchmark_coupled_z::<f64>(0.1).unwrap();
    let fine = sample_brownian(TimeGrid::new(1.0, 4096).unwrap(), 1_000, SeedSpec::new(12)).unwrap();
    let r = fine_grid_comparison(&bm.spec, &bm.optimal, &fine, 16, &PicardOpts::default()).unwrap();
    assert_eq!(r.coarse_steps, 256);
    // pathwise gaps are the strong Euler error, of order sqrt(dt)
    assert!(r.rel_sup_error.iter().all(|e| *e < 0.1), "{r:?}");
    assert!((r.y0_fine - r.y0_coarse).abs() < 1e-2);
}

fn coefficients() -> LinearCoefficients {
    LinearCoefficients {
        alpha1: vec![-0.5],
        alpha2: vec![0.2],
        alpha3: vec![0.3],
        beta1: vec![0.1],
        beta2: vec![0.1],
        beta3: -0.2,
        gamma1: vec![0.1],
        gamma2: vec![0.2],
        gamma3: 0.1,
        kappa: vec![0.5],
    }
}

fn forcing() -> LinearForcing {
    LinearForcing { x0: vec![1.0], l1: vec![0.3], l2: vec![0.1], l3: 0.2, varsigma: 0.4 }
}

fn linear_solve(b: &BrownianBundle<f64>, c: &LinearCoefficients, f: &LinearForcing) -> (LinearFbsdeSpec<f64>, LinearSolution<f64>) {
    let spec = LinearFbsdeSpec::constant(b.grid(), b.paths(), c, f).unwrap();
    let dec = decouple_linear(&spec, b, &SolverOpts::default()).unwrap();
    let sol = solve_linear_fbsde(&spec, b, &dec, 0.1).unwrap();
    (spec, sol)
}

#[test]
fn zero_data_gives_zero_backward_part() {
    let b = sample_brownian(TimeGrid::new(1.0, 64).unwrap(), 500, SeedSpec::new(13)).unwrap();
    let mut c = coefficients();
    // p has source alpha3 besides its terminal value
    c.kappa = vec![0.0];
    c.alpha3 = vec![0.0];
    let f = LinearForcing { x0: vec![1.0], ..LinearForcing::zero(1) };
    let spec = LinearFbsdeSpec::constant(b.grid(), b.paths(), &c, &f).unwrap();
    let dec = decouple_linear(&spec, &b, &SolverOpts::default()).unwrap();
    assert!(dec.p.data().iter().chain(dec.varphi.data()).all(|v| *v == 0.0));
    let sol = solve_linear_fbsde(&spec, &b, &dec, 0.1).unwrap();
    assert!(sol.y.data().iter().chain(sol.z.data()).all(|v| *v == 0.0));
    assert!(sol.x.get(0, 64) != 1.0);
}

#[test]
fn superposition_of_forcings() {
    let b = sample_brownian(TimeGrid::new(1.0, 128).unwrap(), 2_000, SeedSpec::new(14)).unwrap();
    let c = coefficients();
    let f1 = forcing();
    let f2 = LinearForcing { x0: vec![-0.4], l1: vec![0.7], l2: vec![-0.3], l3: 0.5, varsigma: -1.1 };
    let (_, s1) = linear_solve(&b, &c, &f1);
    let (_, s2) = linear_solve(&b, &c, &f2);
    let (_, s12) = linear_solve(&b, &c, &f1.plus(&f2));
    for (a, (p, q)) in [(&s12.x, (&s1.x, &s2.x)), (&s12.y, (&s1.y, &s2.y)), (&s12.z, (&s1.z, &s2.z))] {
        let worst = a.data().iter().zip(p.data().iter().zip(q.data())).map(|(s, (u, v))| (s - u - v).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-12, "{worst}");
    }
}

#[test]
fn decoupled_linear_solver_matches_picard() {
    let b = sample_brownian(TimeGrid::new(1.0, 256).unwrap(), 10_000, SeedSpec::new(15)).unwrap();
    let c = coefficients();
    let f = forcing();
    let (_, lin) = linear_solve(&b, &c, &f);
    let cc = c.clone();
    let ff = f.clone();
    let mut spec = ProblemSpec::new(
        "linear",
        1,
        1,
        1.0,
        f.x0.clone(),
        Arc::new(move |p: &Point<f64>, o: &mut [f64]| o[0] = cc.alpha1[0] * p.x[0] + cc.beta1[0] * p.y + cc.gamma1[0] * p.z + ff.l1[0]),
        {
            let (cc, ff) = (c.clone(), f.clone());
            Arc::new(move |p: &Point<f64>, o: &mut [f64]| o[0] = cc.alpha2[0] * p.x[0] + cc.beta2[0] * p.y + cc.gamma2[0] * p.z + ff.l2[0])
        },
        {
            let (cc, ff) = (c.clone(), f.clone());
            Arc::new(move |p: &Point<f64>| cc.alpha3[0] * p.x[0] + cc.beta3 * p.y + cc.gamma3 * p.z + ff.l3)
        },
        {
            let (k, s) = (c.kappa[0], f.varsigma);
            Arc::new(move |x: &[f64]| k * x[0] + s)
        },
    );
    spec.forward_coupled = true;
    let pic = solve_coupled_picard(&spec, &zero_control(), &b, &PicardOpts::default()).unwrap();
    for (a, p) in [(&lin.x, &pic.x), (&lin.y, &pic.y), (&lin.z, &pic.z)] {
        let d = a.sub(p, "d").unwrap().sup_node_mean_abs();
        assert!(d <= 5e-2, "{d}");
    }
}

#[test]
fn lbeta_estimate_zero_and_homogeneous() {
    let b = sample_brownian(TimeGrid::new(1.0, 64).unwrap(), 1_000, SeedSpec::new(16)).unwrap();
    let mut c = coefficients();
    c.kappa = vec![0.0];
    let (spec, sol) = linear_solve(&b, &c, &LinearForcing::zero(1));
    let beta = MomentSpec::new(4.0, NormKind::Sup).unwrap();
    let r = check_lbeta_estimate(&sol, &spec, beta);
    assert_eq!((r.lhs, r.rhs, r.ratio), (0.0, 0.0, 0.0));

    let c = coefficients();
    let (s1, a) = linear_solve(&b, &c, &forcing());
    let (s2, d) = linear_solve(&b, &c, &forcing().scaled(2.0));
    let r1 = check_lbeta_estimate(&a, &s1, beta);
    let r2 = check_lbeta_estimate(&d, &s2, beta);
    assert!((r2.lhs / r1.lhs - 16.0).abs() < 1e-9);
    assert!((r2.rhs / r1.rhs - 16.0).abs() < 1e-9);
    assert!((r2.ratio - r1.ratio).abs() <= 1e-10 * r1.ratio);
}

#[test]
fn estimate_ratio_is_stable_over_forcings() {
    let b = sample_brownian(TimeGrid::new(1.0, 64).unwrap(), 2_000, SeedSpec::new(17)).unwrap();
    let beta = MomentSpec::new(2.0, NormKind::Sup).unwrap();
    let r = estimate_stability(&coefficients(), &b, 20, 99, beta, &SolverOpts::default()).unwrap();
    assert_eq!(r.ratios.len(), 20);
    assert!(r.ratios.iter().all(|v| v.is_finite() && *v > 0.0));
    assert!(r.spread <= 2.0, "{r:?}");
}
