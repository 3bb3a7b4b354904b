use std::sync::Arc;

use smp_core::adjoint::*;
use smp_core::fbsde::*;
use smp_core::model::*;
use smp_core::paths::*;
use smp_core::spike::{solve_delta, Perturbation, SpikeSpec};

fn bundle(steps: usize, paths: usize, seed: u64) -> BrownianBundle<f64> {
    sample_brownian(TimeGrid::new(1.0, steps).unwrap(), paths, SeedSpec::new(seed)).unwrap()
}

fn solved(spec: &ProblemSpec<f64>, u: &ControlLaw<f64>, b: &BrownianBundle<f64>) -> FbsdeSolution<f64> {
    solve_coupled_picard(spec, u, b, &PicardOpts::default()).unwrap()
}

#[test]
fn zero_source_and_terminal_give_zero_adjoint() {
    let mut spec = ProblemSpec::new(
        "quiet",
        1,
        1,
        1.0,
        vec![1.0],
        Arc::new(|p: &Point<f64>, o: &mut [f64]| o[0] = p.u[0]),
        Arc::new(|_: &Point<f64>, o: &mut [f64]| o[0] = 0.3),
        Arc::new(|p: &Point<f64>| p.u[0] * p.u[0]),
        Arc::new(|_: &[f64]| 0.0),
    );
    spec.forward_coupled = false;
    let b = bundle(32, 500, 3);
    let sol = solved(&spec, &ControlLaw::constant(vec![0.2]), &b);
    let a1 = solve_first_order_adjoint(&spec, &sol, &b, &SolverOpts::default()).unwrap();
    assert!(a1.p.data().iter().chain(a1.q.data()).chain(a1.k1.data()).all(|v| v.abs() < 1e-12));
    let a2 = solve_second_order_adjoint(&spec, &sol, &a1, &b, &SolverOpts::default()).unwrap();
    assert!(a2.p.data().iter().chain(a2.q.data()).chain(a2.k2.data()).all(|v| v.abs() < 1e-9));
}

#[test]
fn lq_first_order_adjoint_tracks_state() {
    let lq = benchmark_lq::<f64>();
    let b = bundle(256, 10_000, 7);
    let sol = solved(&lq.spec, &lq.optimal, &b);
    let a1 = solve_first_order_adjoint(&lq.spec, &sol, &b, &SolverOpts::default()).unwrap();
    let err = a1.p.sub(&sol.x, "err").unwrap().sup_node_mean_abs();
    assert!(err <= 5e-2, "sup-node mean |p - X| = {err}");
    // terminal condition pinned exactly
    for m in 0..b.paths() {
        assert_eq!(a1.p.get(m, 256), sol.x.get(m, 256));
    }
    assert!(a1.sigma_z_free);
    assert!(a1.k1_identity_residual <= 1e-10);
    // sigma_x = sigma_y = 0, so K1 is q itself
    assert_eq!(a1.k1.data(), a1.q.data());
}

#[test]
fn lq_second_order_adjoint_integrates_state_curvature() {
    // H_xx = 1 and every other generator term vanishes, so P(t) = 1 + T - t.
    let lq = benchmark_lq::<f64>();
    let b = bundle(64, 2_000, 9);
    let sol = solved(&lq.spec, &lq.optimal, &b);
    let a1 = solve_first_order_adjoint(&lq.spec, &sol, &b, &SolverOpts::default()).unwrap();
    let a2 = solve_second_order_adjoint(&lq.spec, &sol, &a1, &b, &SolverOpts::default()).unwrap();
    for i in 0..=64 {
        let t = i as f64 / 64.0;
        for m in (0..b.paths()).step_by(97) {
            assert!((a2.p.get(m, i) - (2.0 - t)).abs() < 1e-10, "P({t}) = {}", a2.p.get(m, i));
        }
    }
    assert!(a2.q.data().iter().all(|v| v.abs() < 1e-9));
}

#[test]
fn coupled_adjoints_match_closed_form() {
    let alpha = 0.1;
    let cz = benchmark_coupled_z::<f64>(alpha).unwrap();
    let b = bundle(64, 2_000, 13);
    let sol = solved(&cz.spec, &cz.optimal, &b);
    let a1 = solve_first_order_adjoint(&cz.spec, &sol, &b, &SolverOpts::default()).unwrap();
    assert!(a1.p.data().iter().all(|v| (v - 1.0).abs() < 1e-10));
    assert!(a1.max_abs_q < 1e-10);
    assert!(a1.k1.data().iter().all(|v| (v - 1.0 / (1.0 - alpha)).abs() < 1e-10));
    assert!((a1.margin - (1.0 - alpha)).abs() < 1e-10);
    assert!(!a1.sigma_z_free);
    assert!(a1.k1_identity_residual <= 1e-10);
    let a2 = solve_second_order_adjoint(&cz.spec, &sol, &a1, &b, &SolverOpts::default()).unwrap();
    assert!(a2.max_asymmetry <= 1e-10);
    assert!(a2.p.data().iter().all(|v| v.abs() < 1e-10));
    assert!(a2.h_y.data().iter().all(|v| (v + 1.0).abs() < 1e-10));
}

#[test]
fn invertibility_guard_trips() {
    // margin |1 - alpha| = 0.6 sits below a guard of 0.7
    let cz = benchmark_coupled_z::<f64>(0.4).unwrap();
    let b = bundle(16, 200, 1);
    let sol = solved(&cz.spec, &cz.optimal, &b);
    let opts = SolverOpts { c_min: 0.7, ..Default::default() };
    let err = solve_first_order_adjoint(&cz.spec, &sol, &b, &opts).unwrap_err();
    assert!(matches!(err, smp_core::SmpError::Invertibility { .. }), "{err}");
}

#[test]
fn gamma_is_deterministic_discount_on_coupled_benchmark() {
    let cz = benchmark_coupled_z::<f64>(0.1).unwrap();
    let b = bundle(64, 300, 2);
    let sol = solved(&cz.spec, &cz.optimal, &b);
    let a1 = solve_first_order_adjoint(&cz.spec, &sol, &b, &SolverOpts::default()).unwrap();
    let g = solve_gamma(&cz.spec, &sol, &a1, &b).unwrap();
    let dt: f64 = 1.0 / 64.0;
    for i in 0..=64 {
        let want = (1.0 + dt).powi(-(i as i32));
        assert!((g.gamma.get(5, i) - want).abs() < 1e-12);
    }
    assert!(g.min_value() > 0.0);
}

fn exponential_spec(c: f64) -> ProblemSpec<f64> {
    let mut spec = ProblemSpec::new(
        "exp_martingale",
        1,
        1,
        1.0,
        vec![0.0],
        Arc::new(|_: &Point<f64>, o: &mut [f64]| o[0] = 0.0),
        Arc::new(|_: &Point<f64>, o: &mut [f64]| o[0] = 1.0),
        Arc::new(move |p: &Point<f64>| c * p.z),
        Arc::new(|_: &[f64]| 0.0),
    );
    spec.forward_coupled = false;
    spec
}

#[test]
fn gamma_is_a_martingale_without_drift() {
    for (c, seed) in [(0.5, 21), (1.2, 22)] {
        let spec = exponential_spec(c);
        let b = bundle(64, 10_000, seed);
        let sol = solved(&spec, &ControlLaw::constant(vec![0.0]), &b);
        let a1 = solve_first_order_adjoint(&spec, &sol, &b, &SolverOpts::default()).unwrap();
        let g = solve_gamma(&spec, &sol, &a1, &b).unwrap();
        assert!(g.drift.data().iter().all(|v| v.abs() < 1e-12));
        assert!(g.diffusion.data().iter().all(|v| (v - c).abs() < 1e-12));
        assert!(g.min_value() > 0.0);
        let e = g.terminal_mean();
        assert!((e.mean - 1.0).abs() <= 3.0 * e.stderr, "c = {c}: {e:?}");
    }
}

#[test]
fn gamma_is_one_without_coefficients() {
    let lq = benchmark_lq::<f64>();
    let b = bundle(32, 300, 4);
    let sol = solved(&lq.spec, &lq.optimal, &b);
    let a1 = solve_first_order_adjoint(&lq.spec, &sol, &b, &SolverOpts::default()).unwrap();
    let g = solve_gamma(&lq.spec, &sol, &a1, &b).unwrap();
    assert!(g.gamma.data().iter().all(|v| *v == 1.0));
}

struct Chain {
    sol: FbsdeSolution<f64>,
    a1: FirstOrderAdjoint<f64>,
    a2: SecondOrderAdjoint<f64>,
    g: GammaProcess<f64>,
}

fn chain(spec: &ProblemSpec<f64>, u: &ControlLaw<f64>, b: &BrownianBundle<f64>) -> Chain {
    let sol = solved(spec, u, b);
    let a1 = solve_first_order_adjoint(spec, &sol, b, &SolverOpts::default()).unwrap();
    let a2 = solve_second_order_adjoint(spec, &sol, &a1, b, &SolverOpts::default()).unwrap();
    let g = solve_gamma(spec, &sol, &a1, b).unwrap();
    Chain { sol, a1, a2, g }
}

fn yhat_for(spec: &ProblemSpec<f64>, c: &Chain, b: &BrownianBundle<f64>, u: f64, eps: f64) -> YhatSolution<f64> {
    let spike = SpikeSpec::at_quarter(b.grid(), eps, Perturbation::Value(vec![u])).unwrap();
    let d = solve_delta(spec, &c.sol, &c.a1, &spike, 0.1).unwrap();
    solve_yhat(spec, &c.sol, &c.a1, &c.a2, &c.g, &spike, &d, b, &SolverOpts::default()).unwrap()
}

#[test]
fn yhat_estimators_agree_on_coupled_benchmark() {
    let cz = benchmark_coupled_z::<f64>(0.1).unwrap();
    let b = bundle(256, 10_000, 31);
    let c = chain(&cz.spec, &cz.optimal, &b);
    for (u, eps) in [(1.0, 1.0 / 16.0), (0.0, 1.0 / 64.0)] {
        let y = yhat_for(&cz.spec, &c, &b, u, eps);
        let (d, se) = y.agreement();
        assert!(d <= 3.0 * se + 1e-12, "u={u}: |{:?} - {:?}|", y.y0_bsde, y.y0_gamma);
        assert!(y.y0_gamma.mean > 0.0);
    }
    let y = yhat_for(&cz.spec, &c, &b, -1.0, 1.0 / 16.0);
    assert!(y.yhat.data().iter().chain(y.zhat.data()).all(|v| *v == 0.0));
}

#[test]
fn yhat_nonnegative_at_lq_optimum() {
    let lq = benchmark_lq::<f64>();
    let b = bundle(256, 10_000, 37);
    let c = chain(&lq.spec, &lq.optimal, &b);
    for u in [1.0, -2.0, 0.0] {
        let y = yhat_for(&lq.spec, &c, &b, u, 1.0 / 16.0);
        assert!(y.y0_bsde.mean >= -3.0 * y.y0_bsde.stderr, "{:?}", y.y0_bsde);
        let (d, se) = y.agreement();
        assert!(d <= 3.0 * se + 1e-12, "u={u}: |{:?} - {:?}|", y.y0_bsde, y.y0_gamma);
        // forcing (u + X)^2 / 2 on the window
        let i = 64;
        for m in (0..b.paths()).step_by(501) {
            let want = 0.5 * (u + c.sol.x.get(m, i)).powi(2);
            assert!((y.forcing.get(m, i) - want).abs() < 0.1, "{} vs {want}", y.forcing.get(m, i));
        }
    }
}
