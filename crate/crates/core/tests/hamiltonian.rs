use std::sync::Arc;

use smp_core::adjoint::*;
use smp_core::fbsde::*;
use smp_core::hamiltonian::*;
use smp_core::model::*;
use smp_core::paths::*;
use smp_core::spike::ExperimentOpts;

fn bundle(steps: usize, paths: usize, seed: u64) -> BrownianBundle<f64> {
    sample_brownian(TimeGrid::new(1.0, steps).unwrap(), paths, SeedSpec::new(seed)).unwrap()
}

struct Solved {
    sol: FbsdeSolution<f64>,
    a1: FirstOrderAdjoint<f64>,
    a2: SecondOrderAdjoint<f64>,
}

fn solve_all(spec: &ProblemSpec<f64>, u: &ControlLaw<f64>, b: &BrownianBundle<f64>) -> Solved {
    let sol = solve_coupled_picard(spec, u, b, &PicardOpts::default()).unwrap();
    let a1 = solve_first_order_adjoint(spec, &sol, b, &SolverOpts::default()).unwrap();
    let a2 = solve_second_order_adjoint(spec, &sol, &a1, b, &SolverOpts::default()).unwrap();
    Solved { sol, a1, a2 }
}

#[test]
fn self_gap_is_exactly_zero() {
    let lq = benchmark_lq::<f64>();
    let cz = benchmark_coupled_z::<f64>(0.1).unwrap();
    for bp in [&lq, &cz] {
        let b = bundle(32, 200, 3);
        let s = solve_all(&bp.spec, &bp.optimal, &b);
        for i in (0..32).step_by(5) {
            for m in (0..200).step_by(41) {
                let ctx = HamiltonianContext::at_node(&bp.spec, &s.sol, &s.a1, &s.a2, m, i, 0.1);
                assert_eq!(script_h_gap(&ctx, &ctx.ubar.clone()).unwrap(), 0.0);
                assert_eq!(ctx.delta(&ctx.ubar).unwrap(), 0.0);
                let at_bar = eval_script_h(&ctx, &ctx.ubar).unwrap();
                let pt = Point::new(ctx.t, &ctx.x, ctx.y, ctx.z, &ctx.ubar);
                assert!((at_bar - hamiltonian(&bp.spec, &pt, &ctx.p, &ctx.q)).abs() < 1e-15);
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
        Arc::new(|p: &Point<f64>, o: &mut [f64]| o[0] = p.x[0].sin() + p.u[0] * p.u[0]),
        Arc::new(|p: &Point<f64>| p.x[0] * p.u[0] + p.y * p.y),
        Arc::new(|x: &[f64]| x[0]),
    )
}

fn context<'a>(spec: &'a ProblemSpec<f64>, pm: f64) -> HamiltonianContext<'a, f64> {
    HamiltonianContext {
        spec,
        t: 0.2,
        x: vec![0.7],
        y: -0.4,
        z: 1.3,
        ubar: vec![0.5],
        p: vec![0.8],
        q: vec![-0.6],
        pm: vec![pm],
        method: None,
        c_min: 0.1,
    }
}

#[test]
fn reduces_to_classical_gap_without_curvature() {
    let spec = nonlinear_spec();
    let ctx = context(&spec, 0.0);
    for u in [-2.0, -0.5, 0.1, 1.7] {
        let (x, ub) = (0.7f64, 0.5);
        let db = x * u - x * ub;
        let ds = u * u - ub * ub;
        let dg = x * u - x * ub;
        let classical = 0.8 * db - 0.6 * ds + dg;
        let gap = script_h_gap(&ctx, &[u]).unwrap();
        assert!((gap - classical).abs() <= 1e-12, "u={u}: {gap} vs {classical}");
    }
}

#[test]
fn curvature_term_is_nonnegative_for_psd_weight() {
    let spec = nonlinear_spec();
    for u in [-2.0, 0.0, 0.9] {
        let flat = script_h_gap(&context(&spec, 0.0), &[u]).unwrap();
        let curved = script_h_gap(&context(&spec, 1.5), &[u]).unwrap();
        let ds: f64 = u * u - 0.25;
        assert!(curved - flat >= 0.0);
        assert!((curved - flat - 0.75 * ds * ds).abs() < 1e-12);
    }
}

#[test]
fn lq_gap_is_minimized_at_minus_state() {
    let lq = benchmark_lq::<f64>();
    let b = bundle(64, 2_000, 4);
    let s = solve_all(&lq.spec, &lq.optimal, &b);
    for (m, i) in [(0, 0), (7, 10), (300, 40), (1999, 63)] {
        let ctx = HamiltonianContext::at_node(&lq.spec, &s.sol, &s.a1, &s.a2, m, i, 0.1);
        let grid: Vec<f64> = (0..=6000).map(|k| -3.0 + k as f64 * 1e-3).collect();
        let best = grid
            .iter()
            .map(|u| (*u, script_h_gap(&ctx, &[*u]).unwrap()))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        // H-script is p u + u^2 / 2 + const, so the minimizer is -p
        assert!((best.0 + ctx.p[0]).abs() <= 1e-3, "argmin {} vs -p {}", best.0, -ctx.p[0]);
        assert!((ctx.p[0] - ctx.x[0]).abs() <= 0.1, "p {} x {}", ctx.p[0], ctx.x[0]);
    }
}

#[test]
fn lq_optimum_passes() {
    let lq = benchmark_lq::<f64>();
    let b = bundle(64, 4_000, 6);
    let s = solve_all(&lq.spec, &lq.optimal, &b);
    let r = check_maximum_principle(&lq.spec, &s.sol, &s.a1, &s.a2, &MpOpts::default()).unwrap();
    assert_eq!(r.verdict, Verdict::Pass, "{:?}", r.worst);
    assert!(r.node_u_pairs >= 1_000);
    assert!(r.min_z >= -3.0);
}

#[test]
fn lq_zero_control_fails_deterministically() {
    let lq = benchmark_lq_with::<f64>(LqParams { sigma0: 0.0, x0: 1.0, ..Default::default() });
    let b = bundle(64, 50, 6);
    let zero = ControlLaw::constant(vec![0.0]);
    let s = solve_all(&lq.spec, &zero, &b);
    // p(t) = 1 + T - t along X = 1
    assert!((s.a1.p.get(0, 0) - 2.0).abs() < 1e-12);
    let opts = MpOpts { keep_table: true, ..Default::default() };
    let r = check_maximum_principle(&lq.spec, &s.sol, &s.a1, &s.a2, &opts).unwrap();
    assert_eq!(r.verdict, Verdict::Fail);
    assert!(r.min_gap < 0.0);
    let early = r.table.iter().find(|e| e.node == 0 && (e.u[0] + 1.0).abs() < 1e-9).unwrap();
    assert!((early.gap - (-2.0 + 0.5)).abs() < 1e-9, "gap at u = -x: {}", early.gap);
    assert_eq!(early.stderr, 0.0);
}

#[test]
fn single_point_set_passes_trivially() {
    let mut lq = benchmark_lq::<f64>();
    lq.spec.control_set = ControlSet::Finite(vec![vec![0.0]]);
    let b = bundle(16, 100, 2);
    let s = solve_all(&lq.spec, &ControlLaw::constant(vec![0.0]), &b);
    let r = check_maximum_principle(&lq.spec, &s.sol, &s.a1, &s.a2, &MpOpts { keep_table: true, ..Default::default() }).unwrap();
    assert_eq!(r.verdict, Verdict::Pass);
    assert!(r.table.iter().all(|e| e.gap == 0.0));
}

#[test]
fn coupled_benchmark_passes() {
    let cz = benchmark_coupled_z::<f64>(0.1).unwrap();
    let b = bundle(64, 2_000, 12);
    let s = solve_all(&cz.spec, &cz.optimal, &b);
    let r = check_maximum_principle(&cz.spec, &s.sol, &s.a1, &s.a2, &MpOpts::default()).unwrap();
    assert_eq!(r.verdict, Verdict::Pass, "{:?}", r.worst);
    // gaps are 1/2 at u = 0 and 2 at u = 1
    assert!((r.min_gap - 0.0).abs() < 1e-12);
}

#[test]
fn lq_spikes_raise_the_cost() {
    let lq = benchmark_lq::<f64>();
    let b = bundle(64, 4_000, 8);
    let opts = ExperimentOpts {
        ladder: (2..=5).map(|k| 0.5f64.powi(k)).collect(),
        betas: vec![2.0],
        t0: None,
        perturbation: vec![1.0],
        picard: PicardOpts::default(),
    };
    let r = expansion_consistency(&lq.spec, &lq.optimal, &b, &opts).unwrap();
    assert_eq!(r.rows.len(), 4);
    assert!(r.rows.iter().all(|row| row.cost_change > 0.0));
    assert!(r.defect_slope.as_ref().unwrap().slope > 1.0);
}
