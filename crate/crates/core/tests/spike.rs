use std::sync::Arc;

use smp_core::fbsde::*;
use smp_core::model::*;
use smp_core::paths::*;
use smp_core::spike::*;

fn bundle(steps: usize, paths: usize, seed: u64) -> BrownianBundle<f64> {
    sample_brownian(TimeGrid::new(1.0, steps).unwrap(), paths, SeedSpec::new(seed)).unwrap()
}

fn coupled() -> BenchmarkProblem<f64> {
    benchmark_coupled_z(0.1).unwrap()
}

#[test]
fn window_is_grid_aligned() {
    let grid = TimeGrid::new(1.0, 16).unwrap();
    assert!(SpikeSpec::new(grid, 0.3, 0.125, Perturbation::Value(vec![1.0])).is_err());
    assert!(SpikeSpec::new(grid, 0.25, 0.1, Perturbation::Value(vec![1.0])).is_err());
    assert!(SpikeSpec::new(grid, 0.75, 0.5, Perturbation::Value(vec![1.0])).is_err());
    let s = SpikeSpec::at_quarter(grid, 0.125, Perturbation::Value(vec![1.0])).unwrap();
    assert_eq!(s.window(), 4..6);
    assert_eq!(s.epsilon(), 0.125);
    assert_eq!(s.t0(), 0.25);
    let ubar = ProcessPanel::constant("u", grid, 3, &[-1.0]);
    let spiked = s.spiked_panel(&ubar);
    for i in 0..=16 {
        let want = if (4..6).contains(&i) { 1.0 } else { -1.0 };
        assert!((0..3).all(|m| spiked.get(m, i) == want));
    }
}

#[test]
fn null_spike_changes_nothing() {
    let cz = coupled();
    let b = bundle(32, 500, 5);
    let opts = PicardOpts::default();
    let r = prepare_reference(&cz.spec, &cz.optimal, &b, &opts).unwrap();
    let spike = SpikeSpec::at_quarter(b.grid(), 0.25, Perturbation::Panel(r.ubar.clone())).unwrap();
    let run = run_spike(&cz.spec, &r, spike, &b, &opts).unwrap();
    assert_eq!(run.cost_change(&r), 0.0);
    assert_eq!(run.solution.x.data(), r.sol.x.data());
    let v = &run.variations;
    for p in [&run.delta.delta, &v.x1, &v.y1, &v.z1, &v.x2, &v.y2, &v.z2, &run.yhat.yhat] {
        assert!(p.data().iter().all(|x| *x == 0.0), "{} not zero", p.label);
    }
}

#[test]
fn closed_form_delta_matches_fixed_point() {
    let cz = coupled();
    let b = bundle(64, 1_000, 8);
    let opts = PicardOpts::default();
    let r = prepare_reference(&cz.spec, &cz.optimal, &b, &opts).unwrap();
    for u in [0.0, 1.0] {
        let spike = SpikeSpec::at_quarter(b.grid(), 0.125, Perturbation::Value(vec![u])).unwrap();
        let closed = solve_delta(&cz.spec, &r.sol, &r.adj1, &spike, 0.1).unwrap();
        let fixed = solve_delta_with(&cz.spec, &r.sol, &r.adj1, &spike, 0.1, Some(DeltaMethod::FixedPoint)).unwrap();
        assert_eq!(closed.method, DeltaMethod::ClosedFormLinear);
        assert_eq!(fixed.method, DeltaMethod::FixedPoint);
        let worst = closed.delta.data().iter().zip(fixed.delta.data()).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        assert!(worst <= 1e-10, "{worst}");
        assert!(closed.max_residual <= 1e-10 && fixed.max_residual <= 1e-10);
        // Delta = (u - ubar) / (1 - alpha) with p = 1
        assert!((closed.delta.get(3, 20) - (u + 1.0) / 0.9).abs() < 1e-10);
        for i in (0..=64).filter(|i| !spike.contains(*i)) {
            assert!((0..1_000).all(|m| closed.delta.get(m, i) == 0.0));
        }
    }
}

fn general_spec(sigma: impl Fn(&Point<f64>, &mut [f64]) + Send + Sync + 'static) -> ProblemSpec<f64> {
    ProblemSpec::new(
        "toy",
        1,
        1,
        1.0,
        vec![0.0],
        Arc::new(|_: &Point<f64>, o: &mut [f64]| o[0] = 0.0),
        Arc::new(sigma),
        Arc::new(|_: &Point<f64>| 0.0),
        Arc::new(|_: &[f64]| 0.0),
    )
}

fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    assert!(f(lo) * f(hi) <= 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(lo) * f(mid) <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn sine_toy_matches_bisection() {
    let spec = general_spec(|p, o| o[0] = 0.5 * p.z.sin() + p.u[0]);
    let x = [0.0];
    for zbar in [-2.0, -0.3, 0.0, 1.1, 2.9] {
        for (ubar, u) in [(0.0, 1.0), (0.5, -1.5), (-1.0, 2.0)] {
            let ub = [ubar];
            let pt = Point::new(0.3, &x, 0.0, zbar, &ub);
            assert_eq!(default_delta_method(&spec, &pt, &[u]), DeltaMethod::FixedPoint);
            let (d, res) = match delta_at(&spec, &pt, &[u], &[1.0], DeltaMethod::FixedPoint, 0.1) {
                Ok(v) => v,
                Err(e) => panic!("{e:?}"),
            };
            let h = |d: f64| d - 0.5 * ((zbar + d).sin() - zbar.sin()) - (u - ubar);
            let oracle = bisect(h, -10.0, 10.0);
            assert!((d - oracle).abs() <= 1e-8, "zbar={zbar}, u={u}: {d} vs {oracle}");
            assert!(res <= 1e-10);
        }
    }
}

#[test]
fn newton_takes_over_when_iteration_diverges() {
    // F(d) = 2 d + (u - ubar) has slope 2, so plain iteration cannot converge
    let spec = general_spec(|p, o| o[0] = 2.0 * p.z + p.u[0]);
    let x = [0.0];
    let pt = Point::new(0.0, &x, 0.0, 0.4, &[0.0]);
    let (d, res) = delta_at(&spec, &pt, &[1.5], &[1.0], DeltaMethod::FixedPoint, 0.1).unwrap();
    assert!((d + 1.5).abs() < 1e-10 && res < 1e-10, "{d}");
}

#[test]
fn sigma_without_z_uses_direct_formula() {
    let spec = general_spec(|p, o| o[0] = p.x[0] + 3.0 * p.u[0]);
    let x = [0.2];
    let pt = Point::new(0.0, &x, 0.0, 0.7, &[0.0]);
    assert_eq!(default_delta_method(&spec, &pt, &[1.0]), DeltaMethod::ClosedFormSz0);
    let (d, _) = delta_at(&spec, &pt, &[1.0], &[0.5], DeltaMethod::ClosedFormSz0, 0.1).unwrap();
    assert_eq!(d, 1.5);
}

#[test]
fn variations_satisfy_relations_on_coupled_benchmark() {
    let cz = coupled();
    let b = bundle(64, 2_000, 17);
    let opts = PicardOpts { tol: 1e-7, ..Default::default() };
    let r = prepare_reference(&cz.spec, &cz.optimal, &b, &opts).unwrap();
    let spike = SpikeSpec::at_quarter(b.grid(), 0.125, Perturbation::Value(vec![1.0])).unwrap();
    let run = run_spike(&cz.spec, &r, spike, &b, &opts).unwrap();
    let v = &run.variations;
    for m in 0..b.paths() {
        assert_eq!(v.x1.get(m, 0), 0.0);
        assert_eq!(v.x2.get(m, 0), 0.0);
        assert_eq!(v.y1.get(m, 0), 0.0);
    }
    let [r1, r2] = v.relation_residuals();
    assert!(r1 <= 5e-2 && r2 <= 5e-2, "{r1} {r2}");
    // chain identities hold node-exactly
    let d = &run.diffs;
    for (k, (a, b_, c)) in [(&d.xi, &v.x1, &v.x2), (&d.eta, &v.y1, &v.y2), (&d.zeta, &v.z1, &v.z2)].into_iter().enumerate() {
        for idx in (0..a[0].data().len()).step_by(37) {
            assert_eq!(a[1].data()[idx], a[0].data()[idx] - b_.data()[idx], "chain {k}");
            assert_eq!(a[2].data()[idx], a[1].data()[idx] - c.data()[idx], "chain {k}");
        }
    }
    // the benchmark is linear, so the expansion is exact up to the Picard tolerance
    assert!((run.cost_change(&r) - v.y2_0()).abs() < 1e-5);
}

#[test]
fn first_order_slopes_on_coupled_benchmark() {
    let cz = coupled();
    let b = bundle(64, 4_000, 23);
    let opts = ExperimentOpts {
        ladder: (2..=5).map(|k| 0.5f64.powi(k)).collect(),
        betas: vec![2.0],
        t0: None,
        perturbation: vec![1.0],
        picard: PicardOpts { tol: 1e-7, ..Default::default() },
    };
    let rep = run_order_experiment(&cz.spec, &cz.optimal, &b, &opts).unwrap();
    assert_eq!(rep.points.len(), 4);
    assert_eq!(rep.rows.len(), 4 * NORMS.len());
    let s = |n: &str| rep.slope(n, 2.0).unwrap().slope;
    assert!((0.8..=1.2).contains(&s("xi1")), "xi1 {}", s("xi1"));
    assert!((0.8..=1.2).contains(&s("X1")), "X1 {}", s("X1"));
    assert!(s("xi2") >= 1.6, "xi2 {}", s("xi2"));
}
