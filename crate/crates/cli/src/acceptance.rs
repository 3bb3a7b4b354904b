//! The acceptance suite: nine criteria, each made of named checks.
//!
//! A few checks cannot pass for a correct implementation (the reasons are in
//! the README); they still print FAIL and are listed in [`DOCUMENTED_GAPS`]
//! so that only unexpected failures fail the test target.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use serde::Serialize;
use smp_core::adjoint::{solve_first_order_adjoint, solve_gamma, solve_second_order_adjoint};
use smp_core::fbsde::{
    decouple_linear, estimate_stability, fine_grid_comparison, solve_coupled_picard, solve_linear_fbsde, LinearCoefficients,
    LinearFbsdeSpec, LinearForcing, PicardOpts,
};
use smp_core::hamiltonian::{check_maximum_principle, MpOpts, MpReport, Verdict};
use smp_core::model::{benchmark_coupled_z, benchmark_lq, benchmark_lq_with, BenchmarkProblem, ControlLaw, LqParams, Point, ProblemSpec};
use smp_core::paths::{sample_brownian, BrownianBundle, MomentSpec, NormKind, ProcessPanel, SeedSpec, TimeGrid};
use smp_core::spike::{
    order_experiment_on, prepare_reference, run_spike, solve_delta_with, DeltaMethod, ExperimentOpts, OrderReport, Perturbation,
    Reference, SpikeSpec,
};
use smp_core::SmpError;

use crate::commands::version_string;
use crate::config::RunConfig;
use crate::error::CliResult;

/// Checks that fail for analytical reasons rather than implementation defects.
pub const DOCUMENTED_GAPS: &[&str] = &[
    // constant diffusion makes the first-order remainder O(eps), not O(sqrt eps)
    "lq.xi1.beta2",
    "lq.eta1.beta2",
    "lq.xi1.beta4",
    "lq.eta1.beta4",
    // the coupled benchmark is linear with zero Hessians: the defect is exactly 0
    "coupled_z.defect_slope",
    // the discrete relations hold exactly, residuals sit at rounding level
    "coupled_z.residual1.shrink",
    "coupled_z.residual2.shrink",
    // the second-order adjoint of the LQ benchmark is 1 + T - t
    "lq.P_vs_1",
];

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
    pub documented_gap: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct Criterion {
    pub id: u8,
    pub title: String,
    pub checks: Vec<Check>,
    /// Informational values that are not gated.
    pub notes: Vec<String>,
}

impl Criterion {
    fn new(id: u8, title: &str) -> Self {
        Self { id, title: title.into(), checks: Vec::new(), notes: Vec::new() }
    }

    fn check(&mut self, name: &str, pass: bool, detail: String) {
        let documented_gap = !pass && DOCUMENTED_GAPS.contains(&name);
        self.checks.push(Check { name: name.into(), pass, detail, documented_gap });
    }

    fn error(&mut self, what: &str, e: &SmpError) {
        self.check(what, false, format!("error: {e}"));
    }

    fn note(&mut self, s: String) {
        self.notes.push(s);
    }

    pub fn pass(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.pass)
    }

    pub fn unexpected_failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.pass && !c.documented_gap).collect()
    }

    /// One summary line.
    pub fn line(&self) -> String {
        let failed: Vec<String> = self
            .checks
            .iter()
            .filter(|c| !c.pass)
            .map(|c| if c.documented_gap { format!("{} (documented)", c.name) } else { c.name.clone() })
            .collect();
        let tail = if failed.is_empty() { String::new() } else { format!(" | failed: {}", failed.join(", ")) };
        format!("criterion {} {} {}{}", self.id, if self.pass() { "PASS" } else { "FAIL" }, self.title, tail)
    }

    /// The line followed by every check and note.
    pub fn details(&self) -> Vec<String> {
        let mut out = Vec::new();
        for c in &self.checks {
            out.push(format!("    [{}] {}: {}", if c.pass { "ok" } else { "FAIL" }, c.name, c.detail));
        }
        for n in &self.notes {
            out.push(format!("    note: {n}"));
        }
        out
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub version: String,
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
    pub criteria: Vec<Criterion>,
}

impl SuiteReport {
    pub fn unexpected_failures(&self) -> usize {
        self.criteria.iter().map(|c| c.unexpected_failures().len()).sum()
    }
}

/// Scale and selection of a suite run.
#[derive(Clone, Debug)]
pub struct SuiteOpts {
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
    pub ladder: Vec<f64>,
    pub betas: Vec<f64>,
    pub picard: PicardOpts,
    pub mp: MpOpts,
    pub criteria: Vec<u8>,
    /// The `smp` binary, needed by the reproducibility criterion.
    pub binary: Option<PathBuf>,
}

impl SuiteOpts {
    pub fn from_config(config: &RunConfig, binary: Option<PathBuf>) -> Self {
        Self {
            paths: config.solver.paths,
            steps: config.solver.steps,
            seed: config.seed,
            ladder: config.experiment.ladder.clone().expect("resolved"),
            betas: config.experiment.betas.clone(),
            picard: config.picard_opts(),
            mp: config.mp_opts(false),
            criteria: config.bench.criteria.clone(),
            binary,
        }
    }
}

struct Problem {
    bp: BenchmarkProblem<f64>,
    reference: Reference<f64>,
    order: OrderReport,
}

struct Ctx<'a> {
    opts: &'a SuiteOpts,
    bundle: BrownianBundle<f64>,
    lq: Option<Result<Problem, SmpError>>,
    cz: Option<Result<Problem, SmpError>>,
    fine: Option<BrownianBundle<f64>>,
}

impl<'a> Ctx<'a> {
    fn experiment(&self) -> ExperimentOpts {
        ExperimentOpts {
            ladder: self.opts.ladder.clone(),
            betas: self.opts.betas.clone(),
            t0: None,
            perturbation: vec![1.0],
            picard: self.opts.picard.clone(),
        }
    }

    fn problem(&self, bp: BenchmarkProblem<f64>) -> Result<Problem, SmpError> {
        let reference = prepare_reference(&bp.spec, &bp.optimal, &self.bundle, &self.opts.picard)?;
        let order = order_experiment_on(&bp.spec, &reference, &self.bundle, &self.experiment())?;
        Ok(Problem { bp, reference, order })
    }

    fn lq(&mut self) -> Result<&Problem, SmpError> {
        if self.lq.is_none() {
            self.lq = Some(self.problem(benchmark_lq()));
        }
        self.lq.as_ref().unwrap().as_ref().map_err(Clone::clone)
    }

    fn cz(&mut self) -> Result<&Problem, SmpError> {
        if self.cz.is_none() {
            let r = benchmark_coupled_z(0.1).and_then(|bp| self.problem(bp));
            self.cz = Some(r);
        }
        self.cz.as_ref().unwrap().as_ref().map_err(Clone::clone)
    }

    /// Bundle with twice the steps on the same seed; its coarsening shares
    /// paths with it exactly.
    fn fine(&mut self) -> Result<&BrownianBundle<f64>, SmpError> {
        if self.fine.is_none() {
            let g = TimeGrid::new(1.0, 2 * self.opts.steps)?;
            self.fine = Some(sample_brownian(g, self.opts.paths, SeedSpec::new(self.opts.seed))?);
        }
        Ok(self.fine.as_ref().unwrap())
    }
}

fn slope_check(c: &mut Criterion, name: &str, order: &OrderReport, norm: &str, beta: f64, lo: f64, hi: f64) {
    match order.slope(norm, beta) {
        Some(f) => c.check(name, f.slope >= lo && f.slope <= hi, format!("slope {:.3} (±{:.3}) in [{lo}, {hi}]", f.slope, f.half_width)),
        None => c.check(name, false, "no fit".into()),
    }
}

fn slope_note(order: &OrderReport, norm: &str, beta: f64) -> String {
    order.slope(norm, beta).map_or("n/a".into(), |f| format!("{:.3}", f.slope))
}

fn ladder_failures(c: &mut Criterion, prefix: &str, order: &OrderReport) {
    let failed: Vec<String> = order.points.iter().filter_map(|p| p.failed.as_ref().map(|e| format!("eps {}: {e}", p.eps))).collect();
    c.check(&format!("{prefix}.ladder_solves"), failed.is_empty(), if failed.is_empty() { format!("{} points", order.points.len()) } else { failed.join("; ") });
    if order.dropped_largest {
        c.note(format!("{prefix}: largest width left out of the fits (damped solve)"));
    }
}

fn c1(ctx: &mut Ctx) -> Criterion {
    let mut c = Criterion::new(1, "first-order spike estimate");
    match ctx.lq() {
        Ok(lq) => {
            let o = &lq.order;
            ladder_failures(&mut c, "lq", o);
            slope_check(&mut c, "lq.xi1.beta2", o, "xi1", 2.0, 0.8, 1.2);
            slope_check(&mut c, "lq.eta1.beta2", o, "eta1", 2.0, 0.8, 1.2);
            slope_check(&mut c, "lq.xi1.beta4", o, "xi1", 4.0, 1.7, 2.3);
            slope_check(&mut c, "lq.eta1.beta4", o, "eta1", 4.0, 1.7, 2.3);
        }
        Err(e) => c.error("lq", &e),
    }
    if let Ok(cz) = ctx.cz() {
        let o = &cz.order;
        c.note(format!(
            "coupled_z slopes: xi1 beta=2 {}, eta1 beta=2 {}, xi1 beta=4 {}, eta1 beta=4 {}",
            slope_note(o, "xi1", 2.0),
            slope_note(o, "eta1", 2.0),
            slope_note(o, "xi1", 4.0),
            slope_note(o, "eta1", 4.0)
        ));
    }
    c
}

fn c2(ctx: &mut Ctx) -> Criterion {
    let mut c = Criterion::new(2, "variational magnitude");
    match ctx.cz() {
        Ok(cz) => {
            let o = &cz.order;
            ladder_failures(&mut c, "coupled_z", o);
            slope_check(&mut c, "coupled_z.X1.beta2", o, "X1", 2.0, 0.8, 1.2);
            slope_check(&mut c, "coupled_z.xi2.beta2", o, "xi2", 2.0, 1.6, f64::INFINITY);
        }
        Err(e) => c.error("coupled_z", &e),
    }
    if let Ok(lq) = ctx.lq() {
        let max_x1 = lq.order.rows.iter().filter(|r| r.norm == "X1").map(|r| r.estimate).fold(0.0, f64::max);
        c.note(format!("lq: max E[sup |X1|^beta] over the ladder = {max_x1:e} (X1 vanishes for constant diffusion)"));
    }
    c
}

fn defect_check(c: &mut Criterion, prefix: &str, o: &OrderReport) {
    let name = format!("{prefix}.defect_slope");
    match &o.defect_slope {
        Some(f) => c.check(&name, f.slope > 1.2, format!("slope {:.3} (±{:.3}) > 1.2", f.slope, f.half_width)),
        None => c.check(&name, false, "no fit".into()),
    }
    let d: Vec<String> = o.points.iter().map(|p| format!("{:.2e}", p.defect)).collect();
    c.note(format!("{prefix} defects over the ladder: {}", d.join(", ")));
}

fn c3(ctx: &mut Ctx) -> Criterion {
    let mut c = Criterion::new(3, "expansion defect");
    match ctx.lq() {
        Ok(lq) => defect_check(&mut c, "lq", &lq.order),
        Err(e) => c.error("lq", &e),
    }
    match ctx.cz() {
        Ok(cz) => defect_check(&mut c, "coupled_z", &cz.order),
        Err(e) => c.error("coupled_z", &e),
    }
    c
}

fn single_spike_residuals(bp: &BenchmarkProblem<f64>, bundle: &BrownianBundle<f64>, eps: f64, picard: &PicardOpts) -> Result<[f64; 2], SmpError> {
    let reference = prepare_reference(&bp.spec, &bp.optimal, bundle, picard)?;
    let spike = SpikeSpec::at_quarter(bundle.grid(), eps, Perturbation::Value(vec![1.0]))?;
    let run = run_spike(&bp.spec, &reference, spike, bundle, picard)?;
    Ok(run.variations.relation_residuals())
}

fn c4(ctx: &mut Ctx) -> Criterion {
    let mut c = Criterion::new(4, "decoupling relations");
    let steps = ctx.opts.steps;
    match ctx.cz() {
        Ok(cz) => {
            let worst = cz.order.points.iter().filter(|p| p.failed.is_none()).fold([0.0f64; 2], |a, p| {
                [a[0].max(p.relation_residuals[0]), a[1].max(p.relation_residuals[1])]
            });
            c.check("coupled_z.residual1", worst[0] <= 5e-2, format!("max over the ladder {:.3e} <= 5e-2 at N = {steps}", worst[0]));
            c.check("coupled_z.residual2", worst[1] <= 5e-2, format!("max over the ladder {:.3e} <= 5e-2 at N = {steps}", worst[1]));
        }
        Err(e) => c.error("coupled_z", &e),
    }
    let eps = ctx.opts.ladder.iter().cloned().fold(0.0, f64::max);
    let picard = ctx.opts.picard.clone();
    let r = ctx.fine().and_then(|fine| {
        let coarse = fine.coarsen(2)?;
        let bp = benchmark_coupled_z(0.1)?;
        let rc = single_spike_residuals(&bp, &coarse, eps, &picard)?;
        let rf = single_spike_residuals(&bp, fine, eps, &picard)?;
        Ok((rc, rf))
    });
    match r {
        Ok((rc, rf)) => {
            for k in 0..2 {
                let ratio = rc[k] / rf[k];
                c.check(
                    &format!("coupled_z.residual{}.shrink", k + 1),
                    ratio >= 1.5,
                    format!("eps {eps}: {:.3e} at N = {steps}, {:.3e} at N = {}, ratio {ratio:.2} >= 1.5", rc[k], rf[k], 2 * steps),
                );
            }
        }
        Err(e) => c.error("coupled_z.refinement", &e),
    }
    c
}

fn mp_on(bp: &BenchmarkProblem<f64>, control: &ControlLaw<f64>, bundle: &BrownianBundle<f64>, picard: &PicardOpts, mp: &MpOpts) -> Result<MpReport, SmpError> {
    let sol = solve_coupled_picard(&bp.spec, control, bundle, picard)?;
    let a1 = solve_first_order_adjoint(&bp.spec, &sol, bundle, &picard.solver)?;
    let a2 = solve_second_order_adjoint(&bp.spec, &sol, &a1, bundle, &picard.solver)?;
    check_maximum_principle(&bp.spec, &sol, &a1, &a2, mp)
}

fn c5(ctx: &mut Ctx) -> Criterion {
    let mut c = Criterion::new(5, "maximum principle");
    let mp = ctx.opts.mp.clone();
    match ctx.lq() {
        Ok(lq) => {
            let r = &lq.reference;
            match check_maximum_principle(&lq.bp.spec, &r.sol, &r.adj1, &r.adj2, &mp) {
                Ok(rep) => {
                    c.check("lq.optimal.verdict", rep.verdict == Verdict::Pass, format!("{:?}, min z {:.3}", rep.verdict, rep.min_z));
                    c.check("lq.optimal.pairs", rep.node_u_pairs >= 1000, format!("{} (node, u) pairs >= 1000", rep.node_u_pairs));
                }
                Err(e) => c.error("lq.optimal", &e),
            }
        }
        Err(e) => c.error("lq", &e),
    }
    let bp = benchmark_lq_with(LqParams { sigma0: 0.0, x0: 1.0, ..Default::default() });
    match mp_on(&bp, &ControlLaw::constant(vec![0.0]), &ctx.bundle, &ctx.opts.picard, &mp) {
        Ok(rep) => {
            c.check("lq.zero.verdict", rep.verdict == Verdict::Fail, format!("{:?}", rep.verdict));
            match &rep.worst {
                Some(w) => c.check(
                    "lq.zero.deterministic_gap",
                    w.gap < 0.0 && w.stderr == 0.0,
                    format!("worst gap {:.4} at t = {:.3}, u = {:?}, stderr {}", w.gap, w.t, w.u, w.stderr),
                ),
                None => c.check("lq.zero.deterministic_gap", false, "no worst entry".into()),
            }
        }
        Err(e) => c.error("lq.zero", &e),
    }
    c
}

fn c6(ctx: &mut Ctx) -> Criterion {
    let mut c = Criterion::new(6, "linear-sigma case");
    let mp = ctx.opts.mp.clone();
    let eps = ctx.opts.ladder.iter().cloned().fold(0.0, f64::max);
    let grid = ctx.bundle.grid();
    match ctx.cz() {
        Ok(cz) => {
            let r = &cz.reference;
            let mut worst = 0.0f64;
            let mut err = None;
            for u in [0.0, 1.0] {
                let res = SpikeSpec::at_quarter(grid, eps, Perturbation::Value(vec![u])).and_then(|s| {
                    let a = solve_delta_with(&cz.bp.spec, &r.sol, &r.adj1, &s, 0.1, Some(DeltaMethod::ClosedFormLinear))?;
                    let b = solve_delta_with(&cz.bp.spec, &r.sol, &r.adj1, &s, 0.1, Some(DeltaMethod::FixedPoint))?;
                    Ok(a.delta.data().iter().zip(b.delta.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
                });
                match res {
                    Ok(d) => worst = worst.max(d),
                    Err(e) => err = Some(e),
                }
            }
            match err {
                Some(e) => c.error("coupled_z.delta", &e),
                None => c.check("coupled_z.delta_agreement", worst <= 1e-10, format!("max node-wise |closed form - fixed point| = {worst:.3e} <= 1e-10")),
            }
            match check_maximum_principle(&cz.bp.spec, &r.sol, &r.adj1, &r.adj2, &mp) {
                Ok(rep) => c.check("coupled_z.mp_verdict", rep.verdict == Verdict::Pass, format!("{:?}, min z {:.3}, min gap {:.4}", rep.verdict, rep.min_z, rep.min_gap)),
                Err(e) => c.error("coupled_z.mp", &e),
            }
        }
        Err(e) => c.error("coupled_z", &e),
    }
    let picard = ctx.opts.picard.clone();
    let r = ctx.fine().and_then(|fine| {
        let bp = benchmark_coupled_z(0.1)?;
        fine_grid_comparison(&bp.spec, &bp.optimal, fine, 2, &picard)
    });
    match r {
        Ok(f) => {
            let worst = f.rel_sup_error.iter().cloned().fold(0.0, f64::max);
            c.check(
                "coupled_z.fine_grid_reference",
                worst < 0.1,
                format!("relative sup error {worst:.3e} < 0.1 between N = {} and N = {}; Y(0) {:.5} vs {:.5}", f.coarse_steps, f.fine_steps, f.y0_coarse, f.y0_fine),
            );
        }
        Err(e) => c.error("coupled_z.fine_grid_reference", &e),
    }
    c
}

fn linear_coefficients() -> LinearCoefficients {
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

fn c7(ctx: &mut Ctx) -> Criterion {
    let mut c = Criterion::new(7, "linear solver");
    let coeffs = linear_coefficients();
    let b = &ctx.bundle;
    let opts = ctx.opts.picard.solver.clone();
    let solve = |f: &LinearForcing| -> Result<_, SmpError> {
        let spec = LinearFbsdeSpec::constant(b.grid(), b.paths(), &coeffs, f)?;
        let dec = decouple_linear(&spec, b, &opts)?;
        solve_linear_fbsde(&spec, b, &dec, opts.c_min)
    };
    let f1 = LinearForcing { x0: vec![1.0], l1: vec![0.3], l2: vec![0.1], l3: 0.2, varsigma: 0.4 };
    let f2 = LinearForcing { x0: vec![-0.4], l1: vec![0.7], l2: vec![-0.3], l3: 0.5, varsigma: -1.1 };
    match (solve(&f1), solve(&f2), solve(&f1.plus(&f2))) {
        (Ok(s1), Ok(s2), Ok(s12)) => {
            let gap = |a: &ProcessPanel<f64>, p: &ProcessPanel<f64>, q: &ProcessPanel<f64>| {
                a.data().iter().zip(p.data().iter().zip(q.data())).map(|(s, (u, v))| (s - u - v).abs()).fold(0.0, f64::max)
            };
            let worst = gap(&s12.x, &s1.x, &s2.x).max(gap(&s12.y, &s1.y, &s2.y)).max(gap(&s12.z, &s1.z, &s2.z));
            c.check("superposition", worst <= 1e-12, format!("max |S(f1 + f2) - S(f1) - S(f2)| = {worst:.3e} <= 1e-12"));
        }
        (r1, r2, r3) => {
            let e = [r1.err(), r2.err(), r3.err()].into_iter().flatten().next().unwrap();
            c.error("superposition", &e);
        }
    }
    let beta = MomentSpec { beta: 2.0, kind: NormKind::Sup };
    match estimate_stability(&coeffs, b, 20, ctx.opts.seed, beta, &opts) {
        Ok(r) => {
            let lo = r.ratios.iter().cloned().fold(f64::MAX, f64::min);
            let hi = r.ratios.iter().cloned().fold(f64::MIN, f64::max);
            c.check("estimate_stability", r.spread <= 2.0, format!("C_emp over 20 draws in [{lo:.4}, {hi:.4}], max/min {:.3} <= 2", r.spread));
        }
        Err(e) => c.error("estimate_stability", &e),
    }
    c
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

fn yhat_checks(c: &mut Criterion, prefix: &str, o: &OrderReport) {
    let mut worst_d = 0.0f64;
    let mut worst_se = 0.0f64;
    let mut ok = true;
    for p in o.points.iter().filter(|p| p.failed.is_none()) {
        let d = (p.yhat_bsde.mean - p.yhat_gamma.mean).abs();
        let se = (p.yhat_bsde.stderr.powi(2) + p.yhat_gamma.stderr.powi(2)).sqrt();
        // rounding floor for the deterministic case, as in the maximum principle check
        let floor = 1e-12 * (1.0 + p.yhat_bsde.mean.abs());
        ok &= d <= 3.0 * se + floor;
        if d > worst_d {
            worst_d = d;
            worst_se = se;
        }
    }
    c.check(
        &format!("{prefix}.yhat_agreement"),
        ok && !o.points.is_empty(),
        format!("max |BSDE - gamma| = {worst_d:.3e} with combined stderr {worst_se:.3e}, within 3 stderr + 1e-12 (1 + |Y-hat|)"),
    );
}

fn c8(ctx: &mut Ctx) -> Criterion {
    let mut c = Criterion::new(8, "adjoint oracles");
    let horizon = 1.0;
    match ctx.lq() {
        Ok(lq) => {
            let r = &lq.reference;
            let p_err = r.adj1.p.sub(&r.sol.x, "p - X").map(|d| d.sup_node_mean_abs());
            match p_err {
                Ok(e) => c.check("lq.p_vs_X", e <= 5e-2, format!("sup-node mean |p - X| = {e:.3e} <= 5e-2")),
                Err(e) => c.error("lq.p_vs_X", &e),
            }
            let grid = r.adj2.p.grid();
            let paths = r.adj2.p.paths();
            let mut one = 0.0f64;
            let mut riccati = 0.0f64;
            for i in 0..grid.nodes() {
                let t = grid.t(i);
                let (mut a, mut b) = (0.0, 0.0);
                for m in 0..paths {
                    a += (r.adj2.p.get(m, i) - 1.0).abs();
                    b += (r.adj2.p.get(m, i) - (1.0 + horizon - t)).abs();
                }
                one = one.max(a / paths as f64);
                riccati = riccati.max(b / paths as f64);
            }
            c.check("lq.P_vs_1", one <= 5e-2, format!("sup-node mean |P - 1| = {one:.3e} <= 5e-2"));
            c.note(format!("lq: sup-node mean |P - (1 + T - t)| = {riccati:.3e}"));
            let g = r.gamma.min_value();
            c.check("lq.gamma_positive", g > 0.0, format!("min gamma {g:.4} > 0"));
            yhat_checks(&mut c, "lq", &lq.order);
        }
        Err(e) => c.error("lq", &e),
    }
    match ctx.cz() {
        Ok(cz) => {
            let g = cz.reference.gamma.min_value();
            c.check("coupled_z.gamma_positive", g > 0.0, format!("min gamma {g:.4} > 0"));
            yhat_checks(&mut c, "coupled_z", &cz.order);
        }
        Err(e) => c.error("coupled_z", &e),
    }
    let spec = exponential_spec(0.5);
    let b = &ctx.bundle;
    let r = solve_coupled_picard(&spec, &ControlLaw::constant(vec![0.0]), b, &ctx.opts.picard).and_then(|sol| {
        let a1 = solve_first_order_adjoint(&spec, &sol, b, &ctx.opts.picard.solver)?;
        solve_gamma(&spec, &sol, &a1, b)
    });
    match r {
        Ok(g) => {
            let e = g.terminal_mean();
            let drift = g.drift.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
            c.check("driftless.gamma_positive", g.min_value() > 0.0, format!("min gamma {:.4} > 0", g.min_value()));
            c.check(
                "driftless.gamma_mean",
                (e.mean - 1.0).abs() <= 3.0 * e.stderr,
                format!("E[gamma_T] = {:.5} ± {:.5}, |drift| <= {drift:.1e}", e.mean, e.stderr),
            );
        }
        Err(e) => c.error("driftless", &e),
    }
    c
}

fn read_tree(root: &Path) -> std::io::Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, std::fs::read(&path)?);
            }
        }
    }
    Ok(out)
}

/// Runs `smp <args>` into a fresh `out` and returns the exit code and files.
fn run_cli(binary: &Path, args: &[&str], out: &Path) -> std::io::Result<(i32, BTreeMap<PathBuf, Vec<u8>>)> {
    if out.exists() {
        std::fs::remove_dir_all(out)?;
    }
    let status = Command::new(binary).args(args).arg("--out").arg(out).output()?;
    let files = if out.exists() { read_tree(out)? } else { BTreeMap::new() };
    Ok((status.status.code().unwrap_or(-1), files))
}

fn c9(ctx: &mut Ctx) -> Criterion {
    let mut c = Criterion::new(9, "reproducibility");
    let Some(binary) = ctx.opts.binary.clone() else {
        c.check("binary", false, "no smp binary given".into());
        return c;
    };
    let work = std::env::temp_dir().join(format!("smp-repro-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&work);
    if let Err(e) = std::fs::create_dir_all(&work) {
        c.check("workspace", false, e.to_string());
        return c;
    }
    let small = r#"{"problem": {"name": "lq"}, "solver": {"steps": 32, "paths": 400},
        "experiment": {"ladder": [0.125, 0.0625, 0.03125]}, "seed": 11, "bench": {"criteria": [5, 7]}}"#;
    let cz = r#"{"problem": {"name": "coupled_z"}, "solver": {"steps": 32, "paths": 400},
        "experiment": {"ladder": [0.125, 0.0625, 0.03125]}, "seed": 12}"#;
    let (lq_cfg, cz_cfg) = (work.join("lq.json"), work.join("cz.json"));
    if let Err(e) = std::fs::write(&lq_cfg, small).and_then(|_| std::fs::write(&cz_cfg, cz)) {
        c.check("workspace", false, e.to_string());
        return c;
    }
    let (lq_s, cz_s) = (lq_cfg.to_string_lossy().to_string(), cz_cfg.to_string_lossy().to_string());
    let runs: Vec<(&str, Vec<&str>)> = vec![
        ("solve", vec!["solve", "--config", &lq_s, "--dump-panels"]),
        ("spike", vec!["spike", "--config", &lq_s]),
        ("spike.coupled_z", vec!["spike", "--config", &cz_s]),
        ("mp-check", vec!["mp-check", "--config", &lq_s, "--dump-hamiltonian"]),
        ("mp-check.coupled_z", vec!["mp-check", "--config", &cz_s]),
        ("bench", vec!["bench", "--config", &lq_s]),
    ];
    for (name, args) in runs {
        let out = work.join(name);
        let first = run_cli(&binary, &args, &out);
        let second = run_cli(&binary, &args, &out);
        match (first, second) {
            (Ok((c1, f1)), Ok((c2, f2))) => {
                let same = c1 == c2 && f1 == f2 && !f1.is_empty();
                let differing: Vec<String> = f1.iter().filter(|(k, v)| f2.get(*k) != Some(v)).map(|(k, _)| k.display().to_string()).collect();
                c.check(
                    &format!("{name}.byte_identical"),
                    same,
                    format!("exit {c1}/{c2}, {} files, differing: [{}]", f1.len(), differing.join(", ")),
                );
            }
            (Err(e), _) | (_, Err(e)) => c.check(&format!("{name}.byte_identical"), false, e.to_string()),
        }
    }
    let _ = std::fs::remove_dir_all(&work);
    c
}

/// Runs the selected criteria, reporting each summary line through `emit` as
/// soon as it is known.
pub fn run_suite(opts: &SuiteOpts, mut emit: impl FnMut(&str)) -> CliResult<SuiteReport> {
    let grid = TimeGrid::new(1.0, opts.steps)?;
    let bundle = sample_brownian(grid, opts.paths, SeedSpec::new(opts.seed))?;
    let mut ctx = Ctx { opts, bundle, lq: None, cz: None, fine: None };
    let all: [(u8, fn(&mut Ctx) -> Criterion); 9] = [(1, c1), (2, c2), (3, c3), (4, c4), (5, c5), (6, c6), (7, c7), (8, c8), (9, c9)];
    let mut criteria = Vec::new();
    for (id, f) in all {
        if !opts.criteria.contains(&id) {
            continue;
        }
        let c = f(&mut ctx);
        emit(&c.line());
        for d in c.details() {
            emit(&d);
        }
        criteria.push(c);
    }
    Ok(SuiteReport { version: version_string(), paths: opts.paths, steps: opts.steps, seed: opts.seed, criteria })
}
