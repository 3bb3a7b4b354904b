//! The subcommands. Each writes its artifacts, the resolved config and the
//! version string into the output directory and returns the exit code.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use smp_core::adjoint::{solve_first_order_adjoint, solve_second_order_adjoint, summarize, AdjointSummary};
use smp_core::fbsde::solve_coupled_picard;
use smp_core::hamiltonian::{check_maximum_principle, ConsistencyReport, MpReport, Verdict};
use smp_core::model::lq_value_rk4;
use smp_core::paths::{sample_brownian, BrownianBundle, ProcessPanel, SeedSpec, TimeGrid};
use smp_core::spike::{run_order_experiment, OrderReport};

use crate::acceptance::{run_suite, SuiteOpts};
use crate::config::{ControlChoice, ProblemName, RunConfig};
use crate::error::CliResult;

/// Version string written next to every set of outputs.
pub fn version_string() -> String {
    format!("smp {} ({})", env!("CARGO_PKG_VERSION"), smp_core::VERSION)
}

/// Files written by a run and its exit code.
#[derive(Debug)]
pub struct Outcome {
    pub exit_code: i32,
    pub files: Vec<PathBuf>,
}

struct OutDir {
    root: PathBuf,
    files: Vec<PathBuf>,
}

impl OutDir {
    fn create(config: &RunConfig) -> CliResult<Self> {
        fs::create_dir_all(&config.out)?;
        let mut d = Self { root: config.out.clone(), files: Vec::new() };
        d.text("resolved_config.json", &config.to_json())?;
        d.text("VERSION", &(version_string() + "\n"))?;
        Ok(d)
    }

    fn path(&mut self, name: &str) -> CliResult<PathBuf> {
        let p = self.root.join(name);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        self.files.push(p.clone());
        Ok(p)
    }

    fn text(&mut self, name: &str, body: &str) -> CliResult<()> {
        let p = self.path(name)?;
        fs::write(p, body)?;
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        self.text(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    fn csv(&mut self, name: &str) -> CliResult<csv::Writer<fs::File>> {
        let p = self.path(name)?;
        Ok(csv::Writer::from_path(p)?)
    }

    fn panel(&mut self, name: &str, panel: &ProcessPanel<f64>) -> CliResult<()> {
        let p = self.path(name)?;
        let w = std::io::BufWriter::new(fs::File::create(p)?);
        panel.write_csv(w)?;
        Ok(())
    }

    fn finish(self, exit_code: i32) -> Outcome {
        Outcome { exit_code, files: self.files }
    }
}

fn bundle(config: &RunConfig) -> CliResult<BrownianBundle<f64>> {
    let grid = TimeGrid::new(config.problem.horizon.expect("resolved"), config.solver.steps)?;
    Ok(sample_brownian(grid, config.solver.paths, SeedSpec::new(config.seed))?)
}

#[derive(Serialize)]
struct OracleCheck {
    /// Continuous-time Riccati value `J*`.
    riccati_value: f64,
    /// `(Y(0) - J*) / stderr`.
    z_score: f64,
    within_3_stderr: bool,
}

#[derive(Serialize)]
struct SolveSummary {
    version: String,
    problem: String,
    steps: usize,
    paths: usize,
    seed: u64,
    /// `J(ubar) = Y(0)`.
    y0: f64,
    /// Sampling error of `Y(0)`.
    y0_stderr: f64,
    /// Error of the martingale-corrected pathwise representation.
    y0_martingale_stderr: f64,
    oracle: Option<OracleCheck>,
    picard_sweeps: usize,
    picard_trace: Vec<f64>,
    damping_engaged: bool,
    ridge_nodes: usize,
    adjoint: AdjointSummary,
}

pub fn cmd_solve(config: &RunConfig, dump_panels: bool) -> CliResult<Outcome> {
    let mut out = OutDir::create(config)?;
    let bp = config.benchmark()?;
    let b = bundle(config)?;
    let control = config.control(&bp);
    let sol = solve_coupled_picard(&bp.spec, &control, &b, &config.picard_opts())?;
    let opts = config.solver_opts();
    let a1 = solve_first_order_adjoint(&bp.spec, &sol, &b, &opts)?;
    let a2 = solve_second_order_adjoint(&bp.spec, &sol, &a1, &b, &opts)?;
    let cost = sol.cost_estimate(&bp.spec, &b);
    let mart = sol.y0_estimate(&bp.spec, &b);
    let oracle = match (config.problem.name, &config.control) {
        (ProblemName::Lq, ControlChoice::Optimal) => {
            let p = &config.problem;
            let v = lq_value_rk4(p.x0.unwrap(), p.sigma0.unwrap(), p.horizon.unwrap(), 4096);
            let z = (sol.y0() - v) / cost.stderr;
            Some(OracleCheck { riccati_value: v, z_score: z, within_3_stderr: z.abs() <= 3.0 })
        }
        _ => None,
    };
    let summary = SolveSummary {
        version: version_string(),
        problem: bp.spec.name.clone(),
        steps: config.solver.steps,
        paths: config.solver.paths,
        seed: config.seed,
        y0: sol.y0(),
        y0_stderr: cost.stderr,
        y0_martingale_stderr: mart.stderr,
        oracle,
        picard_sweeps: sol.sweeps(),
        picard_trace: sol.trace.clone(),
        damping_engaged: sol.damping_engaged,
        ridge_nodes: sol.ridge_nodes,
        adjoint: summarize(&a1, &a2),
    };
    out.json("summary.json", &summary)?;
    let mut w = out.csv("picard_trace.csv")?;
    w.write_record(["sweep", "change"])?;
    for (k, c) in sol.trace.iter().enumerate() {
        w.write_record([(k + 1).to_string(), c.to_string()])?;
    }
    w.flush()?;
    if dump_panels {
        for (name, p) in [
            ("x", &sol.x),
            ("y", &sol.y),
            ("z", &sol.z),
            ("u", &sol.u),
            ("p", &a1.p),
            ("q", &a1.q),
            ("k1", &a1.k1),
            ("P", &a2.p),
            ("Q", &a2.q),
        ] {
            out.panel(&format!("panels/{name}.csv"), p)?;
        }
    }
    Ok(out.finish(0))
}

pub fn cmd_spike(config: &RunConfig) -> CliResult<Outcome> {
    let mut out = OutDir::create(config)?;
    let bp = config.benchmark()?;
    let b = bundle(config)?;
    let report: OrderReport = run_order_experiment(&bp.spec, &config.control(&bp), &b, &config.experiment_opts())?;
    out.json("order_report.json", &report)?;
    out.json("consistency.json", &ConsistencyReport::from_order(&report))?;
    let mut w = out.csv("order.csv")?;
    w.write_record(["eps", "norm", "beta", "estimate", "stderr"])?;
    for r in &report.rows {
        w.write_record([r.eps.to_string(), r.norm.clone(), r.beta.to_string(), r.estimate.to_string(), r.stderr.to_string()])?;
    }
    w.flush()?;
    let mut w = out.csv("slopes.csv")?;
    w.write_record(["norm", "beta", "slope", "slope_stderr", "half_width", "intercept", "points"])?;
    for s in &report.slopes {
        let cells = match &s.fit {
            Some(f) => [f.slope.to_string(), f.slope_stderr.to_string(), f.half_width.to_string(), f.intercept.to_string(), f.points.to_string()],
            None => Default::default(),
        };
        let mut row = vec![s.norm.clone(), s.beta.to_string()];
        row.extend(cells);
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(out.finish(0))
}

pub fn cmd_mp_check(config: &RunConfig, dump_hamiltonian: bool) -> CliResult<Outcome> {
    let mut out = OutDir::create(config)?;
    let bp = config.benchmark()?;
    let b = bundle(config)?;
    let sol = solve_coupled_picard(&bp.spec, &config.control(&bp), &b, &config.picard_opts())?;
    let opts = config.solver_opts();
    let a1 = solve_first_order_adjoint(&bp.spec, &sol, &b, &opts)?;
    let a2 = solve_second_order_adjoint(&bp.spec, &sol, &a1, &b, &opts)?;
    let mut report: MpReport = check_maximum_principle(&bp.spec, &sol, &a1, &a2, &config.mp_opts(dump_hamiltonian))?;
    if dump_hamiltonian {
        let mut w = out.csv("hamiltonian.csv")?;
        w.write_record(["node", "t", "path", "u", "gap", "stderr", "z", "refined"])?;
        for e in &report.table {
            let u = e.u.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";");
            w.write_record([e.node.to_string(), e.t.to_string(), e.path.to_string(), u, e.gap.to_string(), e.stderr.to_string(), e.z.to_string(), e.refined.to_string()])?;
        }
        w.flush()?;
        report.table.clear();
    }
    out.json("mp_report.json", &report)?;
    let code = if report.verdict == Verdict::Pass { 0 } else { 4 };
    Ok(out.finish(code))
}

/// Runs the acceptance suite at the scale of the config and writes one line
/// per criterion to `bench.txt` and the full record to `bench.json`.
pub fn cmd_bench(config: &RunConfig, binary: Option<&Path>) -> CliResult<Outcome> {
    let mut out = OutDir::create(config)?;
    let opts = SuiteOpts::from_config(config, binary.map(Path::to_path_buf));
    let report = run_suite(&opts, |line| {
        let mut e = std::io::stderr();
        let _ = writeln!(e, "{line}");
    })?;
    let mut text = String::new();
    for c in &report.criteria {
        text.push_str(&c.line());
        text.push('\n');
    }
    out.text("bench.txt", &text)?;
    out.json("bench.json", &report)?;
    Ok(out.finish(0))
}
