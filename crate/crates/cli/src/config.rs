//! Run configuration: a JSON file, command-line overrides, then resolution of
//! every default so the written config reproduces the run on its own.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use smp_core::fbsde::{PicardOpts, SolverOpts};
use smp_core::hamiltonian::MpOpts;
use smp_core::model::{
    benchmark_coupled_z_with, benchmark_lq_with, BenchmarkProblem, ControlLaw, ControlSet, CoupledZParams, LqParams,
};
use smp_core::regression::BasisSpec;
use smp_core::spike::ExperimentOpts;

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemName {
    Lq,
    CoupledZ,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub name: ProblemName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    /// LQ noise level.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma0: Option<f64>,
    /// Coupling of `z` into the diffusion of `coupled_z`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

/// Candidate control `ubar`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlChoice {
    /// The benchmark's candidate: `u = -x` on LQ, `u = -1` on `coupled_z`.
    #[default]
    Optimal,
    Zero,
    Constant(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub steps: usize,
    pub paths: usize,
    pub basis_degree: usize,
    pub picard_tol: f64,
    pub picard_max: usize,
    pub damping: f64,
    pub c_min: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { steps: 256, paths: 10_000, basis_degree: 2, picard_tol: 1e-7, picard_max: 50, damping: 1.0, c_min: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UGrid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Spike widths; defaults to those of `T * 2^-k`, `k = 4..8`, that are
    /// multiples of `dt`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ladder: Option<Vec<f64>>,
    pub betas: Vec<f64>,
    /// Spike start; defaults to the grid node nearest `T / 4`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spike_at: Option<f64>,
    pub spike_value: Vec<f64>,
    /// Sampling grid of `U` for LQ.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub u_grid: Option<UGrid>,
    /// Replaces `U` by a finite set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub u_set: Option<Vec<f64>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { ladder: None, betas: vec![2.0, 4.0], spike_at: None, spike_value: vec![1.0], u_grid: None, u_set: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpConfig {
    pub nodes: usize,
    pub paths: usize,
    pub refine_rounds: usize,
    pub z_threshold: f64,
}

impl Default for MpConfig {
    fn default() -> Self {
        let d = MpOpts::default();
        Self { nodes: d.nodes, paths: d.paths, refine_rounds: d.refine_rounds, z_threshold: d.z_threshold }
    }
}

/// Criteria run by `smp bench`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub criteria: Vec<u8>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { criteria: (1..=9).collect() }
    }
}

fn default_seed() -> u64 {
    2024
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    #[serde(default)]
    pub control: ControlChoice,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub mp: MpConfig,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub paths: Option<usize>,
    pub steps: Option<usize>,
    pub ladder: Option<Vec<f64>>,
    pub betas: Option<Vec<f64>>,
    pub spike_at: Option<f64>,
}

impl RunConfig {
    pub fn new(name: ProblemName) -> Self {
        Self {
            problem: ProblemConfig { name, x0: None, horizon: None, sigma0: None, alpha: None },
            control: ControlChoice::default(),
            solver: SolverConfig::default(),
            experiment: ExperimentConfig::default(),
            mp: MpConfig::default(),
            bench: BenchConfig::default(),
            seed: default_seed(),
            out: default_out(),
        }
    }

    /// Parses JSON, naming the offending field on failure.
    pub fn from_json(text: &str) -> CliResult<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "<root>".to_string() } else { path };
            CliError::config(&field, e.inner().to_string())
        })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config("--config", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn apply(mut self, o: &Overrides) -> Self {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.out {
            self.out = v.clone();
        }
        if let Some(v) = o.paths {
            self.solver.paths = v;
        }
        if let Some(v) = o.steps {
            self.solver.steps = v;
        }
        if let Some(v) = &o.ladder {
            self.experiment.ladder = Some(v.clone());
        }
        if let Some(v) = &o.betas {
            self.experiment.betas = v.clone();
        }
        if let Some(v) = o.spike_at {
            self.experiment.spike_at = Some(v);
        }
        self
    }

    /// Checks every field and fills in all defaults.
    pub fn resolve(mut self) -> CliResult<Self> {
        let s = &self.solver;
        if s.steps < 2 {
            return Err(CliError::config("solver.steps", format!("must be at least 2, got {}", s.steps)));
        }
        if s.paths < 2 {
            return Err(CliError::config("solver.paths", format!("must be at least 2, got {}", s.paths)));
        }
        if !(1..=4).contains(&s.basis_degree) {
            return Err(CliError::config("solver.basis_degree", format!("must lie in 1..=4, got {}", s.basis_degree)));
        }
        positive("solver.picard_tol", s.picard_tol)?;
        if s.picard_max == 0 {
            return Err(CliError::config("solver.picard_max", "must be positive"));
        }
        if !(s.damping > 0.0 && s.damping <= 1.0) {
            return Err(CliError::config("solver.damping", format!("must lie in (0, 1], got {}", s.damping)));
        }
        positive("solver.c_min", s.c_min)?;

        let p = &mut self.problem;
        match p.name {
            ProblemName::Lq => {
                if p.alpha.is_some() {
                    return Err(CliError::config("problem.alpha", "only applies to coupled_z"));
                }
                let d = LqParams::default();
                p.x0.get_or_insert(d.x0);
                p.horizon.get_or_insert(d.horizon);
                let s0 = *p.sigma0.get_or_insert(d.sigma0);
                if !(s0 >= 0.0 && s0.is_finite()) {
                    return Err(CliError::config("problem.sigma0", format!("must be non-negative, got {s0}")));
                }
            }
            ProblemName::CoupledZ => {
                if p.sigma0.is_some() {
                    return Err(CliError::config("problem.sigma0", "only applies to lq"));
                }
                let d = CoupledZParams::default();
                p.x0.get_or_insert(d.x0);
                p.horizon.get_or_insert(d.horizon);
                finite("problem.alpha", *p.alpha.get_or_insert(d.alpha))?;
            }
        }
        finite("problem.x0", p.x0.unwrap())?;
        let horizon = p.horizon.unwrap();
        positive("problem.horizon", horizon)?;

        let dt = horizon / self.solver.steps as f64;
        let e = &mut self.experiment;
        // the default ladder keeps only widths that sit on the grid
        let ladder = e
            .ladder
            .get_or_insert_with(|| ExperimentOpts::default_ladder(horizon).into_iter().filter(|w| on_grid(*w, dt)).collect());
        if ladder.is_empty() {
            return Err(CliError::config("experiment.ladder", "is empty"));
        }
        for &w in ladder.iter() {
            if !(w > 0.0) || !on_grid(w, dt) {
                return Err(CliError::config("experiment.ladder", format!("width {w} is not a positive multiple of dt = {dt}")));
            }
        }
        for &b in &e.betas {
            if !(2.0..=8.0).contains(&b) {
                return Err(CliError::config("experiment.betas", format!("moment exponent {b} is outside [2, 8]")));
            }
        }
        if e.betas.is_empty() {
            return Err(CliError::config("experiment.betas", "is empty"));
        }
        let t0 = *e.spike_at.get_or_insert_with(|| (horizon / 4.0 / dt).round() * dt);
        if !(t0 >= 0.0) || !on_grid(t0, dt) {
            return Err(CliError::config("experiment.spike_at", format!("{t0} is not a grid node")));
        }
        let widest = ladder.iter().cloned().fold(0.0, f64::max);
        if t0 + widest > horizon * (1.0 + 1e-12) {
            return Err(CliError::config("experiment.spike_at", format!("window [{t0}, {}) leaves [0, {horizon}]", t0 + widest)));
        }
        if e.spike_value.len() != 1 {
            return Err(CliError::config("experiment.spike_value", "controls are one-dimensional"));
        }
        if let Some(g) = &e.u_grid {
            if !(g.step > 0.0 && g.hi >= g.lo) {
                return Err(CliError::config("experiment.u_grid", "needs lo <= hi and step > 0"));
            }
        }
        if let Some(set) = &e.u_set {
            if set.is_empty() {
                return Err(CliError::config("experiment.u_set", "is empty"));
            }
        }
        if let ControlChoice::Constant(v) = &self.control {
            if v.len() != 1 {
                return Err(CliError::config("control.constant", "controls are one-dimensional"));
            }
        }
        if self.bench.criteria.iter().any(|c| !(1..=9).contains(c)) {
            return Err(CliError::config("bench.criteria", "criteria are numbered 1 to 9"));
        }
        if self.mp.nodes == 0 || self.mp.paths == 0 {
            return Err(CliError::config("mp", "nodes and paths must be positive"));
        }
        Ok(self)
    }

    /// Builds the benchmark with the resolved parameters.
    pub fn benchmark(&self) -> CliResult<BenchmarkProblem<f64>> {
        let p = &self.problem;
        let mut bp = match p.name {
            ProblemName::Lq => {
                let mut params = LqParams {
                    x0: p.x0.unwrap(),
                    sigma0: p.sigma0.unwrap(),
                    horizon: p.horizon.unwrap(),
                    ..Default::default()
                };
                if let Some(g) = &self.experiment.u_grid {
                    params.u_lo = g.lo;
                    params.u_hi = g.hi;
                    params.u_step = g.step;
                }
                benchmark_lq_with(params)
            }
            ProblemName::CoupledZ => benchmark_coupled_z_with(CoupledZParams {
                alpha: p.alpha.unwrap(),
                x0: p.x0.unwrap(),
                horizon: p.horizon.unwrap(),
                c_min: self.solver.c_min,
                ..Default::default()
            })?,
        };
        if let Some(set) = &self.experiment.u_set {
            bp.spec.control_set = ControlSet::Finite(set.iter().map(|u| vec![*u]).collect());
        }
        Ok(bp)
    }

    pub fn control(&self, bp: &BenchmarkProblem<f64>) -> ControlLaw<f64> {
        match &self.control {
            ControlChoice::Optimal => bp.optimal.clone(),
            ControlChoice::Zero => ControlLaw::constant(vec![0.0]),
            ControlChoice::Constant(v) => ControlLaw::constant(v.clone()),
        }
    }

    pub fn solver_opts(&self) -> SolverOpts {
        SolverOpts {
            basis: BasisSpec { degree: self.solver.basis_degree, ..Default::default() },
            c_min: self.solver.c_min,
            ..Default::default()
        }
    }

    pub fn picard_opts(&self) -> PicardOpts {
        PicardOpts {
            max_sweeps: self.solver.picard_max,
            tol: self.solver.picard_tol,
            damping: self.solver.damping,
            solver: self.solver_opts(),
        }
    }

    pub fn experiment_opts(&self) -> ExperimentOpts {
        ExperimentOpts {
            ladder: self.experiment.ladder.clone().expect("resolved"),
            betas: self.experiment.betas.clone(),
            t0: self.experiment.spike_at,
            perturbation: self.experiment.spike_value.clone(),
            picard: self.picard_opts(),
        }
    }

    pub fn mp_opts(&self, keep_table: bool) -> MpOpts {
        MpOpts {
            nodes: self.mp.nodes,
            paths: self.mp.paths.min(self.solver.paths),
            refine_rounds: self.mp.refine_rounds,
            z_threshold: self.mp.z_threshold,
            c_min: self.solver.c_min,
            keep_table,
        }
    }
}

fn positive(field: &str, v: f64) -> CliResult<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::config(field, format!("must be positive and finite, got {v}")))
    }
}

fn finite(field: &str, v: f64) -> CliResult<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(CliError::config(field, format!("must be finite, got {v}")))
    }
}

fn on_grid(v: f64, dt: f64) -> bool {
    let k = v / dt;
    (k - k.round()).abs() <= 1e-9 * (1.0 + k.round())
}
