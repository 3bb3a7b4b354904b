//! The Hamiltonian `H`, the generalized Hamiltonian with the `Delta` shift and
//! the second-order correction, the sampled maximum-principle check and the
//! expansion consistency report.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{ref_point, FirstOrderAdjoint, SecondOrderAdjoint};
use crate::error::{Result, SmpError};
use crate::fbsde::FbsdeSolution;
use crate::model::{ControlSet, Point, ProblemSpec};
use crate::paths::BrownianBundle;
use crate::scalar::{dot, quad_form, Scalar};
use crate::spike::{delta_at, run_order_experiment, DeltaFailure, DeltaMethod, ExperimentOpts, OrderReport};
use crate::model::ControlLaw;
use crate::stats::{fit_loglog, Estimate, SlopeFit};

/// `H(t, x, y, z, u, p, q) = g + <p, b> + <q, sigma>`.
pub fn hamiltonian<S: Scalar>(spec: &ProblemSpec<S>, pt: &Point<S>, p: &[S], q: &[S]) -> S {
    let n = spec.n;
    let (mut b, mut s) = (vec![S::zero(); n], vec![S::zero(); n]);
    spec.b(pt, &mut b);
    spec.sigma(pt, &mut s);
    spec.g(pt) + dot(p, &b) + dot(q, &s)
}

/// Reference values at one node together with the adjoint values there.
#[derive(Clone, Debug)]
pub struct HamiltonianContext<'a, S: Scalar> {
    pub spec: &'a ProblemSpec<S>,
    pub t: S,
    pub x: Vec<S>,
    pub y: S,
    pub z: S,
    pub ubar: Vec<S>,
    pub p: Vec<S>,
    pub q: Vec<S>,
    /// Row-major `n x n`.
    pub pm: Vec<S>,
    /// `Delta` method; chosen from the spec when absent.
    pub method: Option<DeltaMethod>,
    pub c_min: f64,
}

impl<'a, S: Scalar> HamiltonianContext<'a, S> {
    pub fn at_node(
        spec: &'a ProblemSpec<S>,
        sol: &FbsdeSolution<S>,
        adj1: &FirstOrderAdjoint<S>,
        adj2: &SecondOrderAdjoint<S>,
        m: usize,
        i: usize,
        c_min: f64,
    ) -> Self {
        let pt = ref_point(sol, m, i);
        Self {
            spec,
            t: pt.t,
            x: pt.x.to_vec(),
            y: pt.y,
            z: pt.z,
            ubar: pt.u.to_vec(),
            p: adj1.p.at(m, i).to_vec(),
            q: adj1.q.at(m, i).to_vec(),
            pm: adj2.p.at(m, i).to_vec(),
            method: None,
            c_min,
        }
    }

    fn point(&self) -> Point<'_, S> {
        Point::new(self.t, &self.x, self.y, self.z, &self.ubar)
    }

    /// `Delta(u)` at this node.
    pub fn delta(&self, u: &[S]) -> Result<S> {
        let pt = self.point();
        let how = self.method.unwrap_or_else(|| crate::spike::default_delta_method(self.spec, &pt, u));
        match delta_at(self.spec, &pt, u, &self.p, how, self.c_min) {
            Ok((d, _)) => Ok(d),
            Err(DeltaFailure::Invertibility(margin)) => Err(SmpError::Invertibility { margin, c_min: self.c_min, path: 0, node: 0 }),
            Err(DeltaFailure::NoConvergence { residual }) => Err(SmpError::NoConvergence {
                what: "Delta equation".into(),
                detail: format!("residual {residual:.3e} at t = {}", self.t),
            }),
        }
    }
}

/// Generalized Hamiltonian
/// `<p, b> + <q, sigma> + g` at `(z + Delta(u), u)` plus
/// `(sigma(z + Delta, u) - sigma(z, ubar))^T P (...) / 2`.
pub fn eval_script_h<S: Scalar>(ctx: &HamiltonianContext<S>, u: &[S]) -> Result<S> {
    let d = ctx.delta(u)?;
    let n = ctx.spec.n;
    let base = ctx.point();
    let moved = base.with_z(base.z + d).with_u(u);
    let (mut s0, mut s1) = (vec![S::zero(); n], vec![S::zero(); n]);
    ctx.spec.sigma(&base, &mut s0);
    ctx.spec.sigma(&moved, &mut s1);
    let ds: Vec<S> = s1.iter().zip(&s0).map(|(a, b)| *a - *b).collect();
    Ok(hamiltonian(ctx.spec, &moved, &ctx.p, &ctx.q) + S::lit(0.5) * quad_form(&ctx.pm, &ds))
}

/// `H-script(u) - H-script(ubar)`.
pub fn script_h_gap<S: Scalar>(ctx: &HamiltonianContext<S>, u: &[S]) -> Result<S> {
    Ok(eval_script_h(ctx, u)? - eval_script_h(ctx, &ctx.ubar)?)
}

/// Sampling of the maximum-principle check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpOpts {
    /// Nodes spread uniformly over `[0, T)`.
    pub nodes: usize,
    /// The first `paths` paths are checked.
    pub paths: usize,
    /// Local refinement rounds around the grid minimizer on continuous sets.
    pub refine_rounds: usize,
    pub z_threshold: f64,
    pub c_min: f64,
    /// Keep every evaluated gap in the report.
    pub keep_table: bool,
}

impl Default for MpOpts {
    fn default() -> Self {
        Self { nodes: 32, paths: 32, refine_rounds: 3, z_threshold: -3.0, c_min: 0.1, keep_table: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Pass,
    Fail,
}

/// One evaluated gap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpEntry {
    pub node: usize,
    pub t: f64,
    pub path: usize,
    pub u: Vec<f64>,
    pub gap: f64,
    pub stderr: f64,
    pub z: f64,
    pub refined: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpReport {
    pub verdict: Verdict,
    /// Number of `(node, path, u)` evaluations.
    pub evaluations: usize,
    /// Number of distinct `(node, u)` pairs on the candidate grid.
    pub node_u_pairs: usize,
    pub min_z: f64,
    pub min_gap: f64,
    pub worst: Option<MpEntry>,
    pub table: Vec<MpEntry>,
}

/// Standard errors of `(p, q, P)` at a node from the regression fits.
fn adjoint_stderrs<S: Scalar>(sol: &FbsdeSolution<S>, adj1: &FirstOrderAdjoint<S>, adj2: &SecondOrderAdjoint<S>, m: usize, i: usize, n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let f = sol.features.at(m, i);
    let (mut sp, mut sq, mut sm) = (vec![0.0; n], vec![0.0; n], vec![0.0; n * n]);
    if let Some(fit) = adj1.fits.get(i) {
        for r in 0..n {
            let (a, z) = fit.stderr(f, r);
            sp[r] = a;
            sq[r] = z;
        }
    }
    if let Some(fit) = adj2.fits.get(i) {
        for r in 0..n * n {
            sm[r] = fit.stderr(f, r).0;
        }
    }
    (sp, sq, sm)
}

/// Gap with its standard error, propagated from the adjoint standard errors
/// by one-sided perturbation of each component.
fn gap_with_se<S: Scalar>(ctx: &HamiltonianContext<S>, u: &[S], se: &(Vec<f64>, Vec<f64>, Vec<f64>)) -> Result<(f64, f64)> {
    let gap = script_h_gap(ctx, u)?.as_f64();
    let mut var = 0.0;
    let mut bump = |which: usize, r: usize, h: f64| -> Result<()> {
        if h == 0.0 {
            return Ok(());
        }
        let mut c = ctx.clone();
        let slot = match which {
            0 => &mut c.p[r],
            1 => &mut c.q[r],
            _ => &mut c.pm[r],
        };
        *slot += S::lit(h);
        let g = script_h_gap(&c, u)?.as_f64();
        var += (g - gap).powi(2);
        Ok(())
    };
    for r in 0..se.0.len() {
        bump(0, r, se.0[r])?;
        bump(1, r, se.1[r])?;
    }
    for r in 0..se.2.len() {
        bump(2, r, se.2[r])?;
    }
    Ok((gap, var.sqrt()))
}

/// Samples nodes x paths x the control grid, refines around the grid
/// minimizer on continuous sets, and converts each gap into a z-score
/// against its Monte Carlo standard error. PASS iff the smallest z-score is
/// at least the threshold (-3 by default).
pub fn check_maximum_principle<S: Scalar>(
    spec: &ProblemSpec<S>,
    sol: &FbsdeSolution<S>,
    adj1: &FirstOrderAdjoint<S>,
    adj2: &SecondOrderAdjoint<S>,
    opts: &MpOpts,
) -> Result<MpReport> {
    let grid = sol.x.grid();
    let steps = grid.steps;
    let n = spec.n;
    let node_count = opts.nodes.clamp(1, steps);
    let nodes: Vec<usize> = (0..node_count).map(|k| k * steps / node_count).collect();
    let path_count = opts.paths.clamp(1, sol.x.paths());
    let cands = spec.control_set.candidates();
    if cands.is_empty() {
        return Err(SmpError::InvalidInput("control set has no candidate points".into()));
    }
    let continuous = spec.control_set.is_continuous();
    let spacing: Vec<S> = (0..spec.k).map(|a| spec.control_set.spacing(a)).collect();
    let jobs: Vec<(usize, usize)> = nodes.iter().flat_map(|&i| (0..path_count).map(move |m| (i, m))).collect();
    let per_job: Vec<Result<Vec<MpEntry>>> = jobs
        .par_iter()
        .map(|&(i, m)| {
            let ctx = HamiltonianContext::at_node(spec, sol, adj1, adj2, m, i, opts.c_min);
            let se = adjoint_stderrs(sol, adj1, adj2, m, i, n);
            let floor = 1e-12 * (1.0 + eval_script_h(&ctx, &ctx.ubar)?.as_f64().abs());
            let t = grid.t(i).as_f64();
            let entry = |u: &[S], refined: bool| -> Result<MpEntry> {
                let (gap, s) = gap_with_se(&ctx, u, &se)?;
                let z = if gap >= 0.0 { gap / s.max(floor) } else { gap / s.max(floor) };
                Ok(MpEntry { node: i, t, path: m, u: u.iter().map(|v| v.as_f64()).collect(), gap, stderr: s, z, refined })
            };
            let mut out = Vec::with_capacity(cands.len() + 4 * opts.refine_rounds);
            for u in &cands {
                out.push(entry(u, false)?);
            }
            if continuous && opts.refine_rounds > 0 {
                let best = out.iter().min_by(|a, b| a.gap.partial_cmp(&b.gap).unwrap()).unwrap();
                let mut cur: Vec<S> = best.u.iter().map(|v| S::lit(*v)).collect();
                let mut cur_gap = best.gap;
                let mut h: Vec<S> = spacing.iter().map(|s| *s * S::lit(0.5)).collect();
                for _ in 0..opts.refine_rounds {
                    for a in 0..spec.k {
                        for sign in [-1.0, 1.0] {
                            let mut v = cur.clone();
                            v[a] += S::lit(sign) * h[a];
                            spec.control_set.clamp(&mut v);
                            if !in_bounds(&spec.control_set, &v) {
                                continue;
                            }
                            let e = entry(&v, true)?;
                            if e.gap < cur_gap {
                                cur_gap = e.gap;
                                cur = v;
                            }
                            out.push(e);
                        }
                    }
                    for x in h.iter_mut() {
                        *x *= S::lit(0.5);
                    }
                }
            }
            Ok(out)
        })
        .collect();
    let mut table = Vec::new();
    for r in per_job {
        table.extend(r?);
    }
    let worst = table.iter().min_by(|a, b| a.z.partial_cmp(&b.z).unwrap().then(a.gap.partial_cmp(&b.gap).unwrap())).cloned();
    let min_z = worst.as_ref().map_or(0.0, |w| w.z);
    let min_gap = table.iter().fold(f64::INFINITY, |a, e| a.min(e.gap));
    let verdict = if min_z >= opts.z_threshold { Verdict::Pass } else { Verdict::Fail };
    Ok(MpReport {
        verdict,
        evaluations: table.len(),
        node_u_pairs: nodes.len() * cands.len(),
        min_z,
        min_gap,
        worst,
        table: if opts.keep_table { table } else { Vec::new() },
    })
}

fn in_bounds<S: Scalar>(set: &ControlSet<S>, u: &[S]) -> bool {
    let (lo, hi) = set.bounds();
    u.iter().zip(lo.iter().zip(&hi)).all(|(v, (l, h))| *v >= *l && *v <= *h)
}

/// One ladder point of the expansion check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub eps: f64,
    pub cost_change: f64,
    pub y2_0: f64,
    pub yhat_bsde: Estimate,
    pub yhat_gamma: Estimate,
    pub defect: f64,
    pub defect_over_eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub rows: Vec<ConsistencyRow>,
    /// `max |J(u^eps) - J(ubar) - Y2(0)| / eps` over the ladder.
    pub max_defect_over_eps: f64,
    /// Log-log slope of the defect against `eps`.
    pub defect_slope: Option<SlopeFit>,
    /// Log-log slope of `defect / eps`.
    pub decay_slope: Option<SlopeFit>,
}

impl ConsistencyReport {
    pub fn from_order(report: &OrderReport) -> Self {
        let rows: Vec<ConsistencyRow> = report
            .points
            .iter()
            .filter(|p| p.failed.is_none())
            .map(|p| ConsistencyRow {
                eps: p.eps,
                cost_change: p.cost_change,
                y2_0: p.y2_0,
                yhat_bsde: p.yhat_bsde,
                yhat_gamma: p.yhat_gamma,
                defect: p.defect,
                defect_over_eps: p.defect / p.eps,
            })
            .collect();
        let xs: Vec<f64> = rows.iter().map(|r| r.eps).collect();
        let ratio: Vec<f64> = rows.iter().map(|r| r.defect_over_eps).collect();
        Self {
            max_defect_over_eps: ratio.iter().fold(0.0, |a: f64, b| a.max(*b)),
            defect_slope: report.defect_slope.clone(),
            decay_slope: fit_loglog(&xs, &ratio),
            rows,
        }
    }
}

/// Direct cost changes of spiked solves against `Y2(0)` and both `Y-hat(0)`
/// estimators over the ladder.
pub fn expansion_consistency<S: Scalar>(spec: &ProblemSpec<S>, ubar: &ControlLaw<S>, bundle: &BrownianBundle<S>, opts: &ExperimentOpts) -> Result<ConsistencyReport> {
    let report = run_order_experiment(spec, ubar, bundle, opts)?;
    Ok(ConsistencyReport::from_order(&report))
}
