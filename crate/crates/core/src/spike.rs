//! Spike variations: the algebraic `Delta` equation, the first- and
//! second-order variational systems with their decoupling relations, and the
//! order-of-epsilon experiments.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{
    ref_point, solve_first_order_adjoint, solve_gamma, solve_second_order_adjoint, solve_yhat, FirstOrderAdjoint, GammaProcess, Local,
    SecondOrderAdjoint, YhatSolution,
};
use crate::error::{Result, SmpError};
use crate::fbsde::{backward_sweep, solve_coupled_picard, solve_coupled_picard_with, FbsdeSolution, PicardOpts, SolverOpts};
use crate::model::{ControlLaw, Point, ProblemSpec, SigmaForm};
use crate::paths::{moment_norm, BrownianBundle, MomentSpec, NormKind, ProcessPanel, TimeGrid};
use crate::scalar::{dot, quad_form, Scalar};
use crate::stats::{fit_loglog, Estimate, SlopeFit};

/// Control used on the spike window.
#[derive(Clone, Debug)]
pub enum Perturbation<S> {
    Value(Vec<S>),
    Panel(ProcessPanel<S>),
}

/// `E = [t0, t0 + eps)` on the grid with the perturbing control.
#[derive(Clone, Debug)]
pub struct SpikeSpec<S> {
    pub start: usize,
    pub width: usize,
    pub perturbation: Perturbation<S>,
    dt: f64,
}

fn aligned(v: f64, dt: f64, what: &str) -> Result<usize> {
    let k = v / dt;
    let r = k.round();
    if !(r >= 0.0) || (k - r).abs() > 1e-9 * (1.0 + r) {
        return Err(SmpError::InvalidInput(format!("{what} = {v} is not a multiple of dt = {dt}")));
    }
    Ok(r as usize)
}

impl<S: Scalar> SpikeSpec<S> {
    pub fn new(grid: TimeGrid<S>, t0: f64, eps: f64, perturbation: Perturbation<S>) -> Result<Self> {
        let dt = grid.dt().as_f64();
        let start = aligned(t0, dt, "spike start")?;
        let width = aligned(eps, dt, "spike width")?;
        if start + width > grid.steps {
            return Err(SmpError::InvalidInput(format!("spike window [{t0}, {}) leaves the horizon", t0 + eps)));
        }
        if let Perturbation::Panel(p) = &perturbation {
            if p.grid().steps != grid.steps {
                return Err(SmpError::InvalidInput("perturbation panel is on a different grid".into()));
            }
        }
        Ok(Self { start, width, perturbation, dt })
    }

    /// Window starting at `T / 4`.
    pub fn at_quarter(grid: TimeGrid<S>, eps: f64, perturbation: Perturbation<S>) -> Result<Self> {
        let t0 = grid.horizon.as_f64() / 4.0;
        let t0 = (t0 / grid.dt().as_f64()).round() * grid.dt().as_f64();
        Self::new(grid, t0, eps, perturbation)
    }

    pub fn epsilon(&self) -> f64 {
        self.width as f64 * self.dt
    }

    pub fn t0(&self) -> f64 {
        self.start as f64 * self.dt
    }

    /// Steps `i` with `t_i` in the window.
    pub fn window(&self) -> Range<usize> {
        self.start..self.start + self.width
    }

    #[inline]
    pub fn contains(&self, i: usize) -> bool {
        i >= self.start && i < self.start + self.width
    }

    #[inline]
    pub fn u_at(&self, m: usize, i: usize) -> &[S] {
        match &self.perturbation {
            Perturbation::Value(v) => v,
            Perturbation::Panel(p) => p.at(m, i),
        }
    }

    /// `u^eps`: `u` on the window, `ubar` elsewhere, as an open-loop panel.
    pub fn spiked_panel(&self, ubar: &ProcessPanel<S>) -> ProcessPanel<S> {
        let mut out = ubar.clone().relabel("u_eps");
        for i in self.window() {
            for m in 0..ubar.paths() {
                out.at_mut(m, i).copy_from_slice(self.u_at(m, i));
            }
        }
        out
    }
}

/// How `Delta` was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DeltaMethod {
    ClosedFormSz0,
    ClosedFormLinear,
    FixedPoint,
}

pub const DELTA_MAX_ITER: usize = 50;
pub const DELTA_TOL: f64 = 1e-10;

/// Coefficient increments at `(z + Delta, u)` against the reference point.
pub(crate) struct Deltas<S> {
    pub db: Vec<S>,
    pub ds: Vec<S>,
    pub dg: S,
}

pub(crate) fn deltas<S: Scalar>(spec: &ProblemSpec<S>, pt: &Point<S>, u: &[S], delta: S) -> Deltas<S> {
    let n = spec.n;
    let moved = pt.with_z(pt.z + delta).with_u(u);
    let (mut b0, mut b1, mut s0, mut s1) = (vec![S::zero(); n], vec![S::zero(); n], vec![S::zero(); n], vec![S::zero(); n]);
    spec.b(pt, &mut b0);
    spec.b(&moved, &mut b1);
    spec.sigma(pt, &mut s0);
    spec.sigma(&moved, &mut s1);
    let db = b1.iter().zip(&b0).map(|(a, b)| *a - *b).collect();
    let ds = s1.iter().zip(&s0).map(|(a, b)| *a - *b).collect();
    Deltas { db, ds, dg: spec.g(&moved) - spec.g(pt) }
}

/// `<p, sigma(z + d, u) - sigma(z, ubar)>`.
fn delta_map<S: Scalar>(spec: &ProblemSpec<S>, pt: &Point<S>, u: &[S], p: &[S], s0: &[S], d: S, buf: &mut [S]) -> S {
    spec.sigma(&pt.with_z(pt.z + d).with_u(u), buf);
    (0..spec.n).fold(S::zero(), |a, r| a + p[r] * (buf[r] - s0[r]))
}

fn sigma_ignores_z<S: Scalar>(spec: &ProblemSpec<S>, pt: &Point<S>, u: &[S]) -> bool {
    let n = spec.n;
    let (mut a, mut b, mut c) = (vec![S::zero(); n], vec![S::zero(); n], vec![S::zero(); n]);
    let q = pt.with_u(u);
    spec.sigma(&q, &mut a);
    spec.sigma(&q.with_z(q.z + S::one()), &mut b);
    spec.sigma(&q.with_z(q.z - S::lit(2.5)), &mut c);
    a == b && a == c
}

/// Method used when none is forced.
pub fn default_delta_method<S: Scalar>(spec: &ProblemSpec<S>, pt: &Point<S>, u: &[S]) -> DeltaMethod {
    match spec.sigma_form {
        SigmaForm::LinearInZ { .. } => DeltaMethod::ClosedFormLinear,
        SigmaForm::General if sigma_ignores_z(spec, pt, u) => DeltaMethod::ClosedFormSz0,
        SigmaForm::General => DeltaMethod::FixedPoint,
    }
}

/// Failure of the pointwise `Delta` solve.
#[derive(Clone, Debug)]
pub enum DeltaFailure {
    Invertibility(f64),
    NoConvergence { residual: f64 },
}

/// Solves `Delta = <p, sigma(t, x, y, z + Delta, u) - sigma(t, x, y, z, ubar)>`
/// at one point; returns `(Delta, |residual|)`.
pub fn delta_at<S: Scalar>(
    spec: &ProblemSpec<S>,
    pt: &Point<S>,
    u: &[S],
    p: &[S],
    method: DeltaMethod,
    c_min: f64,
) -> std::result::Result<(S, f64), DeltaFailure> {
    let n = spec.n;
    let mut s0 = vec![S::zero(); n];
    let mut buf = vec![S::zero(); n];
    spec.sigma(pt, &mut s0);
    let tol = S::lit(DELTA_TOL);
    let d = match method {
        DeltaMethod::ClosedFormSz0 => delta_map(spec, pt, u, p, &s0, S::zero(), &mut buf),
        DeltaMethod::ClosedFormLinear => {
            let SigmaForm::LinearInZ { a, sigma1 } = &spec.sigma_form else {
                return fixed_point(spec, pt, u, p, &s0, tol);
            };
            let mut av = vec![S::zero(); n];
            a(pt.t, &mut av);
            let den = S::one() - dot(p, &av);
            if den.abs().as_f64() < c_min {
                return Err(DeltaFailure::Invertibility(den.abs().as_f64()));
            }
            let (mut s1u, mut s1b) = (vec![S::zero(); n], vec![S::zero(); n]);
            sigma1(&pt.with_u(u), &mut s1u);
            sigma1(pt, &mut s1b);
            (0..n).fold(S::zero(), |acc, r| acc + p[r] * (s1u[r] - s1b[r])) / den
        }
        DeltaMethod::FixedPoint => return fixed_point(spec, pt, u, p, &s0, tol),
    };
    let res = (d - delta_map(spec, pt, u, p, &s0, d, &mut buf)).abs().as_f64();
    Ok((d, res))
}

/// Absolute stopping tolerance, widened to a few ulps for narrow scalars.
fn stop<S: Scalar>(tol: S, d: S) -> S {
    tol.max(S::lit(8.0) * S::epsilon() * (S::one() + d.abs()))
}

/// Damped fixed-point iteration with a Newton fallback when it stalls.
fn fixed_point<S: Scalar>(spec: &ProblemSpec<S>, pt: &Point<S>, u: &[S], p: &[S], s0: &[S], tol: S) -> std::result::Result<(S, f64), DeltaFailure> {
    let mut buf = vec![S::zero(); spec.n];
    let mut f = |d: S| delta_map(spec, pt, u, p, s0, d, &mut buf);
    let mut d = S::zero();
    let mut omega = S::one();
    let mut last = S::infinity();
    for _ in 0..DELTA_MAX_ITER {
        let r = f(d) - d;
        if r.abs() <= stop(tol, d) {
            return Ok((d, r.abs().as_f64()));
        }
        if r.abs() >= last {
            omega *= S::lit(0.5);
        }
        last = r.abs();
        d += omega * r;
        if !d.is_finite() {
            break;
        }
    }
    // Newton on h(d) = d - F(d) with h'(d) = 1 - <p, sigma_z(z + d, u)>.
    let mut d = S::zero();
    let mut sz = vec![S::zero(); spec.n];
    for _ in 0..DELTA_MAX_ITER {
        let h = d - f(d);
        if h.abs() <= stop(tol, d) {
            return Ok((d, h.abs().as_f64()));
        }
        spec.sigma_z(&pt.with_z(pt.z + d).with_u(u), &mut sz);
        let hp = S::one() - dot(p, &sz);
        if hp == S::zero() || !hp.is_finite() {
            break;
        }
        d -= h / hp;
    }
    let r = (d - f(d)).abs().as_f64();
    Err(DeltaFailure::NoConvergence { residual: if r.is_finite() { r } else { f64::INFINITY } })
}

/// `Delta` along the reference on the spike window, zero elsewhere.
#[derive(Clone, Debug)]
pub struct DeltaProcess<S: Scalar> {
    pub delta: ProcessPanel<S>,
    pub residual: ProcessPanel<S>,
    pub method: DeltaMethod,
    pub max_residual: f64,
    /// `max |Delta| / (1 + |X| + |Y| + |u| + |ubar|)` over the window.
    pub growth_constant: f64,
}

pub fn solve_delta<S: Scalar>(
    spec: &ProblemSpec<S>,
    sol: &FbsdeSolution<S>,
    adj1: &FirstOrderAdjoint<S>,
    spike: &SpikeSpec<S>,
    c_min: f64,
) -> Result<DeltaProcess<S>> {
    solve_delta_with(spec, sol, adj1, spike, c_min, None)
}

/// As [`solve_delta`] with the method optionally forced.
pub fn solve_delta_with<S: Scalar>(
    spec: &ProblemSpec<S>,
    sol: &FbsdeSolution<S>,
    adj1: &FirstOrderAdjoint<S>,
    spike: &SpikeSpec<S>,
    c_min: f64,
    force: Option<DeltaMethod>,
) -> Result<DeltaProcess<S>> {
    if adj1.margin < c_min {
        return Err(SmpError::Invertibility { margin: adj1.margin, c_min, path: 0, node: 0 });
    }
    let grid = sol.x.grid();
    let paths = sol.x.paths();
    let mut delta = ProcessPanel::zeros("Delta", grid, paths, 1);
    let mut residual = ProcessPanel::zeros("Delta_residual", grid, paths, 1);
    let mut method = force;
    let (mut max_res, mut growth) = (0.0f64, 0.0f64);
    let mut worst: Option<(usize, usize, f64)> = None;
    for i in spike.window() {
        let rows: Vec<_> = (0..paths)
            .into_par_iter()
            .map(|m| {
                let pt = ref_point(sol, m, i);
                let u = spike.u_at(m, i);
                let how = force.unwrap_or_else(|| default_delta_method(spec, &pt, u));
                let norm = |v: &[S]| crate::scalar::norm(v).as_f64();
                let scale = 1.0 + norm(pt.x) + pt.y.abs().as_f64() + norm(u) + norm(pt.u);
                (how, delta_at(spec, &pt, u, adj1.p.at(m, i), how, c_min), scale)
            })
            .collect();
        for (m, (how, r, scale)) in rows.into_iter().enumerate() {
            match r {
                Ok((d, res)) => {
                    delta.set(m, i, d);
                    residual.set(m, i, S::lit(res));
                    max_res = max_res.max(res);
                    growth = growth.max(d.abs().as_f64() / scale);
                    // Report the least specific method used anywhere.
                    method = Some(match (method, how) {
                        (Some(DeltaMethod::FixedPoint), _) | (_, DeltaMethod::FixedPoint) => DeltaMethod::FixedPoint,
                        (Some(DeltaMethod::ClosedFormLinear), _) | (_, DeltaMethod::ClosedFormLinear) => DeltaMethod::ClosedFormLinear,
                        _ => how,
                    });
                }
                Err(DeltaFailure::Invertibility(margin)) => return Err(SmpError::Invertibility { margin, c_min, path: m, node: i }),
                Err(DeltaFailure::NoConvergence { residual }) => {
                    if worst.is_none_or(|w| residual > w.2) {
                        worst = Some((m, i, residual));
                    }
                }
            }
        }
    }
    if let Some((m, i, r)) = worst {
        return Err(SmpError::NoConvergence {
            what: "Delta equation".into(),
            detail: format!("worst residual {r:.3e} at path {m}, node {i}"),
        });
    }
    Ok(DeltaProcess { delta, residual, method: method.unwrap_or(DeltaMethod::ClosedFormSz0), max_residual: max_res, growth_constant: growth })
}

/// First- and second-order variational processes.
#[derive(Clone, Debug)]
pub struct VariationBundle<S: Scalar> {
    pub x1: ProcessPanel<S>,
    pub y1: ProcessPanel<S>,
    pub z1: ProcessPanel<S>,
    pub x2: ProcessPanel<S>,
    pub y2: ProcessPanel<S>,
    pub z2: ProcessPanel<S>,
    /// `I(t)` in `Z2 = I(t) + Z-hat`.
    pub i_term: ProcessPanel<S>,
    /// Independent regression solves of the `Y1`, `Y2` equations.
    pub y1_bsde: ProcessPanel<S>,
    pub y2_bsde: ProcessPanel<S>,
    /// `Y1_bsde - <p, X1>` and `Y2_bsde - <p, X2> - <P X1, X1> / 2 - Y-hat`.
    pub residual1: ProcessPanel<S>,
    pub residual2: ProcessPanel<S>,
}

impl<S: Scalar> VariationBundle<S> {
    /// Sup-node mean absolute relation residuals.
    pub fn relation_residuals(&self) -> [f64; 2] {
        [self.residual1.sup_node_mean_abs(), self.residual2.sup_node_mean_abs()]
    }

    /// `Y2(0)` from the relation (equal to `Y-hat(0)` since `X1(0) = X2(0) = 0`).
    pub fn y2_0(&self) -> f64 {
        self.y2.node_mean(0, 0)
    }
}

/// Per-node coefficient data along the reference shared by both variation passes.
struct NodeData<S> {
    l: Local<S>,
    p: Vec<S>,
    q: Vec<S>,
    k1: Vec<S>,
    pm: Vec<S>,
    k2: Vec<S>,
    delta: S,
    on: bool,
    dv: Deltas<S>,
    /// Jacobian of sigma at `(z + Delta, u)` minus the reference one, `n x (n + 2)`.
    dsj: Vec<S>,
    hb: Vec<S>,
    hs: Vec<S>,
    hg: Vec<S>,
    inv: S,
}

fn node_data<S: Scalar>(
    spec: &ProblemSpec<S>,
    sol: &FbsdeSolution<S>,
    adj1: &FirstOrderAdjoint<S>,
    adj2: &SecondOrderAdjoint<S>,
    spike: &SpikeSpec<S>,
    delta: &DeltaProcess<S>,
    m: usize,
    i: usize,
) -> NodeData<S> {
    let (n, c) = (spec.n, spec.nv());
    let pt = ref_point(sol, m, i);
    let l = Local::at(spec, &pt);
    let on = spike.contains(i);
    let d = delta.delta.get(m, i);
    let (dv, dsj) = if on {
        let u = spike.u_at(m, i);
        let mut j0 = vec![S::zero(); n * c];
        let mut j1 = vec![S::zero(); n * c];
        spec.sigma_jac(&pt, &mut j0);
        spec.sigma_jac(&pt.with_z(pt.z + d).with_u(u), &mut j1);
        (deltas(spec, &pt, u, d), j1.iter().zip(&j0).map(|(a, b)| *a - *b).collect())
    } else {
        (Deltas { db: vec![S::zero(); n], ds: vec![S::zero(); n], dg: S::zero() }, vec![S::zero(); n * c])
    };
    let mut hb = vec![S::zero(); n * c * c];
    let mut hs = vec![S::zero(); n * c * c];
    let mut hg = vec![S::zero(); c * c];
    spec.b_hess(&pt, &mut hb);
    spec.sigma_hess(&pt, &mut hs);
    spec.g_hess(&pt, &mut hg);
    let p = adj1.p.at(m, i).to_vec();
    let inv = S::one() / (S::one() - l.p_sz(&p));
    NodeData {
        l,
        q: adj1.q.at(m, i).to_vec(),
        k1: adj1.k1.at(m, i).to_vec(),
        pm: adj2.p.at(m, i).to_vec(),
        k2: adj2.k2.at(m, i).to_vec(),
        p,
        delta: d,
        on,
        dv,
        dsj,
        hb,
        hs,
        hg,
        inv,
    }
}

impl<S: Scalar> NodeData<S> {
    /// `v^T H v` for the `r`-th `(n + 2)^2` block of `h`.
    fn hess_form(h: &[S], r: usize, v: &[S]) -> S {
        let c = v.len();
        quad_form(&h[r * c * c..(r + 1) * c * c], v)
    }

    /// Forward increments of `X1`; returns `(Y1, <K1, X1>, drift, diffusion)`.
    fn x1_step(&self, x1: &[S], drift: &mut [S], diff: &mut [S]) -> (S, S) {
        let n = self.p.len();
        let y1 = dot(&self.p, x1);
        let kx = dot(&self.k1, x1);
        let ind = if self.on { S::one() } else { S::zero() };
        for r in 0..n {
            let bx = (0..n).fold(S::zero(), |a, j| a + self.l.b_x(r, j) * x1[j]);
            let sx = (0..n).fold(S::zero(), |a, j| a + self.l.s_x(r, j) * x1[j]);
            drift[r] = bx + self.l.b_y(r) * y1 + self.l.b_z(r) * kx;
            diff[r] = sx + self.l.s_y(r) * y1 + self.l.s_z(r) * kx + self.dv.ds[r] * ind;
        }
        (y1, kx)
    }

    /// `I(t)` of the second-order relation.
    fn i_term(&self, x1: &[S], x2: &[S], yhat: S, zhat: S) -> S {
        let n = self.p.len();
        let c = n + 2;
        let mut v = dot(&self.k1, x2) + S::lit(0.5) * quad_form(&self.k2, x1);
        let psy = (0..n).fold(S::zero(), |a, r| a + self.p[r] * self.l.s_y(r));
        v += self.inv * (psy * yhat + self.l.p_sz(&self.p) * zhat);
        if self.on {
            let px = dot(&self.p, x1);
            let kx = dot(&self.k1, x1);
            let mut pds_x = S::zero();
            for r in 0..n {
                let pdr = (0..n).fold(S::zero(), |a, s| a + self.pm[r * n + s] * self.dv.ds[s]);
                pds_x += pdr * x1[r];
            }
            let mut tail = S::zero();
            for r in 0..n {
                let dsx = (0..n).fold(S::zero(), |a, j| a + self.dsj[r * c + j] * x1[j]);
                tail += self.p[r] * (dsx + self.dsj[r * c + n] * px + self.dsj[r * c + n + 1] * kx);
            }
            v += pds_x + self.inv * tail;
        }
        v
    }
}

/// Simulates `X1`, `X2` forward with the relations substituted, reconstructs
/// `Y`, `Z` from the relations and solves the backward equations of `Y1`,
/// `Y2` independently by regression for the residual check.
#[allow(clippy::too_many_arguments)]
pub fn simulate_variations<S: Scalar>(
    spec: &ProblemSpec<S>,
    sol: &FbsdeSolution<S>,
    adj1: &FirstOrderAdjoint<S>,
    adj2: &SecondOrderAdjoint<S>,
    spike: &SpikeSpec<S>,
    delta: &DeltaProcess<S>,
    yhat: &YhatSolution<S>,
    bundle: &BrownianBundle<S>,
    opts: &SolverOpts,
) -> Result<VariationBundle<S>> {
    let n = spec.n;
    let c = spec.nv();
    let grid = bundle.grid();
    let paths = bundle.paths();
    let steps = grid.steps;
    let dt = grid.dt();
    let half = S::lit(0.5);
    let data = |m: usize, i: usize| node_data(spec, sol, adj1, adj2, spike, delta, m, i);

    // Forward pass of X1 and X2, pathwise.
    type Rows<S> = (Vec<S>, Vec<S>, Vec<S>, Vec<S>, Vec<S>, Vec<S>, Vec<S>);
    let per_path: Vec<std::result::Result<Rows<S>, usize>> = (0..paths)
        .into_par_iter()
        .map(|m| {
            let nodes = grid.nodes();
            let mut x1 = vec![S::zero(); nodes * n];
            let mut x2 = vec![S::zero(); nodes * n];
            let (mut y1, mut z1, mut y2, mut z2, mut it) =
                (vec![S::zero(); nodes], vec![S::zero(); nodes], vec![S::zero(); nodes], vec![S::zero(); nodes], vec![S::zero(); nodes]);
            let (mut d1, mut s1, mut d2, mut s2) = (vec![S::zero(); n], vec![S::zero(); n], vec![S::zero(); n], vec![S::zero(); n]);
            let mut v = vec![S::zero(); c];
            for i in 0..nodes {
                let nd = data(m, i);
                let ind = if nd.on { S::one() } else { S::zero() };
                let (a1, a2) = (x1[i * n..(i + 1) * n].to_vec(), x2[i * n..(i + 1) * n].to_vec());
                let (yy1, kx) = nd.x1_step(&a1, &mut d1, &mut s1);
                y1[i] = yy1;
                z1[i] = kx + nd.delta * ind;
                let (yh, zh) = (yhat.yhat.get(m, i), yhat.zhat.get(m, i));
                let yy2 = dot(&nd.p, &a2) + half * quad_form(&nd.pm, &a1) + yh;
                let ii = nd.i_term(&a1, &a2, yh, zh);
                let zz2 = ii + zh;
                y2[i] = yy2;
                z2[i] = zz2;
                it[i] = ii;
                if i == steps {
                    break;
                }
                v[..n].copy_from_slice(&a1);
                v[n] = yy1;
                v[n + 1] = kx;
                for r in 0..n {
                    let bx = (0..n).fold(S::zero(), |a, j| a + nd.l.b_x(r, j) * a2[j]);
                    let sx = (0..n).fold(S::zero(), |a, j| a + nd.l.s_x(r, j) * a2[j]);
                    d2[r] = bx + nd.l.b_y(r) * yy2 + nd.l.b_z(r) * zz2 + nd.dv.db[r] * ind + half * NodeData::hess_form(&nd.hb, r, &v);
                    let dsx = (0..n).fold(S::zero(), |a, j| a + nd.dsj[r * c + j] * a1[j]);
                    let jump = (dsx + nd.dsj[r * c + n] * yy1 + nd.dsj[r * c + n + 1] * kx) * ind;
                    s2[r] = sx + nd.l.s_y(r) * yy2 + nd.l.s_z(r) * zz2 + half * NodeData::hess_form(&nd.hs, r, &v) + jump;
                }
                let db = bundle.db(m, i);
                for r in 0..n {
                    let n1 = a1[r] + d1[r] * dt + s1[r] * db;
                    let n2 = a2[r] + d2[r] * dt + s2[r] * db;
                    if !n1.is_finite() || !n2.is_finite() {
                        return Err(i + 1);
                    }
                    x1[(i + 1) * n + r] = n1;
                    x2[(i + 1) * n + r] = n2;
                }
            }
            Ok((x1, x2, y1, z1, y2, z2, it))
        })
        .collect();
    let mut px1 = ProcessPanel::zeros("X1", grid, paths, n);
    let mut px2 = ProcessPanel::zeros("X2", grid, paths, n);
    let mut py1 = ProcessPanel::zeros("Y1", grid, paths, 1);
    let mut pz1 = ProcessPanel::zeros("Z1", grid, paths, 1);
    let mut py2 = ProcessPanel::zeros("Y2", grid, paths, 1);
    let mut pz2 = ProcessPanel::zeros("Z2", grid, paths, 1);
    let mut pit = ProcessPanel::zeros("I", grid, paths, 1);
    for (m, r) in per_path.into_iter().enumerate() {
        let (x1, x2, y1, z1, y2, z2, it) = r.map_err(|node| SmpError::NonFinite { what: "variational state".into(), path: m, node })?;
        for i in 0..grid.nodes() {
            px1.at_mut(m, i).copy_from_slice(&x1[i * n..(i + 1) * n]);
            px2.at_mut(m, i).copy_from_slice(&x2[i * n..(i + 1) * n]);
            py1.set(m, i, y1[i]);
            pz1.set(m, i, z1[i]);
            py2.set(m, i, y2[i]);
            pz2.set(m, i, z2[i]);
            pit.set(m, i, it[i]);
        }
    }

    // Independent backward solves.
    let f1 = ProcessPanel::stack("features", &[&sol.features, &px1])?;
    let b1 = backward_sweep(
        bundle,
        &f1,
        1,
        &opts.basis,
        ("Y1", "Z1"),
        |m, out| {
            let mut gx = vec![S::zero(); n];
            spec.phi_grad(sol.x.at(m, steps), &mut gx);
            out[0] = dot(&gx, px1.at(m, steps));
            Ok(())
        },
        |i, m, a, z, out| {
            let nd = data(m, i);
            let ind = if nd.on { S::one() } else { S::zero() };
            let x1 = px1.at(m, i);
            let gx = (0..n).fold(S::zero(), |acc, j| acc + nd.l.g_x(j) * x1[j]);
            let src = gx + nd.l.g_z() * (z[0] - nd.delta * ind) - dot(&nd.q, &nd.dv.ds) * ind;
            out[0] = (a[0] + src * dt) / (S::one() - nd.l.g_y() * dt);
            Ok(())
        },
    )?;
    let f2 = ProcessPanel::stack("features", &[&sol.features, &px1, &px2])?;
    let b2 = backward_sweep(
        bundle,
        &f2,
        1,
        &opts.basis,
        ("Y2", "Z2"),
        |m, out| {
            let mut gx = vec![S::zero(); n];
            let mut h = vec![S::zero(); n * n];
            spec.phi_grad(sol.x.at(m, steps), &mut gx);
            spec.phi_hess(sol.x.at(m, steps), &mut h);
            out[0] = dot(&gx, px2.at(m, steps)) + half * quad_form(&h, px1.at(m, steps));
            Ok(())
        },
        |i, m, a, z, out| {
            let nd = data(m, i);
            let ind = if nd.on { S::one() } else { S::zero() };
            let (x1, x2) = (px1.at(m, i), px2.at(m, i));
            let mut v = x1.to_vec();
            v.push(py1.get(m, i));
            v.push(dot(&nd.k1, x1));
            let gx = (0..n).fold(S::zero(), |acc, j| acc + nd.l.g_x(j) * x2[j]);
            let src = gx + nd.l.g_z() * z[0] + (dot(&nd.q, &nd.dv.ds) + nd.dv.dg) * ind + half * quad_form(&nd.hg, &v);
            out[0] = (a[0] + src * dt) / (S::one() - nd.l.g_y() * dt);
            Ok(())
        },
    )?;
    let mut r1 = ProcessPanel::zeros("Y1_residual", grid, paths, 1);
    let mut r2 = ProcessPanel::zeros("Y2_residual", grid, paths, 1);
    for i in 0..grid.nodes() {
        for m in 0..paths {
            r1.set(m, i, b1.y.get(m, i) - py1.get(m, i));
            r2.set(m, i, b2.y.get(m, i) - py2.get(m, i));
        }
    }
    Ok(VariationBundle { x1: px1, y1: py1, z1: pz1, x2: px2, y2: py2, z2: pz2, i_term: pit, y1_bsde: b1.y, y2_bsde: b2.y, residual1: r1, residual2: r2 })
}

/// Remainders `xi^{k}`, `eta^{k}`, `zeta^{k}` for `k = 1, 2, 3`.
#[derive(Clone, Debug)]
pub struct SpikeDiffs<S: Scalar> {
    pub xi: [ProcessPanel<S>; 3],
    pub eta: [ProcessPanel<S>; 3],
    pub zeta: [ProcessPanel<S>; 3],
}

impl<S: Scalar> SpikeDiffs<S> {
    pub fn new(spiked: &FbsdeSolution<S>, reference: &FbsdeSolution<S>, var: &VariationBundle<S>) -> Result<Self> {
        let xi1 = spiked.x.sub(&reference.x, "xi1")?;
        let eta1 = spiked.y.sub(&reference.y, "eta1")?;
        let zeta1 = spiked.z.sub(&reference.z, "zeta1")?;
        let xi2 = xi1.sub(&var.x1, "xi2")?;
        let eta2 = eta1.sub(&var.y1, "eta2")?;
        let zeta2 = zeta1.sub(&var.z1, "zeta2")?;
        let xi3 = xi2.sub(&var.x2, "xi3")?;
        let eta3 = eta2.sub(&var.y2, "eta3")?;
        let zeta3 = zeta2.sub(&var.z2, "zeta3")?;
        Ok(Self { xi: [xi1, xi2, xi3], eta: [eta1, eta2, eta3], zeta: [zeta1, zeta2, zeta3] })
    }
}

/// Reference trajectory with every adjoint object needed for spikes.
///
/// Spiked systems are solved open loop with `ubar` tabulated along the
/// reference state, and that state joins their regression features as
/// `[X_ref, X - X_ref]`. For the reference itself the difference column is
/// identically zero, so its own solve under `ubar` already uses the same
/// regression space.
#[derive(Clone, Debug)]
pub struct Reference<S: Scalar> {
    pub sol: FbsdeSolution<S>,
    pub adj1: FirstOrderAdjoint<S>,
    pub adj2: SecondOrderAdjoint<S>,
    pub gamma: GammaProcess<S>,
    pub ubar: ProcessPanel<S>,
    pub aux: ProcessPanel<S>,
}

pub fn prepare_reference<S: Scalar>(spec: &ProblemSpec<S>, ubar: &ControlLaw<S>, bundle: &BrownianBundle<S>, opts: &PicardOpts) -> Result<Reference<S>> {
    let sol = solve_coupled_picard(spec, ubar, bundle, opts)?;
    reference_from(spec, sol, bundle, &opts.solver)
}

/// Adjoint objects on an already solved reference.
pub fn reference_from<S: Scalar>(spec: &ProblemSpec<S>, sol: FbsdeSolution<S>, bundle: &BrownianBundle<S>, opts: &SolverOpts) -> Result<Reference<S>> {
    let aux = sol.x.clone().relabel("X_ref");
    let upanel = sol.u.clone().relabel("u_bar");
    let adj1 = solve_first_order_adjoint(spec, &sol, bundle, opts)?;
    let adj2 = solve_second_order_adjoint(spec, &sol, &adj1, bundle, opts)?;
    let gamma = solve_gamma(spec, &sol, &adj1, bundle)?;
    Ok(Reference { sol, adj1, adj2, gamma, ubar: upanel, aux })
}

/// Everything computed for one spike.
#[derive(Clone, Debug)]
pub struct SpikeRun<S: Scalar> {
    pub spike: SpikeSpec<S>,
    pub solution: FbsdeSolution<S>,
    pub delta: DeltaProcess<S>,
    pub yhat: YhatSolution<S>,
    pub variations: VariationBundle<S>,
    pub diffs: SpikeDiffs<S>,
}

impl<S: Scalar> SpikeRun<S> {
    /// `J(u^eps) - J(ubar)`.
    pub fn cost_change(&self, reference: &Reference<S>) -> f64 {
        self.solution.y0() - reference.sol.y0()
    }
}

pub fn run_spike<S: Scalar>(spec: &ProblemSpec<S>, reference: &Reference<S>, spike: SpikeSpec<S>, bundle: &BrownianBundle<S>, opts: &PicardOpts) -> Result<SpikeRun<S>> {
    let panel = spike.spiked_panel(&reference.ubar);
    let solution = if panel.data() == reference.ubar.data() {
        // u^eps = ubar: the spiked system is the reference system
        reference.sol.clone()
    } else {
        solve_coupled_picard_with(spec, &ControlLaw::OpenLoop(panel), Some(&reference.aux), bundle, opts)?
    };
    let r = reference;
    let delta = solve_delta(spec, &r.sol, &r.adj1, &spike, opts.solver.c_min)?;
    let yhat = solve_yhat(spec, &r.sol, &r.adj1, &r.adj2, &r.gamma, &spike, &delta, bundle, &opts.solver)?;
    let variations = simulate_variations(spec, &r.sol, &r.adj1, &r.adj2, &spike, &delta, &yhat, bundle, &opts.solver)?;
    let diffs = SpikeDiffs::new(&solution, &r.sol, &variations)?;
    Ok(SpikeRun { spike, solution, delta, yhat, variations, diffs })
}

/// Settings of an order experiment.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentOpts {
    /// Spike widths; each must be a multiple of `dt`.
    pub ladder: Vec<f64>,
    pub betas: Vec<f64>,
    /// Window start; `T / 4` when absent.
    pub t0: Option<f64>,
    pub perturbation: Vec<f64>,
    pub picard: PicardOpts,
}

impl ExperimentOpts {
    /// Ladder `T * 2^{-4}, ..., T * 2^{-8}`.
    pub fn default_ladder(horizon: f64) -> Vec<f64> {
        (4..=8).map(|k| horizon * 0.5f64.powi(k)).collect()
    }
}

/// One moment estimate of the raw table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderRow {
    pub eps: f64,
    pub norm: String,
    pub beta: f64,
    pub estimate: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeRow {
    pub norm: String,
    pub beta: f64,
    pub fit: Option<SlopeFit>,
}

/// Scalar quantities of one ladder point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderPoint {
    pub eps: f64,
    pub failed: Option<String>,
    pub damping_engaged: bool,
    pub sweeps: usize,
    pub cost_change: f64,
    pub y2_0: f64,
    pub yhat_bsde: Estimate,
    pub yhat_gamma: Estimate,
    pub defect: f64,
    pub relation_residuals: [f64; 2],
    pub delta_method: Option<DeltaMethod>,
    pub delta_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderReport {
    pub problem: String,
    pub steps: usize,
    pub paths: usize,
    pub t0: f64,
    pub j_bar: f64,
    pub points: Vec<LadderPoint>,
    pub rows: Vec<OrderRow>,
    pub slopes: Vec<SlopeRow>,
    pub defect_slope: Option<SlopeFit>,
    /// The largest width was left out of the fits because its solve was damped.
    pub dropped_largest: bool,
}

impl OrderReport {
    pub fn slope(&self, norm: &str, beta: f64) -> Option<&SlopeFit> {
        self.slopes.iter().find(|s| s.norm == norm && s.beta == beta).and_then(|s| s.fit.as_ref())
    }
}

/// Names and norm kinds of the tabulated remainders.
pub const NORMS: [(&str, NormKind); 12] = [
    ("xi1", NormKind::Sup),
    ("eta1", NormKind::Sup),
    ("zeta1", NormKind::Int2),
    ("X1", NormKind::Sup),
    ("Y1", NormKind::Sup),
    ("Z1", NormKind::Int2),
    ("xi2", NormKind::Sup),
    ("eta2", NormKind::Sup),
    ("zeta2", NormKind::Int2),
    ("xi3", NormKind::Sup),
    ("eta3", NormKind::Sup),
    ("zeta3", NormKind::Int2),
];

fn panels_of<S: Scalar>(run: &SpikeRun<S>) -> [&ProcessPanel<S>; 12] {
    let (d, v) = (&run.diffs, &run.variations);
    [&d.xi[0], &d.eta[0], &d.zeta[0], &v.x1, &v.y1, &v.z1, &d.xi[1], &d.eta[1], &d.zeta[1], &d.xi[2], &d.eta[2], &d.zeta[2]]
}

/// Runs the spike ladder on common random numbers and fits log-log slopes of
/// every remainder norm and of the expansion defect against `eps`.
pub fn run_order_experiment<S: Scalar>(spec: &ProblemSpec<S>, ubar: &ControlLaw<S>, bundle: &BrownianBundle<S>, opts: &ExperimentOpts) -> Result<OrderReport> {
    let reference = prepare_reference(spec, ubar, bundle, &opts.picard)?;
    order_experiment_on(spec, &reference, bundle, opts)
}

/// As [`run_order_experiment`] on an already prepared reference.
pub fn order_experiment_on<S: Scalar>(spec: &ProblemSpec<S>, reference: &Reference<S>, bundle: &BrownianBundle<S>, opts: &ExperimentOpts) -> Result<OrderReport> {
    if opts.ladder.is_empty() {
        return Err(SmpError::InvalidInput("epsilon ladder is empty".into()));
    }
    if opts.perturbation.len() != spec.k {
        return Err(SmpError::InvalidInput(format!("spike value has {} entries, control dimension is {}", opts.perturbation.len(), spec.k)));
    }
    let betas: Vec<MomentSpec> = opts.betas.iter().map(|b| MomentSpec::new(*b, NormKind::Sup)).collect::<Result<_>>()?;
    let grid = bundle.grid();
    let u: Vec<S> = opts.perturbation.iter().map(|v| S::lit(*v)).collect();
    let mut ladder = opts.ladder.clone();
    ladder.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut points = Vec::new();
    let mut rows = Vec::new();
    let mut t0 = 0.0;
    for &eps in &ladder {
        let spike = match opts.t0 {
            Some(t) => SpikeSpec::new(grid, t, eps, Perturbation::Value(u.clone()))?,
            None => SpikeSpec::at_quarter(grid, eps, Perturbation::Value(u.clone()))?,
        };
        t0 = spike.t0();
        match run_spike(spec, reference, spike, bundle, &opts.picard) {
            Ok(run) => {
                let panels = panels_of(&run);
                for b in &betas {
                    for ((name, kind), panel) in NORMS.iter().zip(panels.iter()) {
                        let e = moment_norm(panel, MomentSpec { kind: *kind, ..*b });
                        rows.push(OrderRow { eps, norm: name.to_string(), beta: b.beta, estimate: e.mean, stderr: e.stderr });
                    }
                }
                let cost_change = run.cost_change(reference);
                let y2_0 = run.variations.y2_0();
                points.push(LadderPoint {
                    eps,
                    failed: None,
                    damping_engaged: run.solution.damping_engaged,
                    sweeps: run.solution.sweeps(),
                    cost_change,
                    y2_0,
                    yhat_bsde: run.yhat.y0_bsde,
                    yhat_gamma: run.yhat.y0_gamma,
                    defect: (cost_change - y2_0).abs(),
                    relation_residuals: run.variations.relation_residuals(),
                    delta_method: Some(run.delta.method),
                    delta_residual: run.delta.max_residual,
                });
            }
            Err(e) => points.push(LadderPoint {
                eps,
                failed: Some(e.to_string()),
                damping_engaged: false,
                sweeps: 0,
                cost_change: f64::NAN,
                y2_0: f64::NAN,
                yhat_bsde: Estimate { mean: f64::NAN, stderr: f64::NAN },
                yhat_gamma: Estimate { mean: f64::NAN, stderr: f64::NAN },
                defect: f64::NAN,
                relation_residuals: [f64::NAN; 2],
                delta_method: None,
                delta_residual: f64::NAN,
            }),
        }
    }
    let dropped_largest = points.first().is_some_and(|p| p.damping_engaged) && points.len() > 2;
    let used: Vec<f64> = points.iter().skip(dropped_largest as usize).filter(|p| p.failed.is_none()).map(|p| p.eps).collect();
    let mut slopes = Vec::new();
    for b in &opts.betas {
        for (name, _) in NORMS {
            let (xs, ys): (Vec<f64>, Vec<f64>) = rows
                .iter()
                .filter(|r| r.norm == name && r.beta == *b && used.contains(&r.eps))
                .map(|r| (r.eps, r.estimate))
                .unzip();
            slopes.push(SlopeRow { norm: name.to_string(), beta: *b, fit: fit_loglog(&xs, &ys) });
        }
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().filter(|p| used.contains(&p.eps)).map(|p| (p.eps, p.defect)).unzip();
    Ok(OrderReport {
        problem: spec.name.clone(),
        steps: grid.steps,
        paths: bundle.paths(),
        t0,
        j_bar: reference.sol.y0(),
        points,
        rows,
        slopes,
        defect_slope: fit_loglog(&xs, &ys),
        dropped_largest,
    })
}
