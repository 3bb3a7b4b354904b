//! First- and second-order adjoint processes, the stochastic exponential
//! `gamma` and the auxiliary linear BSDE for `Y-hat`, all along a solved
//! reference trajectory.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmpError};
use crate::fbsde::{backward_sweep, FbsdeSolution, SolverOpts};
use crate::model::{Point, ProblemSpec};
use crate::paths::{BrownianBundle, ProcessPanel};
use crate::regression::NodeFit;
use crate::scalar::{dot, symmetrize, Scalar};
use crate::spike::{DeltaProcess, SpikeSpec};
use crate::stats::{mean_stderr, Estimate};

/// Reference point `(t_i, X(m, i), Y(m, i), Z(m, i), u(m, i))` of a solution.
#[inline]
pub(crate) fn ref_point<S: Scalar>(sol: &FbsdeSolution<S>, m: usize, i: usize) -> Point<'_, S> {
    Point::new(sol.x.grid().t(i), sol.x.at(m, i), sol.y.get(m, i), sol.z.get(m, i), sol.u.at(m, i))
}

/// First partials of `b`, `sigma` and `g` at one point.
pub(crate) struct Local<S> {
    n: usize,
    bj: Vec<S>,
    sj: Vec<S>,
    gg: Vec<S>,
}

impl<S: Scalar> Local<S> {
    pub(crate) fn at(spec: &ProblemSpec<S>, pt: &Point<S>) -> Self {
        let (n, c) = (spec.n, spec.nv());
        let mut l = Self { n, bj: vec![S::zero(); n * c], sj: vec![S::zero(); n * c], gg: vec![S::zero(); c] };
        spec.b_jac(pt, &mut l.bj);
        spec.sigma_jac(pt, &mut l.sj);
        spec.g_grad(pt, &mut l.gg);
        if let crate::model::SigmaForm::LinearInZ { a, .. } = &spec.sigma_form {
            let mut av = vec![S::zero(); n];
            a(pt.t, &mut av);
            for r in 0..n {
                l.sj[r * c + n + 1] = av[r];
            }
        }
        l
    }

    #[inline]
    fn c(&self) -> usize {
        self.n + 2
    }
    #[inline]
    pub(crate) fn b_x(&self, r: usize, j: usize) -> S {
        self.bj[r * self.c() + j]
    }
    #[inline]
    pub(crate) fn b_y(&self, r: usize) -> S {
        self.bj[r * self.c() + self.n]
    }
    #[inline]
    pub(crate) fn b_z(&self, r: usize) -> S {
        self.bj[r * self.c() + self.n + 1]
    }
    #[inline]
    pub(crate) fn s_x(&self, r: usize, j: usize) -> S {
        self.sj[r * self.c() + j]
    }
    #[inline]
    pub(crate) fn s_y(&self, r: usize) -> S {
        self.sj[r * self.c() + self.n]
    }
    #[inline]
    pub(crate) fn s_z(&self, r: usize) -> S {
        self.sj[r * self.c() + self.n + 1]
    }
    #[inline]
    pub(crate) fn g_x(&self, j: usize) -> S {
        self.gg[j]
    }
    #[inline]
    pub(crate) fn g_y(&self) -> S {
        self.gg[self.n]
    }
    #[inline]
    pub(crate) fn g_z(&self) -> S {
        self.gg[self.n + 1]
    }

    /// `<p, sigma_z>`.
    pub(crate) fn p_sz(&self, p: &[S]) -> S {
        (0..self.n).fold(S::zero(), |a, r| a + p[r] * self.s_z(r))
    }

    /// `K1 = (1 - <p, sigma_z>)^{-1} (sigma_x^T p + <p, sigma_y> p + q)`;
    /// returns `1 - <p, sigma_z>`.
    pub(crate) fn k1(&self, p: &[S], q: &[S], out: &mut [S]) -> S {
        let n = self.n;
        let den = S::one() - self.p_sz(p);
        let psy = (0..n).fold(S::zero(), |a, r| a + p[r] * self.s_y(r));
        for j in 0..n {
            let sxp = (0..n).fold(S::zero(), |a, r| a + self.s_x(r, j) * p[r]);
            out[j] = (sxp + psy * p[j] + q[j]) / den;
        }
        den
    }

    /// `H_y = g_y + <p, b_y> + <q, sigma_y>` and `H_z` likewise.
    pub(crate) fn h_yz(&self, p: &[S], q: &[S]) -> (S, S) {
        let n = self.n;
        let hy = self.g_y() + (0..n).fold(S::zero(), |a, r| a + p[r] * self.b_y(r) + q[r] * self.s_y(r));
        let hz = self.g_z() + (0..n).fold(S::zero(), |a, r| a + p[r] * self.b_z(r) + q[r] * self.s_z(r));
        (hy, hz)
    }

    /// Generator of the first-order adjoint equation.
    fn p_generator(&self, p: &[S], q: &[S], k1: &[S], out: &mut [S]) {
        let n = self.n;
        let pby = (0..n).fold(S::zero(), |a, r| a + p[r] * self.b_y(r));
        let pbz = (0..n).fold(S::zero(), |a, r| a + p[r] * self.b_z(r));
        let qsy = (0..n).fold(S::zero(), |a, r| a + q[r] * self.s_y(r));
        let qsz = (0..n).fold(S::zero(), |a, r| a + q[r] * self.s_z(r));
        for j in 0..n {
            let bxp = (0..n).fold(S::zero(), |a, r| a + self.b_x(r, j) * p[r]);
            let sxq = (0..n).fold(S::zero(), |a, r| a + self.s_x(r, j) * q[r]);
            out[j] = self.g_x(j) + self.g_y() * p[j] + self.g_z() * k1[j] + bxp + pby * p[j] + pbz * k1[j] + sxq + qsy * p[j] + qsz * k1[j];
        }
    }

    /// `G = D psi [I, p, K1]^T = psi_x + psi_y p^T + psi_z K1^T` for `psi = b` or `sigma`.
    fn reduced(&self, sigma: bool, p: &[S], k1: &[S]) -> Vec<S> {
        let n = self.n;
        let mut g = vec![S::zero(); n * n];
        for r in 0..n {
            for s in 0..n {
                g[r * n + s] = if sigma {
                    self.s_x(r, s) + self.s_y(r) * p[s] + self.s_z(r) * k1[s]
                } else {
                    self.b_x(r, s) + self.b_y(r) * p[s] + self.b_z(r) * k1[s]
                };
            }
        }
        g
    }
}

/// `(p, q, K1)` along a reference trajectory.
#[derive(Clone, Debug)]
pub struct FirstOrderAdjoint<S: Scalar> {
    pub p: ProcessPanel<S>,
    pub q: ProcessPanel<S>,
    pub k1: ProcessPanel<S>,
    /// `min |1 - <p, sigma_z>|` over all nodes and paths.
    pub margin: f64,
    /// Largest `|(1 - <p, sigma_z>) K1 - sigma_x^T p - <p, sigma_y> p - q|`.
    pub k1_identity_residual: f64,
    pub max_abs_q: f64,
    /// Most implicit-step iterations used at any node.
    pub max_inner_iterations: usize,
    /// `sigma_z` vanished along the whole reference, so `K1` is explicit.
    pub sigma_z_free: bool,
    pub ridge_nodes: usize,
    pub(crate) fits: Arc<Vec<NodeFit>>,
}

pub const ADJOINT_INNER_MAX: usize = 20;
pub const ADJOINT_INNER_TOL: f64 = 1e-12;

fn guard(den: f64, c_min: f64, m: usize, i: usize) -> Result<()> {
    if den.abs() < c_min || !den.is_finite() {
        Err(SmpError::Invertibility { margin: den.abs(), c_min, path: m, node: i })
    } else {
        Ok(())
    }
}

/// Backward regression solve of the first-order adjoint equation.
///
/// `p_i = E_i[p_{i+1}] + f(p_i, q_i, K1(p_i, q_i)) dt` is solved per node by
/// fixed-point iteration (at most 20 sweeps, tolerance 1e-12), with `q_i` the
/// regression estimate of the martingale integrand. For linear-in-`z`
/// diffusions `sigma_z = A(t)` enters the same generator.
pub fn solve_first_order_adjoint<S: Scalar>(
    spec: &ProblemSpec<S>,
    sol: &FbsdeSolution<S>,
    bundle: &BrownianBundle<S>,
    opts: &SolverOpts,
) -> Result<FirstOrderAdjoint<S>> {
    let n = spec.n;
    let grid = bundle.grid();
    let dt = grid.dt();
    let iters = std::sync::atomic::AtomicUsize::new(0);
    let tol = S::lit(ADJOINT_INNER_TOL);
    let sweep = backward_sweep(
        bundle,
        &sol.features,
        n,
        &opts.basis,
        ("p", "q"),
        |m, out| {
            spec.phi_grad(sol.x.at(m, grid.steps), out);
            Ok(())
        },
        |i, m, a, q, out| {
            let l = Local::at(spec, &ref_point(sol, m, i));
            let mut p = a.to_vec();
            let mut k1 = vec![S::zero(); n];
            let mut gen = vec![S::zero(); n];
            let mut used = 0;
            for it in 1..=ADJOINT_INNER_MAX {
                used = it;
                let den = l.k1(&p, q, &mut k1);
                guard(den.as_f64(), opts.c_min, m, i)?;
                l.p_generator(&p, q, &k1, &mut gen);
                let mut diff = S::zero();
                for j in 0..n {
                    let v = a[j] + gen[j] * dt;
                    diff = diff.max((v - p[j]).abs());
                    p[j] = v;
                }
                if diff <= tol * (S::one() + crate::scalar::norm(&p)) {
                    break;
                }
            }
            iters.fetch_max(used, std::sync::atomic::Ordering::Relaxed);
            if p.iter().any(|v| !v.is_finite()) {
                return Err(SmpError::NonFinite { what: "p".into(), path: m, node: i });
            }
            out.copy_from_slice(&p);
            Ok(())
        },
    )?;
    let (p, q) = (sweep.y, sweep.z);
    let mut k1 = ProcessPanel::zeros("K1", grid, bundle.paths(), n);
    let mut margin = f64::INFINITY;
    let mut resid = 0.0f64;
    let mut sz_free = true;
    for i in 0..grid.nodes() {
        let rows: Vec<Result<(Vec<S>, f64, f64, bool)>> = (0..bundle.paths())
            .into_par_iter()
            .map(|m| {
                let l = Local::at(spec, &ref_point(sol, m, i));
                let (pv, qv) = (p.at(m, i), q.at(m, i));
                let mut kv = vec![S::zero(); n];
                let den = l.k1(pv, qv, &mut kv);
                guard(den.as_f64(), opts.c_min, m, i)?;
                let psy = (0..n).fold(S::zero(), |a, r| a + pv[r] * l.s_y(r));
                let mut r = 0.0f64;
                for j in 0..n {
                    let sxp = (0..n).fold(S::zero(), |a, s| a + l.s_x(s, j) * pv[s]);
                    r = r.max((den * kv[j] - sxp - psy * pv[j] - qv[j]).as_f64().abs());
                }
                let free = (0..n).all(|r| l.s_z(r) == S::zero());
                Ok((kv, den.as_f64().abs(), r, free))
            })
            .collect();
        for (m, row) in rows.into_iter().enumerate() {
            let (kv, den, r, free) = row?;
            k1.at_mut(m, i).copy_from_slice(&kv);
            margin = margin.min(den);
            resid = resid.max(r);
            sz_free &= free;
        }
    }
    let max_abs_q = q.data().iter().fold(0.0f64, |a, v| a.max(v.as_f64().abs()));
    Ok(FirstOrderAdjoint {
        p,
        q,
        k1,
        margin,
        k1_identity_residual: resid,
        max_abs_q,
        max_inner_iterations: iters.into_inner(),
        sigma_z_free: sz_free,
        ridge_nodes: sweep.ridge_nodes,
        fits: Arc::new(sweep.fits),
    })
}

/// `(P, Q, K2)` with the cached `H_y`, `H_z` panels.
#[derive(Clone, Debug)]
pub struct SecondOrderAdjoint<S: Scalar> {
    pub p: ProcessPanel<S>,
    pub q: ProcessPanel<S>,
    pub k2: ProcessPanel<S>,
    pub h_y: ProcessPanel<S>,
    pub h_z: ProcessPanel<S>,
    /// Largest `|P - P^T|` entry over all nodes.
    pub max_asymmetry: f64,
    pub ridge_nodes: usize,
    pub(crate) fits: Arc<Vec<NodeFit>>,
}

/// Second-order data at one node that does not depend on `(P, Q)`.
struct SecondLocal<S> {
    n: usize,
    inv: S,
    gs: Vec<S>,
    gb: Vec<S>,
    hy: S,
    hz: S,
    /// `[I, p, K1] D^2 H [I, p, K1]^T`.
    mhm: Vec<S>,
    /// `sum_r p_r [I, p, K1] D^2 sigma_r [I, p, K1]^T`.
    psig: Vec<S>,
    sy: Vec<S>,
    p: Vec<S>,
}

/// `M A M^T` for `M = [I | p | K1]` and a `(n + 2) x (n + 2)` block `A`.
fn contract<S: Scalar>(a: &[S], p: &[S], k1: &[S], n: usize, out: &mut [S], weight: S) {
    let c = n + 2;
    let m = |r: usize, j: usize| -> S {
        if j < n {
            if r == j {
                S::one()
            } else {
                S::zero()
            }
        } else if j == n {
            p[r]
        } else {
            k1[r]
        }
    };
    for r in 0..n {
        for s in 0..n {
            let mut acc = S::zero();
            for j in 0..c {
                let mrj = m(r, j);
                if mrj == S::zero() {
                    continue;
                }
                for k in 0..c {
                    acc += mrj * a[j * c + k] * m(s, k);
                }
            }
            out[r * n + s] += weight * acc;
        }
    }
}

impl<S: Scalar> SecondLocal<S> {
    fn new(spec: &ProblemSpec<S>, pt: &Point<S>, p: &[S], q: &[S], k1: &[S]) -> Self {
        let n = spec.n;
        let c = spec.nv();
        let l = Local::at(spec, pt);
        let inv = S::one() / (S::one() - l.p_sz(p));
        let gs = l.reduced(true, p, k1);
        let gb = l.reduced(false, p, k1);
        let (hy, hz) = l.h_yz(p, q);
        let mut hb = vec![S::zero(); n * c * c];
        let mut hs = vec![S::zero(); n * c * c];
        let mut hg = vec![S::zero(); c * c];
        spec.b_hess(pt, &mut hb);
        spec.sigma_hess(pt, &mut hs);
        spec.g_hess(pt, &mut hg);
        let mut mhm = vec![S::zero(); n * n];
        let mut psig = vec![S::zero(); n * n];
        contract(&hg, p, k1, n, &mut mhm, S::one());
        for r in 0..n {
            contract(&hb[r * c * c..(r + 1) * c * c], p, k1, n, &mut mhm, p[r]);
            contract(&hs[r * c * c..(r + 1) * c * c], p, k1, n, &mut mhm, q[r]);
            contract(&hs[r * c * c..(r + 1) * c * c], p, k1, n, &mut psig, p[r]);
        }
        let sy = (0..n).map(|r| l.s_y(r)).collect();
        Self { n, inv, gs, gb, hy, hz, mhm, psig, sy, p: p.to_vec() }
    }

    /// `K2 = (1 - <p, sigma_z>)^{-1} (sigma_y p^T P + G^T P + P G + Q + p D^2 sigma (M)^2)`.
    fn k2(&self, pm: &[S], qm: &[S], out: &mut [S]) {
        let n = self.n;
        for r in 0..n {
            for s in 0..n {
                let mut acc = qm[r * n + s] + self.psig[r * n + s];
                let ptp: S = (0..n).fold(S::zero(), |a, k| a + self.p[k] * pm[k * n + s]);
                acc += self.sy[r] * ptp;
                for k in 0..n {
                    acc += self.gs[k * n + r] * pm[k * n + s] + pm[r * n + k] * self.gs[k * n + s];
                }
                out[r * n + s] = self.inv * acc;
            }
        }
    }

    fn generator(&self, pm: &[S], qm: &[S], k2: &[S], out: &mut [S]) {
        let n = self.n;
        // G_s^T P G_s
        let mut pg = vec![S::zero(); n * n];
        for r in 0..n {
            for s in 0..n {
                pg[r * n + s] = (0..n).fold(S::zero(), |a, k| a + pm[r * n + k] * self.gs[k * n + s]);
            }
        }
        for r in 0..n {
            for s in 0..n {
                let mut acc = self.mhm[r * n + s] + self.hz * k2[r * n + s] + self.hy * pm[r * n + s];
                for k in 0..n {
                    acc += self.gs[k * n + r] * pg[k * n + s];
                    acc += pm[r * n + k] * self.gb[k * n + s] + self.gb[k * n + r] * pm[k * n + s];
                    acc += qm[r * n + k] * self.gs[k * n + s] + self.gs[k * n + r] * qm[k * n + s];
                }
                out[r * n + s] = acc;
            }
        }
    }
}

/// Backward regression solve of the matrix second-order adjoint equation,
/// symmetrizing `P` after every step.
pub fn solve_second_order_adjoint<S: Scalar>(
    spec: &ProblemSpec<S>,
    sol: &FbsdeSolution<S>,
    adj1: &FirstOrderAdjoint<S>,
    bundle: &BrownianBundle<S>,
    opts: &SolverOpts,
) -> Result<SecondOrderAdjoint<S>> {
    let n = spec.n;
    let nn = n * n;
    let grid = bundle.grid();
    let dt = grid.dt();
    let tol = S::lit(ADJOINT_INNER_TOL);
    let local = |m: usize, i: usize| SecondLocal::new(spec, &ref_point(sol, m, i), adj1.p.at(m, i), adj1.q.at(m, i), adj1.k1.at(m, i));
    let sweep = backward_sweep(
        bundle,
        &sol.features,
        nn,
        &opts.basis,
        ("P", "Q"),
        |m, out| {
            spec.phi_hess(sol.x.at(m, grid.steps), out);
            symmetrize(out, n);
            Ok(())
        },
        |i, m, a, qm, out| {
            let sl = local(m, i);
            guard((S::one() / sl.inv).as_f64(), opts.c_min, m, i)?;
            let mut pm = a.to_vec();
            let mut k2 = vec![S::zero(); nn];
            let mut gen = vec![S::zero(); nn];
            for _ in 0..ADJOINT_INNER_MAX {
                sl.k2(&pm, qm, &mut k2);
                sl.generator(&pm, qm, &k2, &mut gen);
                let mut diff = S::zero();
                for j in 0..nn {
                    let v = a[j] + gen[j] * dt;
                    diff = diff.max((v - pm[j]).abs());
                    pm[j] = v;
                }
                if diff <= tol * (S::one() + crate::scalar::norm(&pm)) {
                    break;
                }
            }
            symmetrize(&mut pm, n);
            if pm.iter().any(|v| !v.is_finite()) {
                return Err(SmpError::NonFinite { what: "P".into(), path: m, node: i });
            }
            out.copy_from_slice(&pm);
            Ok(())
        },
    )?;
    let (pp, qq) = (sweep.y, sweep.z);
    let paths = bundle.paths();
    let mut k2 = ProcessPanel::zeros("K2", grid, paths, nn);
    let mut h_y = ProcessPanel::zeros("H_y", grid, paths, 1);
    let mut h_z = ProcessPanel::zeros("H_z", grid, paths, 1);
    let mut asym = 0.0f64;
    for i in 0..grid.nodes() {
        let rows: Vec<(Vec<S>, S, S)> = (0..paths)
            .into_par_iter()
            .map(|m| {
                let sl = local(m, i);
                let mut kv = vec![S::zero(); nn];
                sl.k2(pp.at(m, i), qq.at(m, i), &mut kv);
                (kv, sl.hy, sl.hz)
            })
            .collect();
        for (m, (kv, hy, hz)) in rows.into_iter().enumerate() {
            k2.at_mut(m, i).copy_from_slice(&kv);
            h_y.set(m, i, hy);
            h_z.set(m, i, hz);
            let pv = pp.at(m, i);
            for r in 0..n {
                for s in 0..n {
                    asym = asym.max((pv[r * n + s] - pv[s * n + r]).as_f64().abs());
                }
            }
        }
    }
    Ok(SecondOrderAdjoint { p: pp, q: qq, k2, h_y, h_z, max_asymmetry: asym, ridge_nodes: sweep.ridge_nodes, fits: Arc::new(sweep.fits) })
}

/// Coefficients of `d gamma = gamma (a dt + c dB)`:
/// `a = H_y + g_z <p, sigma_y> / (1 - <p, sigma_z>)`,
/// `c = H_z + g_z <p, sigma_z> / (1 - <p, sigma_z>)`.
pub(crate) fn gamma_coefficients<S: Scalar>(spec: &ProblemSpec<S>, sol: &FbsdeSolution<S>, adj1: &FirstOrderAdjoint<S>, m: usize, i: usize) -> (S, S) {
    let l = Local::at(spec, &ref_point(sol, m, i));
    let (p, q) = (adj1.p.at(m, i), adj1.q.at(m, i));
    let (hy, hz) = l.h_yz(p, q);
    let inv = S::one() / (S::one() - l.p_sz(p));
    let psy = (0..spec.n).fold(S::zero(), |a, r| a + p[r] * l.s_y(r));
    (hy + inv * l.g_z() * psy, hz + inv * l.g_z() * l.p_sz(p))
}

#[derive(Clone, Debug)]
pub struct GammaProcess<S: Scalar> {
    pub gamma: ProcessPanel<S>,
    pub drift: ProcessPanel<S>,
    pub diffusion: ProcessPanel<S>,
}

impl<S: Scalar> GammaProcess<S> {
    pub fn min_value(&self) -> f64 {
        self.gamma.data().iter().fold(f64::INFINITY, |a, v| a.min(v.as_f64()))
    }

    /// `E[gamma_T]` with its standard error.
    pub fn terminal_mean(&self) -> Estimate {
        let n = self.gamma.grid().steps;
        let v: Vec<f64> = (0..self.gamma.paths()).map(|m| self.gamma.get(m, n).as_f64()).collect();
        mean_stderr(&v)
    }
}

/// Log-space integration
/// `log gamma_{i+1} = log gamma_i - ln(1 - a_i dt) - c_i^2 dt / 2 + c_i dB_i`,
/// which keeps `gamma > 0` and matches the implicit backward step used for
/// `Y-hat`; `-ln(1 - a dt) = a dt + O(dt^2)`.
pub fn solve_gamma<S: Scalar>(spec: &ProblemSpec<S>, sol: &FbsdeSolution<S>, adj1: &FirstOrderAdjoint<S>, bundle: &BrownianBundle<S>) -> Result<GammaProcess<S>> {
    let grid = bundle.grid();
    let paths = bundle.paths();
    let dt = grid.dt();
    let mut drift = ProcessPanel::zeros("gamma_drift", grid, paths, 1);
    let mut diffusion = ProcessPanel::zeros("gamma_diffusion", grid, paths, 1);
    for i in 0..grid.nodes() {
        let rows: Vec<(S, S)> = (0..paths).into_par_iter().map(|m| gamma_coefficients(spec, sol, adj1, m, i)).collect();
        for (m, (a, c)) in rows.into_iter().enumerate() {
            drift.set(m, i, a);
            diffusion.set(m, i, c);
        }
    }
    let mut gamma = ProcessPanel::zeros("gamma", grid, paths, 1);
    for m in 0..paths {
        let mut lg = S::zero();
        gamma.set(m, 0, S::one());
        for i in 0..grid.steps {
            let (a, c) = (drift.get(m, i), diffusion.get(m, i));
            let shrink = S::one() - a * dt;
            if !(shrink > S::zero()) {
                return Err(SmpError::NonFinite { what: "gamma (1 - a dt <= 0)".into(), path: m, node: i });
            }
            lg += -shrink.ln() - S::lit(0.5) * c * c * dt + c * bundle.db(m, i);
            let g = lg.exp();
            if !g.is_finite() || !(g > S::zero()) {
                return Err(SmpError::NonFinite { what: "gamma".into(), path: m, node: i + 1 });
            }
            gamma.set(m, i + 1, g);
        }
    }
    Ok(GammaProcess { gamma, drift, diffusion })
}

/// `Y-hat`, `Z-hat` with both estimators of `Y-hat(0)`.
#[derive(Clone, Debug)]
pub struct YhatSolution<S: Scalar> {
    pub yhat: ProcessPanel<S>,
    pub zhat: ProcessPanel<S>,
    /// `[delta H + delta sigma^T P delta sigma / 2] I_E`.
    pub forcing: ProcessPanel<S>,
    pub y0_bsde: Estimate,
    pub y0_gamma: Estimate,
}

impl<S: Scalar> YhatSolution<S> {
    /// `|bsde - gamma representation|` against three combined standard errors.
    pub fn agreement(&self) -> (f64, f64) {
        let d = (self.y0_bsde.mean - self.y0_gamma.mean).abs();
        let se = (self.y0_bsde.stderr.powi(2) + self.y0_gamma.stderr.powi(2)).sqrt();
        (d, se)
    }
}

/// Backward solve of the linear `Y-hat` BSDE with driver
/// `a Y-hat + c Z-hat + F I_E` and the representation
/// `Y-hat(0) = E[sum gamma_i F_i dt / (1 - a_i dt)]`.
#[allow(clippy::too_many_arguments)]
pub fn solve_yhat<S: Scalar>(
    spec: &ProblemSpec<S>,
    sol: &FbsdeSolution<S>,
    adj1: &FirstOrderAdjoint<S>,
    adj2: &SecondOrderAdjoint<S>,
    gamma: &GammaProcess<S>,
    spike: &SpikeSpec<S>,
    delta: &DeltaProcess<S>,
    bundle: &BrownianBundle<S>,
    opts: &SolverOpts,
) -> Result<YhatSolution<S>> {
    let grid = bundle.grid();
    let paths = bundle.paths();
    let dt = grid.dt();
    let mut forcing = ProcessPanel::zeros("yhat_forcing", grid, paths, 1);
    for i in spike.window() {
        let rows: Vec<S> = (0..paths)
            .into_par_iter()
            .map(|m| {
                let pt = ref_point(sol, m, i);
                let u = spike.u_at(m, i);
                let d = delta.delta.get(m, i);
                let dv = crate::spike::deltas(spec, &pt, &u, d);
                let (p, q) = (adj1.p.at(m, i), adj1.q.at(m, i));
                let pm = adj2.p.at(m, i);
                dot(p, &dv.db) + dot(q, &dv.ds) + dv.dg + S::lit(0.5) * crate::scalar::quad_form(pm, &dv.ds)
            })
            .collect();
        for (m, f) in rows.into_iter().enumerate() {
            forcing.set(m, i, f);
        }
    }
    forcing.check_finite()?;
    let sweep = backward_sweep(
        bundle,
        &sol.features,
        1,
        &opts.basis,
        ("Yhat", "Zhat"),
        |_, out| {
            out[0] = S::zero();
            Ok(())
        },
        |i, m, a, z, out| {
            let (ga, gc) = (gamma.drift.get(m, i), gamma.diffusion.get(m, i));
            out[0] = (a[0] + (gc * z[0] + forcing.get(m, i)) * dt) / (S::one() - ga * dt);
            Ok(())
        },
    )?;
    let (yhat, zhat) = (sweep.y, sweep.z);
    let dtf = dt.as_f64();
    let pathwise: Vec<(f64, f64)> = (0..paths)
        .into_par_iter()
        .map(|m| {
            let (mut rep, mut bs) = (0.0, 0.0);
            for i in 0..grid.steps {
                let (a, c) = (gamma.drift.get(m, i).as_f64(), gamma.diffusion.get(m, i).as_f64());
                let f = forcing.get(m, i).as_f64();
                rep += gamma.gamma.get(m, i).as_f64() * f * dtf / (1.0 - a * dtf);
                let (y, z) = (yhat.get(m, i).as_f64(), zhat.get(m, i).as_f64());
                bs += (a * y + c * z + f) * dtf - z * bundle.db(m, i).as_f64();
            }
            (rep, bs)
        })
        .collect();
    let rep: Vec<f64> = pathwise.iter().map(|v| v.0).collect();
    let bs: Vec<f64> = pathwise.iter().map(|v| v.1).collect();
    let y0_bsde = Estimate { mean: yhat.node_mean(0, 0), stderr: mean_stderr(&bs).stderr };
    let y0_gamma = mean_stderr(&rep);
    Ok(YhatSolution { yhat, zhat, forcing, y0_bsde, y0_gamma })
}

/// Settings of the adjoint and variation solves.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjointSummary {
    pub margin: f64,
    pub k1_identity_residual: f64,
    pub max_abs_q: f64,
    pub max_asymmetry: f64,
}

pub fn summarize<S: Scalar>(a1: &FirstOrderAdjoint<S>, a2: &SecondOrderAdjoint<S>) -> AdjointSummary {
    AdjointSummary { margin: a1.margin, k1_identity_residual: a1.k1_identity_residual, max_abs_q: a1.max_abs_q, max_asymmetry: a2.max_asymmetry }
}
