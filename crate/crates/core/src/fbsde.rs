//! Forward Euler-Maruyama, least-squares backward solver, Picard iteration
//! for the fully coupled system and the explicit decoupled solver for linear
//! FBSDEs.


use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmpError};
use crate::model::{ControlLaw, Point, ProblemSpec};
use crate::paths::{moment_norm, BrownianBundle, MomentSpec, NormKind, ProcessPanel, TimeGrid};
use crate::regression::{fit_node, BasisSpec, NodeFit};
use crate::scalar::Scalar;
use crate::stats::{mean_stderr, Estimate};

/// Backward-step settings shared by every regression solve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOpts {
    pub basis: BasisSpec,
    /// Cap and tolerance of the implicit fixed point in `Y_i`.
    pub inner_max: usize,
    pub inner_tol: f64,
    /// Invertibility guard on `|1 - <p, sigma_z>|`.
    pub c_min: f64,
}

impl Default for SolverOpts {
    fn default() -> Self {
        Self { basis: BasisSpec::default(), inner_max: 10, inner_tol: 1e-10, c_min: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PicardOpts {
    pub max_sweeps: usize,
    /// Tolerance on `max_i sqrt(mean_m |change of (X, Y, Z)|^2)`.
    pub tol: f64,
    /// Initial relaxation weight of the new forward panel, in `(0, 1]`.
    pub damping: f64,
    pub solver: SolverOpts,
}

impl Default for PicardOpts {
    fn default() -> Self {
        Self { max_sweeps: 50, tol: 1e-6, damping: 1.0, solver: SolverOpts::default() }
    }
}

impl PicardOpts {
    pub fn check(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(SmpError::InvalidInput(format!("damping must lie in (0, 1], got {}", self.damping)));
        }
        if self.max_sweeps == 0 || !(self.tol > 0.0) {
            return Err(SmpError::InvalidInput("picard_max must be positive and picard_tol > 0".into()));
        }
        Ok(())
    }
}

/// Regression features at one node: the state, or `[reference, state - reference]`
/// when the control is open loop along a reference path.
#[inline]
pub(crate) fn feature_row<S: Scalar>(x: &[S], aux: Option<&[S]>, out: &mut Vec<S>) {
    out.clear();
    match aux {
        None => out.extend_from_slice(x),
        Some(r) => {
            out.extend_from_slice(r);
            out.extend(x.iter().zip(r).map(|(a, b)| *a - *b));
        }
    }
}

pub(crate) fn make_features<S: Scalar>(x: &ProcessPanel<S>, aux: Option<&ProcessPanel<S>>) -> ProcessPanel<S> {
    let d = x.dim() * if aux.is_some() { 2 } else { 1 };
    let mut f = ProcessPanel::zeros("features", x.grid(), x.paths(), d);
    let mut row = Vec::with_capacity(d);
    for i in 0..x.grid().nodes() {
        for m in 0..x.paths() {
            feature_row(x.at(m, i), aux.map(|a| a.at(m, i)), &mut row);
            f.at_mut(m, i).copy_from_slice(&row);
        }
    }
    f
}

/// Runs `step(m, row)` for every path of one node in parallel and returns the
/// first error in path order.
pub(crate) fn par_node<S, F>(node: &mut [S], dim: usize, step: F) -> Result<()>
where
    S: Scalar,
    F: Fn(usize, &mut [S]) -> Result<()> + Sync,
{
    let errs: Vec<Result<()>> = node.par_chunks_mut(dim).enumerate().map(|(m, row)| step(m, row)).collect();
    errs.into_iter().collect()
}

/// Like [`par_node`] for two panels at once.
pub(crate) fn par_node2<S, F>(a: &mut [S], da: usize, b: &mut [S], db: usize, step: F) -> Result<()>
where
    S: Scalar,
    F: Fn(usize, &mut [S], &mut [S]) -> Result<()> + Sync,
{
    let errs: Vec<Result<()>> = a
        .par_chunks_mut(da)
        .zip(b.par_chunks_mut(db))
        .enumerate()
        .map(|(m, (ra, rb))| step(m, ra, rb))
        .collect();
    errs.into_iter().collect()
}

/// Backward least-squares sweep for a `dim`-dimensional BSDE.
///
/// At node `i` the targets `Y_{i+1}` are regressed on the features to give the
/// conditional mean `a` and the integrand estimate `z`; `step(i, m, a, z, y)`
/// then turns them into `Y_i` (typically `a + f(Y_i, z) dt`).
pub(crate) struct Sweep<S: Scalar> {
    pub y: ProcessPanel<S>,
    pub z: ProcessPanel<S>,
    pub fits: Vec<NodeFit>,
    pub ridge_nodes: usize,
}

pub(crate) fn backward_sweep<S, T, G>(
    bundle: &BrownianBundle<S>,
    feats: &ProcessPanel<S>,
    dim: usize,
    basis: &BasisSpec,
    label: (&str, &str),
    terminal: T,
    step: G,
) -> Result<Sweep<S>>
where
    S: Scalar,
    T: Fn(usize, &mut [S]) -> Result<()> + Sync,
    G: Fn(usize, usize, &[S], &[S], &mut [S]) -> Result<()> + Sync,
{
    let grid = bundle.grid();
    let paths = bundle.paths();
    let n_steps = grid.steps;
    let mut y = ProcessPanel::zeros(label.0, grid, paths, dim);
    let mut z = ProcessPanel::zeros(label.1, grid, paths, dim);
    par_node(y.node_mut(n_steps), dim, &terminal)?;
    let mut fits = Vec::with_capacity(n_steps);
    let mut ridge_nodes = 0;
    let dt = grid.dt();
    for i in (0..n_steps).rev() {
        let fit = fit_node(feats.node(i), feats.dim(), bundle.step(i), dt, y.node(i + 1), dim, basis);
        ridge_nodes += fit.ridge as usize;
        let fd = feats.dim();
        let fnode = feats.node(i);
        par_node2(y.node_mut(i), dim, z.node_mut(i), dim, |m, yr, zr| {
            let mut a = vec![S::zero(); dim];
            fit.eval(&fnode[m * fd..(m + 1) * fd], &mut a, zr);
            step(i, m, &a, zr, yr)
        })?;
        fits.push(fit);
    }
    fits.reverse();
    // the last node carries the integrand of the last interval
    let w = paths * dim;
    let (head, tail) = z.data_mut().split_at_mut(n_steps * w);
    tail.copy_from_slice(&head[(n_steps - 1) * w..]);
    y.check_finite()?;
    z.check_finite()?;
    Ok(Sweep { y, z, fits, ridge_nodes })
}

/// Implicit driver step `y = a + g(t, x, y, z, u) dt` by fixed-point iteration.
/// Returns the value and whether the tolerance was met.
#[inline]
pub(crate) fn implicit_y<S: Scalar>(spec: &ProblemSpec<S>, pt: Point<S>, a: S, dt: S, opts: &SolverOpts) -> (S, bool) {
    let mut y = a;
    let tol = S::lit(opts.inner_tol);
    for _ in 0..opts.inner_max.max(1) {
        let next = a + spec.g(&Point { y, ..pt }) * dt;
        let done = (next - y).abs() <= tol * (S::one() + next.abs());
        y = next;
        if done {
            return (y, true);
        }
    }
    (y, false)
}

/// Closures giving `(Y_i, Z_i)` as functions of the state during a forward pass.
pub enum Decoupling<'a, S: Scalar> {
    /// Per-node regression fits from a previous backward sweep.
    Fitted { fits: &'a [NodeFit], aux: Option<&'a ProcessPanel<S>>, opts: SolverOpts },
    /// Arbitrary map `(path, node, x) -> (y, z)`.
    Closure(&'a (dyn Fn(usize, usize, &[S]) -> (S, S) + Sync)),
}

impl<S: Scalar> Decoupling<'_, S> {
    fn eval(&self, spec: &ProblemSpec<S>, m: usize, i: usize, t: S, dt: S, x: &[S], u: &[S], row: &mut Vec<S>) -> (S, S) {
        match self {
            Decoupling::Closure(f) => f(m, i, x),
            Decoupling::Fitted { fits, aux, opts } => {
                feature_row(x, aux.map(|a| a.at(m, i)), row);
                let (mut a, mut z) = ([S::zero()], [S::zero()]);
                fits[i].eval(row, &mut a, &mut z);
                let (y, _) = implicit_y(spec, Point::new(t, x, a[0], z[0], u), a[0], dt, opts);
                (y, z[0])
            }
        }
    }
}

/// Euler-Maruyama forward pass `X_{i+1} = X_i + b dt + sigma dB_i`.
pub fn simulate_forward<S: Scalar>(
    spec: &ProblemSpec<S>,
    control: &ControlLaw<S>,
    decoupling: Option<&Decoupling<S>>,
    bundle: &BrownianBundle<S>,
) -> Result<ProcessPanel<S>> {
    spec.check()?;
    if spec.forward_coupled && decoupling.is_none() {
        return Err(SmpError::InvalidInput(format!(
            "'{}' has forward coefficients depending on (y, z); decoupling closures are required",
            spec.name
        )));
    }
    let zero: &(dyn Fn(usize, usize, &[S]) -> (S, S) + Sync) = &|_, _, _| (S::zero(), S::zero());
    let fallback = Decoupling::Closure(zero);
    forward_pass(spec, control, decoupling.unwrap_or(&fallback), bundle)
}

fn forward_pass<S: Scalar>(
    spec: &ProblemSpec<S>,
    control: &ControlLaw<S>,
    dec: &Decoupling<S>,
    bundle: &BrownianBundle<S>,
) -> Result<ProcessPanel<S>> {
    let grid = bundle.grid();
    let (n, k, paths, steps) = (spec.n, spec.k, bundle.paths(), grid.steps);
    let dt = grid.dt();
    let per_path: Vec<std::result::Result<Vec<S>, usize>> = (0..paths)
        .into_par_iter()
        .map(|m| {
            let mut xs = vec![S::zero(); grid.nodes() * n];
            xs[..n].copy_from_slice(&spec.x0);
            let mut u = vec![S::zero(); k];
            let mut bv = vec![S::zero(); n];
            let mut sv = vec![S::zero(); n];
            let mut row = Vec::new();
            for i in 0..steps {
                let t = grid.t(i);
                let (cur, next) = xs.split_at_mut((i + 1) * n);
                let x = &cur[i * n..];
                control.eval(m, i, t, x, &mut u);
                let (y, z) = dec.eval(spec, m, i, t, dt, x, &u, &mut row);
                let pt = Point::new(t, x, y, z, &u);
                spec.b(&pt, &mut bv);
                spec.sigma(&pt, &mut sv);
                let db = bundle.db(m, i);
                for j in 0..n {
                    let v = x[j] + bv[j] * dt + sv[j] * db;
                    if !v.is_finite() {
                        return Err(i + 1);
                    }
                    next[j] = v;
                }
            }
            Ok(xs)
        })
        .collect();
    let mut out = ProcessPanel::zeros("X", grid, paths, n);
    for (m, res) in per_path.into_iter().enumerate() {
        match res {
            Ok(xs) => {
                for i in 0..grid.nodes() {
                    out.at_mut(m, i).copy_from_slice(&xs[i * n..(i + 1) * n]);
                }
            }
            Err(node) => return Err(SmpError::NonFinite { what: "forward state".into(), path: m, node }),
        }
    }
    Ok(out)
}

/// Output of a backward regression solve.
#[derive(Clone, Debug)]
pub struct BsdeSolution<S: Scalar> {
    pub y: ProcessPanel<S>,
    pub z: ProcessPanel<S>,
    pub ridge_nodes: usize,
    /// Path-node pairs whose implicit step hit the iteration cap.
    pub inner_unconverged: usize,
    pub(crate) fits: Vec<NodeFit>,
}

pub(crate) fn backward_fbsde<S: Scalar>(
    spec: &ProblemSpec<S>,
    u: &ProcessPanel<S>,
    x: &ProcessPanel<S>,
    feats: &ProcessPanel<S>,
    bundle: &BrownianBundle<S>,
    opts: &SolverOpts,
) -> Result<BsdeSolution<S>> {
    let grid = bundle.grid();
    let dt = grid.dt();
    let missed = std::sync::atomic::AtomicUsize::new(0);
    let sweep = backward_sweep(
        bundle,
        feats,
        1,
        &opts.basis,
        ("Y", "Z"),
        |m, out| {
            out[0] = spec.phi(x.at(m, grid.steps));
            Ok(())
        },
        |i, m, a, z, out| {
            let pt = Point::new(grid.t(i), x.at(m, i), a[0], z[0], u.at(m, i));
            let (y, ok) = implicit_y(spec, pt, a[0], dt, opts);
            if !ok {
                missed.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            }
            if !y.is_finite() {
                return Err(SmpError::NonFinite { what: "Y".into(), path: m, node: i });
            }
            out[0] = y;
            Ok(())
        },
    )?;
    Ok(BsdeSolution {
        y: sweep.y,
        z: sweep.z,
        ridge_nodes: sweep.ridge_nodes,
        inner_unconverged: missed.into_inner(),
        fits: sweep.fits,
    })
}

/// Backward regression solve of `dY = -g dt + Z dB`, `Y_N = phi(X_N)` along a
/// given forward panel.
pub fn solve_bsde_regression<S: Scalar>(
    spec: &ProblemSpec<S>,
    control: &ControlLaw<S>,
    x: &ProcessPanel<S>,
    bundle: &BrownianBundle<S>,
    opts: &SolverOpts,
) -> Result<BsdeSolution<S>> {
    let u = control.tabulate(x, spec.k);
    backward_fbsde(spec, &u, x, x, bundle, opts)
}

/// Solution of the coupled system with its convergence record.
#[derive(Clone, Debug)]
pub struct FbsdeSolution<S: Scalar> {
    pub x: ProcessPanel<S>,
    pub y: ProcessPanel<S>,
    pub z: ProcessPanel<S>,
    /// Control values along `x`.
    pub u: ProcessPanel<S>,
    /// Regression features used by every backward solve on this trajectory.
    pub features: ProcessPanel<S>,
    pub aux: Option<ProcessPanel<S>>,
    pub trace: Vec<f64>,
    pub damping_engaged: bool,
    pub ridge_nodes: usize,
    pub inner_unconverged: usize,
    pub opts: PicardOpts,
}

impl<S: Scalar> FbsdeSolution<S> {
    /// `J(u) = Y(0)`.
    pub fn y0(&self) -> f64 {
        self.y.node_mean(0, 0)
    }

    pub fn sweeps(&self) -> usize {
        self.trace.len()
    }

    /// `Y(0)` with the standard error of the pathwise representation
    /// `phi(X_N) + sum g dt - sum Z dB`.
    pub fn y0_estimate(&self, spec: &ProblemSpec<S>, bundle: &BrownianBundle<S>) -> Estimate {
        let grid = bundle.grid();
        let dt = grid.dt().as_f64();
        let vals: Vec<f64> = (0..bundle.paths())
            .into_par_iter()
            .map(|m| {
                let mut v = spec.phi(self.x.at(m, grid.steps)).as_f64();
                for i in 0..grid.steps {
                    let pt = Point::new(grid.t(i), self.x.at(m, i), self.y.get(m, i), self.z.get(m, i), self.u.at(m, i));
                    v += spec.g(&pt).as_f64() * dt - self.z.get(m, i).as_f64() * bundle.db(m, i).as_f64();
                }
                v
            })
            .collect();
        Estimate { mean: self.y0(), stderr: mean_stderr(&vals).stderr }
    }
}

impl<S: Scalar> FbsdeSolution<S> {
    /// Plain Monte Carlo estimate of `E[phi(X_N) + sum g dt]`. Its standard
    /// error is the sampling error of the regression value `Y(0)`, which
    /// differs from this mean only by projection residuals; the martingale
    /// corrected error of [`Self::y0_estimate`] is much smaller than that.
    pub fn cost_estimate(&self, spec: &ProblemSpec<S>, bundle: &BrownianBundle<S>) -> Estimate {
        let grid = bundle.grid();
        let dt = grid.dt().as_f64();
        let vals: Vec<f64> = (0..bundle.paths())
            .into_par_iter()
            .map(|m| {
                let mut v = spec.phi(self.x.at(m, grid.steps)).as_f64();
                for i in 0..grid.steps {
                    let pt = Point::new(grid.t(i), self.x.at(m, i), self.y.get(m, i), self.z.get(m, i), self.u.at(m, i));
                    v += spec.g(&pt).as_f64() * dt;
                }
                v
            })
            .collect();
        mean_stderr(&vals)
    }
}

fn sweep_change<S: Scalar>(prev: Option<(&ProcessPanel<S>, &ProcessPanel<S>, &ProcessPanel<S>)>, x: &ProcessPanel<S>, y: &ProcessPanel<S>, z: &ProcessPanel<S>) -> f64 {
    let nodes = x.grid().nodes();
    let paths = x.paths();
    (0..nodes)
        .map(|i| {
            let mut acc = 0.0;
            for m in 0..paths {
                let sq = |a: &ProcessPanel<S>, b: Option<&ProcessPanel<S>>| -> f64 {
                    a.at(m, i)
                        .iter()
                        .enumerate()
                        .map(|(d, v)| (v.as_f64() - b.map_or(0.0, |b| b.at(m, i)[d].as_f64())).powi(2))
                        .sum()
                };
                acc += sq(x, prev.map(|p| p.0)) + sq(y, prev.map(|p| p.1)) + sq(z, prev.map(|p| p.2));
            }
            (acc / paths as f64).sqrt()
        })
        .fold(0.0, f64::max)
}

/// Picard iteration: forward pass with the latest `(Y, Z)` regressions as
/// closures, backward regression solve, repeat until the sup-node RMS change
/// of `(X, Y, Z)` drops below the tolerance.
///
/// When a sweep increases the change, the relaxation weight is halved (down to
/// 1/64) and the solution is flagged as damped.
pub fn solve_coupled_picard<S: Scalar>(
    spec: &ProblemSpec<S>,
    control: &ControlLaw<S>,
    bundle: &BrownianBundle<S>,
    opts: &PicardOpts,
) -> Result<FbsdeSolution<S>> {
    solve_coupled_picard_with(spec, control, None, bundle, opts)
}

/// As [`solve_coupled_picard`], with an optional reference path whose values
/// join the regression features (used for open-loop controls tabulated along
/// that reference).
pub fn solve_coupled_picard_with<S: Scalar>(
    spec: &ProblemSpec<S>,
    control: &ControlLaw<S>,
    aux: Option<&ProcessPanel<S>>,
    bundle: &BrownianBundle<S>,
    opts: &PicardOpts,
) -> Result<FbsdeSolution<S>> {
    spec.check()?;
    opts.check()?;
    let mut theta = S::lit(opts.damping);
    let mut damped = false;
    let mut trace = Vec::new();
    let mut prev: Option<(ProcessPanel<S>, ProcessPanel<S>, ProcessPanel<S>)> = None;
    let mut fits: Option<Vec<NodeFit>> = None;
    let zero: &(dyn Fn(usize, usize, &[S]) -> (S, S) + Sync) = &|_, _, _| (S::zero(), S::zero());
    for sweep in 1..=opts.max_sweeps {
        let dec = match &fits {
            Some(f) => Decoupling::Fitted { fits: f, aux, opts: opts.solver },
            None => Decoupling::Closure(zero),
        };
        let mut x = forward_pass(spec, control, &dec, bundle)?;
        if let Some((px, _, _)) = &prev {
            if theta < S::one() {
                let one_minus = S::one() - theta;
                for (v, p) in x.data_mut().iter_mut().zip(px.data()) {
                    *v = theta * *v + one_minus * *p;
                }
            }
        }
        let u = control.tabulate(&x, spec.k);
        let feats = make_features(&x, aux);
        let bs = backward_fbsde(spec, &u, &x, &feats, bundle, &opts.solver)?;
        let change = sweep_change(prev.as_ref().map(|p| (&p.0, &p.1, &p.2)), &x, &bs.y, &bs.z);
        let worse = trace.last().is_some_and(|last| change > *last);
        trace.push(change);
        if change < opts.tol || (sweep > 1 && !spec.forward_coupled && change == 0.0) {
            return Ok(FbsdeSolution {
                x,
                y: bs.y,
                z: bs.z,
                u,
                features: feats,
                aux: aux.cloned(),
                trace,
                damping_engaged: damped,
                ridge_nodes: bs.ridge_nodes,
                inner_unconverged: bs.inner_unconverged,
                opts: *opts,
            });
        }
        if worse && sweep > 2 {
            theta = (theta * S::lit(0.5)).max(S::lit(1.0 / 64.0));
            damped = true;
        }
        prev = Some((x, bs.y, bs.z));
        fits = Some(bs.fits);
    }
    let shown: Vec<String> = trace.iter().map(|r| format!("{r:.3e}")).collect();
    Err(SmpError::NoConvergence {
        what: "Picard iteration".into(),
        detail: format!("{} sweeps, residual trace [{}]", opts.max_sweeps, shown.join(", ")),
    })
}

/// Self-convergence of a coarse solve against a fine-grid reference on the
/// same Brownian paths.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RefinementReport {
    pub fine_steps: usize,
    pub coarse_steps: usize,
    /// `max_i mean_m |coarse - fine|` over the shared nodes, divided by
    /// `max_i mean_m |fine|`, for `X`, `Y`, `Z`.
    pub rel_sup_error: [f64; 3],
    pub y0_fine: f64,
    pub y0_coarse: f64,
}

pub fn fine_grid_comparison<S: Scalar>(
    spec: &ProblemSpec<S>,
    control: &ControlLaw<S>,
    fine: &BrownianBundle<S>,
    factor: usize,
    opts: &PicardOpts,
) -> Result<RefinementReport> {
    let coarse = fine.coarsen(factor)?;
    let f = solve_coupled_picard(spec, control, fine, opts)?;
    let c = solve_coupled_picard(spec, control, &coarse, opts)?;
    let rel = |a: &ProcessPanel<S>, b: &ProcessPanel<S>| {
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for i in 0..coarse.grid().nodes() {
            let (mut e, mut s) = (0.0, 0.0);
            for m in 0..fine.paths() {
                let d: Vec<S> = a.at(m, i).iter().zip(b.at(m, i * factor)).map(|(p, q)| *p - *q).collect();
                e += crate::scalar::norm(&d).as_f64();
                s += b.abs_at(m, i * factor).as_f64();
            }
            num = num.max(e / fine.paths() as f64);
            den = den.max(s / fine.paths() as f64);
        }
        if den > 0.0 {
            num / den
        } else {
            num
        }
    };
    Ok(RefinementReport {
        fine_steps: fine.grid().steps,
        coarse_steps: coarse.grid().steps,
        rel_sup_error: [rel(&c.x, &f.x), rel(&c.y, &f.y), rel(&c.z, &f.z)],
        y0_fine: f.y0(),
        y0_coarse: c.y0(),
    })
}

/// Coefficients and data of the linear FBSDE
///
/// ```text
/// dX = (a1 X + b1 Y + c1 Z + L1) dt + (a2 X + b2 Y + c2 Z + L2) dB
/// dY = -(<a3, X> + b3 Y + c3 Z + L3) dt + Z dB
/// X(0) = x0, Y(T) = <kappa, X(T)> + varsigma
/// ```
///
/// with `a1`, `a2` stored row-major `n x n`, `kappa` and `varsigma` given per
/// path (`F_T`-measurable).
#[derive(Clone, Debug)]
pub struct LinearFbsdeSpec<S: Scalar> {
    pub n: usize,
    pub x0: Vec<S>,
    pub alpha1: ProcessPanel<S>,
    pub alpha2: ProcessPanel<S>,
    pub alpha3: ProcessPanel<S>,
    pub beta1: ProcessPanel<S>,
    pub beta2: ProcessPanel<S>,
    pub beta3: ProcessPanel<S>,
    pub gamma1: ProcessPanel<S>,
    pub gamma2: ProcessPanel<S>,
    pub gamma3: ProcessPanel<S>,
    pub l1: ProcessPanel<S>,
    pub l2: ProcessPanel<S>,
    pub l3: ProcessPanel<S>,
    pub kappa: Vec<S>,
    pub varsigma: Vec<S>,
    /// Markov state for the regressions; the Brownian path when `None`.
    pub features: Option<ProcessPanel<S>>,
}

/// Deterministic constant coefficients for building a [`LinearFbsdeSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearCoefficients {
    pub alpha1: Vec<f64>,
    pub alpha2: Vec<f64>,
    pub alpha3: Vec<f64>,
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
    pub beta3: f64,
    pub gamma1: Vec<f64>,
    pub gamma2: Vec<f64>,
    pub gamma3: f64,
    pub kappa: Vec<f64>,
}

/// Constant forcings and initial/terminal data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearForcing {
    pub x0: Vec<f64>,
    pub l1: Vec<f64>,
    pub l2: Vec<f64>,
    pub l3: f64,
    pub varsigma: f64,
}

impl LinearForcing {
    pub fn zero(n: usize) -> Self {
        Self { x0: vec![0.0; n], l1: vec![0.0; n], l2: vec![0.0; n], l3: 0.0, varsigma: 0.0 }
    }

    pub fn scaled(&self, k: f64) -> Self {
        let s = |v: &Vec<f64>| v.iter().map(|a| a * k).collect();
        Self { x0: s(&self.x0), l1: s(&self.l1), l2: s(&self.l2), l3: self.l3 * k, varsigma: self.varsigma * k }
    }

    pub fn plus(&self, o: &Self) -> Self {
        let s = |a: &Vec<f64>, b: &Vec<f64>| a.iter().zip(b).map(|(x, y)| x + y).collect();
        Self {
            x0: s(&self.x0, &o.x0),
            l1: s(&self.l1, &o.l1),
            l2: s(&self.l2, &o.l2),
            l3: self.l3 + o.l3,
            varsigma: self.varsigma + o.varsigma,
        }
    }
}

impl<S: Scalar> LinearFbsdeSpec<S> {
    pub fn constant(grid: TimeGrid<S>, paths: usize, c: &LinearCoefficients, f: &LinearForcing) -> Result<Self> {
        let n = f.x0.len();
        let check = |v: &[f64], len: usize, what: &str| {
            if v.len() == len {
                Ok(())
            } else {
                Err(SmpError::InvalidInput(format!("{what} has length {}, expected {len}", v.len())))
            }
        };
        check(&c.alpha1, n * n, "alpha1")?;
        check(&c.alpha2, n * n, "alpha2")?;
        for (v, w) in [(&c.alpha3, "alpha3"), (&c.beta1, "beta1"), (&c.beta2, "beta2"), (&c.gamma1, "gamma1"), (&c.gamma2, "gamma2"), (&c.kappa, "kappa"), (&f.l1, "L1"), (&f.l2, "L2")] {
            check(v, n, w)?;
        }
        let lit = |v: &[f64]| v.iter().map(|a| S::lit(*a)).collect::<Vec<S>>();
        let pan = |label: &str, v: &[f64]| ProcessPanel::constant(label, grid, paths, &lit(v));
        Ok(Self {
            n,
            x0: lit(&f.x0),
            alpha1: pan("alpha1", &c.alpha1),
            alpha2: pan("alpha2", &c.alpha2),
            alpha3: pan("alpha3", &c.alpha3),
            beta1: pan("beta1", &c.beta1),
            beta2: pan("beta2", &c.beta2),
            beta3: pan("beta3", &[c.beta3]),
            gamma1: pan("gamma1", &c.gamma1),
            gamma2: pan("gamma2", &c.gamma2),
            gamma3: pan("gamma3", &[c.gamma3]),
            l1: pan("L1", &f.l1),
            l2: pan("L2", &f.l2),
            l3: pan("L3", &[f.l3]),
            kappa: (0..paths).flat_map(|_| lit(&c.kappa)).collect(),
            varsigma: vec![S::lit(f.varsigma); paths],
            features: None,
        })
    }

    /// Largest absolute coefficient value, recorded as the boundedness check.
    pub fn max_abs_coefficient(&self) -> f64 {
        [&self.alpha1, &self.alpha2, &self.alpha3, &self.beta1, &self.beta2, &self.beta3, &self.gamma1, &self.gamma2, &self.gamma3]
            .iter()
            .flat_map(|p| p.data().iter())
            .fold(0.0, |a, v| a.max(v.as_f64().abs()))
    }
}

/// Decoupling field `Y = <p, X> + varphi` of a linear FBSDE.
#[derive(Clone, Debug)]
pub struct DecouplingData<S: Scalar> {
    pub p: ProcessPanel<S>,
    pub q: ProcessPanel<S>,
    pub varphi: ProcessPanel<S>,
    pub nu: ProcessPanel<S>,
    pub k1: ProcessPanel<S>,
    /// `min |1 - <p, gamma2>|` over the panel.
    pub margin: f64,
    pub ridge_nodes: usize,
}

struct LinNode<'a, S: Scalar> {
    s: &'a LinearFbsdeSpec<S>,
    m: usize,
    i: usize,
}

impl<S: Scalar> LinNode<'_, S> {
    fn v<'b>(&'b self, p: &'b ProcessPanel<S>) -> &'b [S] {
        p.at(self.m, self.i)
    }
}

/// `K1 = (1 - <p, gamma2>)^{-1} (a2^T p + <p, b2> p + q)`; returns the
/// inverse factor as well.
fn linear_k1<S: Scalar>(c: &LinNode<S>, p: &[S], q: &[S], k1: &mut [S]) -> S {
    let n = c.s.n;
    let a2 = c.v(&c.s.alpha2);
    let pb2 = crate::scalar::dot(p, c.v(&c.s.beta2));
    let inv = S::one() / (S::one() - crate::scalar::dot(p, c.v(&c.s.gamma2)));
    for j in 0..n {
        let mut acc = S::zero();
        for r in 0..n {
            acc += a2[r * n + j] * p[r];
        }
        k1[j] = inv * (acc + pb2 * p[j] + q[j]);
    }
    inv
}

/// Generator `A(t)` of the `p` equation.
fn linear_a<S: Scalar>(c: &LinNode<S>, p: &[S], q: &[S], out: &mut [S]) {
    let n = c.s.n;
    let mut k1 = vec![S::zero(); n];
    linear_k1(c, p, q, &mut k1);
    let (a1, a2, a3) = (c.v(&c.s.alpha1), c.v(&c.s.alpha2), c.v(&c.s.alpha3));
    let b3 = c.v(&c.s.beta3)[0];
    let c3 = c.v(&c.s.gamma3)[0];
    let pb1 = crate::scalar::dot(p, c.v(&c.s.beta1));
    let pc1 = crate::scalar::dot(p, c.v(&c.s.gamma1));
    let qb2 = crate::scalar::dot(q, c.v(&c.s.beta2));
    let qc2 = crate::scalar::dot(q, c.v(&c.s.gamma2));
    for j in 0..n {
        let mut a1p = S::zero();
        let mut a2q = S::zero();
        for r in 0..n {
            a1p += a1[r * n + j] * p[r];
            a2q += a2[r * n + j] * q[r];
        }
        out[j] = a3[j] + b3 * p[j] + c3 * k1[j] + a1p + pb1 * p[j] + pc1 * k1[j] + a2q + qb2 * p[j] + qc2 * k1[j];
    }
}

/// Solves the `(p, q)` and `(varphi, nu)` BSDEs by backward regression.
///
/// The `varphi` step is affine in `varphi_i`, so the implicit step is solved
/// in closed form and the result stays exactly linear in the forcings.
pub fn decouple_linear<S: Scalar>(spec: &LinearFbsdeSpec<S>, bundle: &BrownianBundle<S>, opts: &SolverOpts) -> Result<DecouplingData<S>> {
    let n = spec.n;
    let grid = bundle.grid();
    let dt = grid.dt();
    let path_panel;
    let feats = match &spec.features {
        Some(f) => f,
        None => {
            path_panel = bundle.path_panel();
            &path_panel
        }
    };
    let pq = backward_sweep(
        bundle,
        feats,
        n,
        &opts.basis,
        ("p", "q"),
        |m, out| {
            out.copy_from_slice(&spec.kappa[m * n..(m + 1) * n]);
            Ok(())
        },
        |i, m, a, q, out| {
            let c = LinNode { s: spec, m, i };
            let mut p = a.to_vec();
            let mut gen = vec![S::zero(); n];
            let tol = S::lit(1e-12);
            for _ in 0..20 {
                linear_a(&c, &p, q, &mut gen);
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
            out.copy_from_slice(&p);
            Ok(())
        },
    )?;
    let (p, q) = (pq.y, pq.z);
    let mut k1 = ProcessPanel::zeros("K1", grid, bundle.paths(), n);
    let mut margin = f64::INFINITY;
    for i in 0..grid.nodes() {
        for m in 0..bundle.paths() {
            let c = LinNode { s: spec, m, i };
            let inv = linear_k1(&c, p.at(m, i), q.at(m, i), k1.at_mut(m, i));
            margin = margin.min(1.0 / inv.as_f64().abs());
        }
    }
    if margin < opts.c_min {
        return Err(SmpError::Invertibility { margin, c_min: opts.c_min, path: 0, node: 0 });
    }
    let phi = backward_sweep(
        bundle,
        feats,
        1,
        &opts.basis,
        ("varphi", "nu"),
        |m, out| {
            out[0] = spec.varsigma[m];
            Ok(())
        },
        |i, m, a, nu, out| {
            let c = LinNode { s: spec, m, i };
            let (pv, qv) = (p.at(m, i), q.at(m, i));
            let inv = S::one() / (S::one() - crate::scalar::dot(pv, c.v(&spec.gamma2)));
            let pb2 = crate::scalar::dot(pv, c.v(&spec.beta2));
            let pl2 = crate::scalar::dot(pv, c.v(&spec.l2));
            let b3 = c.v(&spec.beta3)[0];
            let c3 = c.v(&spec.gamma3)[0];
            let l3 = c.v(&spec.l3)[0];
            let (pb1, pc1, pl1) = (
                crate::scalar::dot(pv, c.v(&spec.beta1)),
                crate::scalar::dot(pv, c.v(&spec.gamma1)),
                crate::scalar::dot(pv, c.v(&spec.l1)),
            );
            let (qb2, qc2, ql2) = (
                crate::scalar::dot(qv, c.v(&spec.beta2)),
                crate::scalar::dot(qv, c.v(&spec.gamma2)),
                crate::scalar::dot(qv, c.v(&spec.l2)),
            );
            // C = slope * varphi + offset, with w = inv (pb2 varphi + pl2 + nu)
            let slope = b3 + c3 * inv * pb2 + pb1 + pc1 * inv * pb2 + qb2 + qc2 * inv * pb2;
            let w0 = inv * (pl2 + nu[0]);
            let offset = c3 * w0 + l3 + pc1 * w0 + pl1 + qc2 * w0 + ql2;
            out[0] = (a[0] + offset * dt) / (S::one() - slope * dt);
            Ok(())
        },
    )?;
    Ok(DecouplingData {
        p,
        q,
        varphi: phi.y,
        nu: phi.z,
        k1,
        margin,
        ridge_nodes: pq.ridge_nodes + phi.ridge_nodes,
    })
}

#[derive(Clone, Debug)]
pub struct LinearSolution<S: Scalar> {
    pub x: ProcessPanel<S>,
    pub y: ProcessPanel<S>,
    pub z: ProcessPanel<S>,
}

/// Euler simulation of the decoupled forward equation and recovery of
/// `Y = <p, X> + varphi`, `Z = <K1, X> + (1 - <p, gamma2>)^{-1}(<p, b2> varphi + <p, L2> + nu)`.
pub fn solve_linear_fbsde<S: Scalar>(
    spec: &LinearFbsdeSpec<S>,
    bundle: &BrownianBundle<S>,
    dec: &DecouplingData<S>,
    c_min: f64,
) -> Result<LinearSolution<S>> {
    if dec.margin < c_min {
        return Err(SmpError::Invertibility { margin: dec.margin, c_min, path: 0, node: 0 });
    }
    let n = spec.n;
    let grid = bundle.grid();
    let dt = grid.dt();
    let paths = bundle.paths();
    let mut x = ProcessPanel::zeros("X~", grid, paths, n);
    let mut y = ProcessPanel::zeros("Y~", grid, paths, 1);
    let mut z = ProcessPanel::zeros("Z~", grid, paths, 1);
    for m in 0..paths {
        x.at_mut(m, 0).copy_from_slice(&spec.x0);
    }
    let mut drift = vec![S::zero(); n];
    let mut diff = vec![S::zero(); n];
    for i in 0..grid.nodes() {
        for m in 0..paths {
            let c = LinNode { s: spec, m, i };
            let (p, k1) = (dec.p.at(m, i), dec.k1.at(m, i));
            let xv = x.at(m, i).to_vec();
            let phi = dec.varphi.get(m, i);
            let inv = S::one() / (S::one() - crate::scalar::dot(p, c.v(&spec.gamma2)));
            let w = inv * (crate::scalar::dot(p, c.v(&spec.beta2)) * phi + crate::scalar::dot(p, c.v(&spec.l2)) + dec.nu.get(m, i));
            let yv = crate::scalar::dot(p, &xv) + phi;
            let zv = crate::scalar::dot(k1, &xv) + w;
            y.set(m, i, yv);
            z.set(m, i, zv);
            if i == grid.steps {
                continue;
            }
            let (a1, a2) = (c.v(&spec.alpha1), c.v(&spec.alpha2));
            let (b1, b2, c1, c2, l1, l2) = (c.v(&spec.beta1), c.v(&spec.beta2), c.v(&spec.gamma1), c.v(&spec.gamma2), c.v(&spec.l1), c.v(&spec.l2));
            for r in 0..n {
                let ax1 = crate::scalar::dot(&a1[r * n..(r + 1) * n], &xv);
                let ax2 = crate::scalar::dot(&a2[r * n..(r + 1) * n], &xv);
                drift[r] = ax1 + b1[r] * yv + c1[r] * zv + l1[r];
                diff[r] = ax2 + b2[r] * yv + c2[r] * zv + l2[r];
            }
            let db = bundle.db(m, i);
            let next: Vec<S> = (0..n).map(|r| xv[r] + drift[r] * dt + diff[r] * db).collect();
            x.at_mut(m, i + 1).copy_from_slice(&next);
        }
    }
    x.check_finite()?;
    y.check_finite()?;
    z.check_finite()?;
    Ok(LinearSolution { x, y, z })
}

/// Monte Carlo sides of the `L^beta` a priori estimate of a linear FBSDE.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub beta: f64,
    pub lhs: f64,
    pub rhs: f64,
    /// `lhs / rhs`, defined as 0 when both vanish.
    pub ratio: f64,
}

/// `E[sup (|X|^b + |Y|^b)] + E[(int |Z|^2)^{b/2}]` against
/// `E[|x0|^b + |varsigma|^b + (int |L1| + |L3|)^b + (int |L2|^2)^{b/2}]`.
pub fn check_lbeta_estimate<S: Scalar>(sol: &LinearSolution<S>, spec: &LinearFbsdeSpec<S>, beta: MomentSpec) -> EstimateReport {
    let b = beta.beta;
    let grid = sol.x.grid();
    let paths = sol.x.paths();
    let dt = grid.dt().as_f64();
    let sup_xy: f64 = (0..paths)
        .map(|m| {
            (0..grid.nodes())
                .map(|i| sol.x.abs_at(m, i).as_f64().powf(b) + sol.y.abs_at(m, i).as_f64().powf(b))
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / paths as f64;
    let z_int = moment_norm(&sol.z, MomentSpec { beta: b, kind: NormKind::Int2 }).mean;
    let lhs = sup_xy + z_int;
    let x0 = crate::scalar::norm(&spec.x0).as_f64().powf(b);
    let vs = spec.varsigma.iter().map(|v| v.as_f64().abs().powf(b)).sum::<f64>() / paths as f64;
    let l13 = (0..paths)
        .map(|m| {
            (0..grid.steps)
                .map(|i| (spec.l1.abs_at(m, i) + spec.l3.abs_at(m, i)).as_f64() * dt)
                .sum::<f64>()
                .powf(b)
        })
        .sum::<f64>()
        / paths as f64;
    let l2 = moment_norm(&spec.l2, MomentSpec { beta: b, kind: NormKind::Int2 }).mean;
    let rhs = x0 + vs + l13 + l2;
    let ratio = if lhs == 0.0 && rhs == 0.0 { 0.0 } else { lhs / rhs };
    EstimateReport { beta: b, lhs, rhs, ratio }
}

/// Spread of the estimate ratio over random constant forcings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub beta: f64,
    pub ratios: Vec<f64>,
    /// `max / min` over the draws.
    pub spread: f64,
}

/// Redraws `(x0, L1, L2, L3, varsigma)` `draws` times, each entry uniform in
/// `[0.5, 1.5]`, and records the ratio
/// `lhs / rhs` of [`check_lbeta_estimate`] under one Brownian bundle.
pub fn estimate_stability<S: Scalar>(
    coeffs: &LinearCoefficients,
    bundle: &BrownianBundle<S>,
    draws: usize,
    seed: u64,
    beta: MomentSpec,
    opts: &SolverOpts,
) -> Result<StabilityReport> {
    use rand::{Rng, SeedableRng};
    let n = coeffs.kappa.len();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 { rng.random_range(0.5..1.5) };
    let mut ratios = Vec::with_capacity(draws);
    for _ in 0..draws {
        let f = LinearForcing {
            x0: (0..n).map(|_| draw(&mut rng)).collect(),
            l1: (0..n).map(|_| draw(&mut rng)).collect(),
            l2: (0..n).map(|_| draw(&mut rng)).collect(),
            l3: draw(&mut rng),
            varsigma: draw(&mut rng),
        };
        let spec = LinearFbsdeSpec::constant(bundle.grid(), bundle.paths(), coeffs, &f)?;
        let dec = decouple_linear(&spec, bundle, opts)?;
        let sol = solve_linear_fbsde(&spec, bundle, &dec, opts.c_min)?;
        ratios.push(check_lbeta_estimate(&sol, &spec, beta).ratio);
    }
    let hi = ratios.iter().cloned().fold(f64::MIN, f64::max);
    let lo = ratios.iter().cloned().fold(f64::MAX, f64::min);
    Ok(StabilityReport { beta: beta.beta, ratios, spread: hi / lo })
}
