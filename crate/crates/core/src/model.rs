//! Control problems: coefficient evaluators with their partials, control
//! sets and laws, spec validation, and the analytic benchmark problems.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmpError};
use crate::paths::{ProcessPanel, SeedSpec, TimeGrid};
use crate::scalar::Scalar;

/// Evaluation point `(t, x, y, z, u)` of the coefficients.
#[derive(Clone, Copy, Debug)]
pub struct Point<'a, S> {
    pub t: S,
    pub x: &'a [S],
    pub y: S,
    pub z: S,
    pub u: &'a [S],
}

impl<'a, S: Scalar> Point<'a, S> {
    pub fn new(t: S, x: &'a [S], y: S, z: S, u: &'a [S]) -> Self {
        Self { t, x, y, z, u }
    }

    pub fn with_z(self, z: S) -> Self {
        Self { z, ..self }
    }

    pub fn with_u(self, u: &'a [S]) -> Self {
        Self { u, ..self }
    }
}

impl<S: Scalar> fmt::Display for Point<'_, S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t={}, x={:?}, y={}, z={}, u={:?}", self.t, self.x, self.y, self.z, self.u)
    }
}

/// Vector-valued evaluator writing into `out`.
pub type VecFn<S> = Arc<dyn Fn(&Point<S>, &mut [S]) + Send + Sync>;
pub type ScalarFn<S> = Arc<dyn Fn(&Point<S>) -> S + Send + Sync>;
pub type TerminalFn<S> = Arc<dyn Fn(&[S]) -> S + Send + Sync>;
pub type TerminalVecFn<S> = Arc<dyn Fn(&[S], &mut [S]) + Send + Sync>;
pub type FeedbackFn<S> = Arc<dyn Fn(S, &[S], &mut [S]) + Send + Sync>;

/// Structure of the diffusion coefficient.
#[derive(Clone)]
pub enum SigmaForm<S> {
    General,
    /// `sigma(t, x, y, z, u) = A(t) z + sigma1(t, x, y, u)`; `sigma1` ignores `z`.
    LinearInZ { a: Arc<dyn Fn(S, &mut [S]) + Send + Sync>, sigma1: VecFn<S> },
}

impl<S> fmt::Debug for SigmaForm<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SigmaForm::General => write!(f, "General"),
            SigmaForm::LinearInZ { .. } => write!(f, "LinearInZ"),
        }
    }
}

/// Admissible control values `U`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ControlSet<S> {
    Finite(Vec<Vec<S>>),
    /// Axis-aligned box sampled with `per_axis` points along every axis.
    Box { lo: Vec<S>, hi: Vec<S>, per_axis: usize },
    /// All of `R^k`, checked on a user-declared grid.
    Whole { grid: Vec<Vec<S>> },
}

impl<S: Scalar> ControlSet<S> {
    /// Uniform grid `lo, lo + step, ..., hi` on the real line.
    pub fn real_line_grid(lo: f64, hi: f64, step: f64) -> Self {
        let count = ((hi - lo) / step).round() as usize;
        let grid = (0..=count).map(|j| vec![S::lit(lo + step * j as f64)]).collect();
        ControlSet::Whole { grid }
    }

    /// Points on which the minimum condition is sampled.
    pub fn candidates(&self) -> Vec<Vec<S>> {
        match self {
            ControlSet::Finite(pts) => pts.clone(),
            ControlSet::Whole { grid } => grid.clone(),
            ControlSet::Box { lo, hi, per_axis } => {
                let k = lo.len();
                let per = (*per_axis).max(1);
                let total = per.pow(k as u32);
                (0..total)
                    .map(|mut idx| {
                        (0..k)
                            .map(|a| {
                                let j = idx % per;
                                idx /= per;
                                if per == 1 {
                                    (lo[a] + hi[a]) * S::lit(0.5)
                                } else {
                                    lo[a] + (hi[a] - lo[a]) * S::lit(j as f64 / (per - 1) as f64)
                                }
                            })
                            .collect()
                    })
                    .collect()
            }
        }
    }

    pub fn is_continuous(&self) -> bool {
        !matches!(self, ControlSet::Finite(_))
    }

    /// Spacing of the sampling grid along axis `a`, used to size refinement steps.
    pub fn spacing(&self, a: usize) -> S {
        let c = self.candidates();
        let mut vals: Vec<f64> = c.iter().map(|u| u[a].as_f64()).collect();
        vals.sort_by(|x, y| x.partial_cmp(y).unwrap());
        vals.dedup();
        let gap = vals.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        S::lit(if gap.is_finite() { gap } else { 0.0 })
    }

    /// Projects `u` onto the set for continuous sets; finite sets are left alone.
    pub fn clamp(&self, u: &mut [S]) {
        if let ControlSet::Box { lo, hi, .. } = self {
            for (a, v) in u.iter_mut().enumerate() {
                *v = v.max(lo[a]).min(hi[a]);
            }
        }
    }

    pub fn contains(&self, u: &[S]) -> bool {
        match self {
            ControlSet::Finite(pts) => pts.iter().any(|p| p.as_slice() == u),
            ControlSet::Box { lo, hi, .. } => u.iter().enumerate().all(|(a, v)| *v >= lo[a] && *v <= hi[a]),
            ControlSet::Whole { .. } => u.iter().all(|v| v.is_finite()),
        }
    }

    /// Coordinate-wise bounding box of the sampled points.
    pub fn bounds(&self) -> (Vec<S>, Vec<S>) {
        let c = self.candidates();
        let k = c.first().map_or(0, |u| u.len());
        let mut lo = vec![S::infinity(); k];
        let mut hi = vec![S::neg_infinity(); k];
        for u in &c {
            for a in 0..k {
                lo[a] = lo[a].min(u[a]);
                hi[a] = hi[a].max(u[a]);
            }
        }
        (lo, hi)
    }
}

/// A control process: open-loop panel or feedback map `(t, x) -> u`.
#[derive(Clone)]
pub enum ControlLaw<S> {
    OpenLoop(ProcessPanel<S>),
    Feedback(FeedbackFn<S>),
}

impl<S> fmt::Debug for ControlLaw<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlLaw::OpenLoop(p) => write!(f, "OpenLoop({})", p.label),
            ControlLaw::Feedback(_) => write!(f, "Feedback"),
        }
    }
}

impl<S: Scalar> ControlLaw<S> {
    /// Constant feedback law `u(t, x) = value`.
    pub fn constant(value: Vec<S>) -> Self {
        ControlLaw::Feedback(Arc::new(move |_, _, out: &mut [S]| out.copy_from_slice(&value)))
    }

    /// Control value on path `m` at node `i` where the state is `x`.
    #[inline]
    pub fn eval(&self, m: usize, i: usize, t: S, x: &[S], out: &mut [S]) {
        match self {
            ControlLaw::OpenLoop(p) => out.copy_from_slice(p.at(m, i)),
            ControlLaw::Feedback(f) => f(t, x, out),
        }
    }

    /// Records the law along a state panel as an open-loop panel.
    pub fn tabulate(&self, x: &ProcessPanel<S>, k: usize) -> ProcessPanel<S> {
        match self {
            ControlLaw::OpenLoop(p) => p.clone(),
            ControlLaw::Feedback(f) => {
                let grid = x.grid();
                let mut out = ProcessPanel::zeros("u", grid, x.paths(), k);
                for i in 0..grid.nodes() {
                    let t = grid.t(i);
                    for m in 0..x.paths() {
                        f(t, x.at(m, i), out.at_mut(m, i));
                    }
                }
                out
            }
        }
    }
}

/// A controlled fully coupled FBSDE with cost `J(u) = Y(0)`.
///
/// Jacobians are stored row-major with one row per component and columns
/// `(x_1, ..., x_n, y, z)`; Hessians of vector coefficients are `n` blocks of
/// `(n + 2) x (n + 2)`. Any partial left as `None` is computed by central
/// finite differences with relative step `1e-4`.
#[derive(Clone)]
pub struct ProblemSpec<S: Scalar> {
    pub name: String,
    pub n: usize,
    /// Control dimension.
    pub k: usize,
    pub horizon: S,
    pub x0: Vec<S>,
    pub growth_l: S,
    pub control_set: ControlSet<S>,
    pub sigma_form: SigmaForm<S>,
    /// Whether `b` or `sigma` depend on `(y, z)`.
    pub forward_coupled: bool,
    pub b: VecFn<S>,
    pub sigma: VecFn<S>,
    pub g: ScalarFn<S>,
    pub phi: TerminalFn<S>,
    pub b_jac: Option<VecFn<S>>,
    pub sigma_jac: Option<VecFn<S>>,
    pub g_grad: Option<VecFn<S>>,
    pub phi_grad: Option<TerminalVecFn<S>>,
    pub b_hess: Option<VecFn<S>>,
    pub sigma_hess: Option<VecFn<S>>,
    pub g_hess: Option<VecFn<S>>,
    pub phi_hess: Option<TerminalVecFn<S>>,
}

impl<S: Scalar> fmt::Debug for ProblemSpec<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("k", &self.k)
            .field("horizon", &self.horizon)
            .field("x0", &self.x0)
            .field("sigma_form", &self.sigma_form)
            .finish()
    }
}

const FD_STEP: f64 = 1e-4;

fn fd_step<S: Scalar>(v: S) -> S {
    S::lit(FD_STEP) * v.abs().max(S::one())
}

/// Owned copy of a point with one `(x, y, z)` coordinate shifted.
struct Shifted<S> {
    x: Vec<S>,
    y: S,
    z: S,
}

impl<S: Scalar> Shifted<S> {
    fn new(pt: &Point<S>, j: usize, h: S) -> Self {
        let mut s = Self { x: pt.x.to_vec(), y: pt.y, z: pt.z };
        s.bump(pt.x.len(), j, h);
        s
    }

    fn bump(&mut self, n: usize, j: usize, h: S) {
        if j < n {
            self.x[j] += h;
        } else if j == n {
            self.y += h;
        } else {
            self.z += h;
        }
    }

    fn point<'a>(&'a self, pt: &Point<'a, S>) -> Point<'a, S> {
        Point { t: pt.t, x: &self.x, y: self.y, z: self.z, u: pt.u }
    }
}

fn coord<S: Scalar>(pt: &Point<S>, j: usize) -> S {
    let n = pt.x.len();
    if j < n {
        pt.x[j]
    } else if j == n {
        pt.y
    } else {
        pt.z
    }
}

/// Central-difference Jacobian of a vector map with `rows` components.
fn fd_jacobian<S: Scalar>(f: &dyn Fn(&Point<S>, &mut [S]), pt: &Point<S>, rows: usize, out: &mut [S]) {
    let cols = pt.x.len() + 2;
    let mut plus = vec![S::zero(); rows];
    let mut minus = vec![S::zero(); rows];
    for j in 0..cols {
        let h = fd_step(coord(pt, j));
        let sp = Shifted::new(pt, j, h);
        let sm = Shifted::new(pt, j, -h);
        f(&sp.point(pt), &mut plus);
        f(&sm.point(pt), &mut minus);
        for r in 0..rows {
            out[r * cols + j] = (plus[r] - minus[r]) / (h + h);
        }
    }
}

/// Central-difference Hessians of a vector map, either from its Jacobian or
/// from values when no Jacobian is available.
fn fd_hessians<S: Scalar>(
    f: &dyn Fn(&Point<S>, &mut [S]),
    jac: Option<&dyn Fn(&Point<S>, &mut [S])>,
    pt: &Point<S>,
    rows: usize,
    out: &mut [S],
) {
    let c = pt.x.len() + 2;
    let n = pt.x.len();
    let two = S::lit(2.0);
    match jac {
        Some(jac) => {
            let mut jp = vec![S::zero(); rows * c];
            let mut jm = vec![S::zero(); rows * c];
            for k in 0..c {
                let h = fd_step(coord(pt, k));
                let sp = Shifted::new(pt, k, h);
                let sm = Shifted::new(pt, k, -h);
                jac(&sp.point(pt), &mut jp);
                jac(&sm.point(pt), &mut jm);
                for r in 0..rows {
                    for j in 0..c {
                        out[r * c * c + j * c + k] = (jp[r * c + j] - jm[r * c + j]) / (h + h);
                    }
                }
            }
            for r in 0..rows {
                crate::scalar::symmetrize(&mut out[r * c * c..(r + 1) * c * c], c);
            }
        }
        None => {
            let mut f0 = vec![S::zero(); rows];
            let mut a = vec![S::zero(); rows];
            let mut b = vec![S::zero(); rows];
            let mut cc = vec![S::zero(); rows];
            let mut d = vec![S::zero(); rows];
            f(pt, &mut f0);
            for j in 0..c {
                let hj = fd_step(coord(pt, j));
                for k in j..c {
                    let hk = fd_step(coord(pt, k));
                    if j == k {
                        let sp = Shifted::new(pt, j, hj);
                        let sm = Shifted::new(pt, j, -hj);
                        f(&sp.point(pt), &mut a);
                        f(&sm.point(pt), &mut b);
                        for r in 0..rows {
                            out[r * c * c + j * c + j] = (a[r] - two * f0[r] + b[r]) / (hj * hj);
                        }
                    } else {
                        let mut s = Shifted::new(pt, j, hj);
                        s.bump(n, k, hk);
                        f(&s.point(pt), &mut a);
                        let mut s = Shifted::new(pt, j, hj);
                        s.bump(n, k, -hk);
                        f(&s.point(pt), &mut b);
                        let mut s = Shifted::new(pt, j, -hj);
                        s.bump(n, k, hk);
                        f(&s.point(pt), &mut cc);
                        let mut s = Shifted::new(pt, j, -hj);
                        s.bump(n, k, -hk);
                        f(&s.point(pt), &mut d);
                        for r in 0..rows {
                            let v = (a[r] - b[r] - cc[r] + d[r]) / (S::lit(4.0) * hj * hk);
                            out[r * c * c + j * c + k] = v;
                            out[r * c * c + k * c + j] = v;
                        }
                    }
                }
            }
        }
    }
}

fn fd_terminal_grad<S: Scalar>(phi: &dyn Fn(&[S]) -> S, x: &[S], out: &mut [S]) {
    let mut xs = x.to_vec();
    for j in 0..x.len() {
        let h = fd_step(x[j]);
        xs[j] = x[j] + h;
        let a = phi(&xs);
        xs[j] = x[j] - h;
        let b = phi(&xs);
        xs[j] = x[j];
        out[j] = (a - b) / (h + h);
    }
}

fn fd_terminal_hess<S: Scalar>(grad: &dyn Fn(&[S], &mut [S]), x: &[S], out: &mut [S]) {
    let n = x.len();
    let mut xs = x.to_vec();
    let mut gp = vec![S::zero(); n];
    let mut gm = vec![S::zero(); n];
    for k in 0..n {
        let h = fd_step(x[k]);
        xs[k] = x[k] + h;
        grad(&xs, &mut gp);
        xs[k] = x[k] - h;
        grad(&xs, &mut gm);
        xs[k] = x[k];
        for j in 0..n {
            out[j * n + k] = (gp[j] - gm[j]) / (h + h);
        }
    }
    crate::scalar::symmetrize(out, n);
}

impl<S: Scalar> ProblemSpec<S> {
    /// Spec with value evaluators only; partials default to finite differences.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        n: usize,
        k: usize,
        horizon: S,
        x0: Vec<S>,
        b: VecFn<S>,
        sigma: VecFn<S>,
        g: ScalarFn<S>,
        phi: TerminalFn<S>,
    ) -> Self {
        Self {
            name: name.to_string(),
            n,
            k,
            horizon,
            x0,
            growth_l: S::one(),
            control_set: ControlSet::Whole { grid: vec![vec![S::zero(); k]] },
            sigma_form: SigmaForm::General,
            forward_coupled: true,
            b,
            sigma,
            g,
            phi,
            b_jac: None,
            sigma_jac: None,
            g_grad: None,
            phi_grad: None,
            b_hess: None,
            sigma_hess: None,
            g_hess: None,
            phi_hess: None,
        }
    }

    /// Number of `(x, y, z)` coordinates, `n + 2`.
    #[inline]
    pub fn nv(&self) -> usize {
        self.n + 2
    }

    pub fn check(&self) -> Result<()> {
        if self.n == 0 || self.x0.len() != self.n {
            return Err(SmpError::InvalidInput(format!("x0 has length {}, state dimension is {}", self.x0.len(), self.n)));
        }
        if !(self.horizon > S::zero()) {
            return Err(SmpError::InvalidInput("horizon must be positive".into()));
        }
        if !(self.growth_l > S::zero()) {
            return Err(SmpError::InvalidInput("growth constant must be positive".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn b(&self, pt: &Point<S>, out: &mut [S]) {
        (self.b)(pt, out)
    }

    #[inline]
    pub fn sigma(&self, pt: &Point<S>, out: &mut [S]) {
        (self.sigma)(pt, out)
    }

    #[inline]
    pub fn g(&self, pt: &Point<S>) -> S {
        (self.g)(pt)
    }

    #[inline]
    pub fn phi(&self, x: &[S]) -> S {
        (self.phi)(x)
    }

    fn g_as_vec(&self) -> impl Fn(&Point<S>, &mut [S]) + '_ {
        move |p: &Point<S>, o: &mut [S]| o[0] = (self.g)(p)
    }

    /// `n x (n + 2)` Jacobian of `b`.
    pub fn b_jac(&self, pt: &Point<S>, out: &mut [S]) {
        match &self.b_jac {
            Some(f) => f(pt, out),
            None => fd_jacobian(&*self.b, pt, self.n, out),
        }
    }

    pub fn sigma_jac(&self, pt: &Point<S>, out: &mut [S]) {
        match &self.sigma_jac {
            Some(f) => f(pt, out),
            None => fd_jacobian(&*self.sigma, pt, self.n, out),
        }
    }

    /// Gradient of `g` in `(x, y, z)`.
    pub fn g_grad(&self, pt: &Point<S>, out: &mut [S]) {
        match &self.g_grad {
            Some(f) => f(pt, out),
            None => fd_jacobian(&self.g_as_vec(), pt, 1, out),
        }
    }

    pub fn phi_grad(&self, x: &[S], out: &mut [S]) {
        match &self.phi_grad {
            Some(f) => f(x, out),
            None => fd_terminal_grad(&*self.phi, x, out),
        }
    }

    /// Hessians of the components of `b`, `n` blocks of `(n + 2)^2`.
    pub fn b_hess(&self, pt: &Point<S>, out: &mut [S]) {
        match &self.b_hess {
            Some(f) => f(pt, out),
            None => fd_hessians(&*self.b, self.b_jac.as_deref().map(|f| f as &dyn Fn(&Point<S>, &mut [S])), pt, self.n, out),
        }
    }

    pub fn sigma_hess(&self, pt: &Point<S>, out: &mut [S]) {
        match &self.sigma_hess {
            Some(f) => f(pt, out),
            None => fd_hessians(
                &*self.sigma,
                self.sigma_jac.as_deref().map(|f| f as &dyn Fn(&Point<S>, &mut [S])),
                pt,
                self.n,
                out,
            ),
        }
    }

    pub fn g_hess(&self, pt: &Point<S>, out: &mut [S]) {
        match &self.g_hess {
            Some(f) => f(pt, out),
            None => {
                let gv = self.g_as_vec();
                fd_hessians(&gv, self.g_grad.as_deref().map(|f| f as &dyn Fn(&Point<S>, &mut [S])), pt, 1, out)
            }
        }
    }

    pub fn phi_hess(&self, x: &[S], out: &mut [S]) {
        match &self.phi_hess {
            Some(f) => f(x, out),
            None => {
                let grad = |x: &[S], o: &mut [S]| self.phi_grad(x, o);
                fd_terminal_hess(&grad, x, out)
            }
        }
    }

    /// `sigma_z` as an `n`-vector.
    pub fn sigma_z(&self, pt: &Point<S>, out: &mut [S]) {
        if let SigmaForm::LinearInZ { a, .. } = &self.sigma_form {
            a(pt.t, out);
            return;
        }
        let c = self.nv();
        let mut jac = vec![S::zero(); self.n * c];
        self.sigma_jac(pt, &mut jac);
        for r in 0..self.n {
            out[r] = jac[r * c + self.n + 1];
        }
    }
}

/// Outcome of the derivative, growth and structure checks of a spec.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValidationReport {
    pub probes: usize,
    /// Largest `|analytic - fd| / max(1, |fd|)` over supplied first partials.
    pub max_first_mismatch: f64,
    /// Same for supplied second partials.
    pub max_second_mismatch: f64,
    /// Largest `|psi| / (L (1 + |x| + |y| + |z| + |u|))`.
    pub max_growth_ratio: f64,
    /// Largest `|sigma - (A z + sigma1)|`, present for linear-in-`z` specs.
    pub linear_z_residual: Option<f64>,
    pub derivatives_pass: bool,
    pub growth_pass: bool,
    pub linear_z_pass: bool,
    pub pass: bool,
    pub worst_probe: String,
}

pub const DERIVATIVE_TOL: f64 = 1e-4;
const PROBE_RADIUS: f64 = 3.0;

fn mismatch<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs() / y.as_f64().abs().max(1.0))
        .fold(0.0, f64::max)
}

fn finite_or<S: Scalar>(vals: &[S], what: &str, pt: &Point<S>) -> Result<()> {
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SmpError::Evaluator(format!("{what} at {pt}")))
    }
}

/// Compares supplied partials against central differences, checks the
/// linear-growth bound and the linear-in-`z` reconstruction at random probes
/// drawn from a box of radius 3 around the origin (controls from the bounding
/// box of `U`).
pub fn validate_spec<S: Scalar>(spec: &ProblemSpec<S>, probes: usize, seed: SeedSpec) -> Result<ValidationReport> {
    if probes == 0 {
        return Err(SmpError::InvalidInput("probes must be at least 1".into()));
    }
    spec.check()?;
    let (n, c) = (spec.n, spec.nv());
    let (ulo, uhi) = spec.control_set.bounds();
    let mut rng = seed.rng(0);
    let mut first = 0.0f64;
    let mut second = 0.0f64;
    let mut growth = 0.0f64;
    let mut linres: Option<f64> = None;
    let mut worst = String::new();
    let mut worst_val = -1.0;
    let eps = S::epsilon().as_f64();
    let mut lin_tol_ok = true;

    let mut vb = vec![S::zero(); n];
    let mut vs = vec![S::zero(); n];
    let mut ja = vec![S::zero(); n * c];
    let mut jf = vec![S::zero(); n * c];
    let mut ga = vec![S::zero(); c];
    let mut gf = vec![S::zero(); c];
    let mut ha = vec![S::zero(); n * c * c];
    let mut hf = vec![S::zero(); n * c * c];
    let mut gha = vec![S::zero(); c * c];
    let mut ghf = vec![S::zero(); c * c];
    let mut pa = vec![S::zero(); n];
    let mut pf = vec![S::zero(); n];
    let mut pha = vec![S::zero(); n * n];
    let mut phf = vec![S::zero(); n * n];
    let mut av = vec![S::zero(); n];
    let mut s1 = vec![S::zero(); n];

    for _ in 0..probes {
        let t = spec.horizon * S::lit(rng.random::<f64>());
        let x: Vec<S> = (0..n).map(|_| S::lit(rng.random_range(-PROBE_RADIUS..PROBE_RADIUS))).collect();
        let y = S::lit(rng.random_range(-PROBE_RADIUS..PROBE_RADIUS));
        let z = S::lit(rng.random_range(-PROBE_RADIUS..PROBE_RADIUS));
        let u: Vec<S> = (0..spec.k)
            .map(|a| {
                let (lo, hi) = (ulo[a].as_f64(), uhi[a].as_f64());
                if hi > lo {
                    S::lit(rng.random_range(lo..hi))
                } else {
                    S::lit(lo)
                }
            })
            .collect();
        let pt = Point::new(t, &x, y, z, &u);

        spec.b(&pt, &mut vb);
        finite_or(&vb, "b", &pt)?;
        spec.sigma(&pt, &mut vs);
        finite_or(&vs, "sigma", &pt)?;
        let gv = spec.g(&pt);
        finite_or(&[gv], "g", &pt)?;
        let pv = spec.phi(&x);
        finite_or(&[pv], "phi", &pt)?;

        let mut track = |val: f64, what: &str, first_ref: &mut f64| {
            if val > *first_ref {
                *first_ref = val;
            }
            if val > worst_val {
                worst_val = val;
                worst = format!("{what} mismatch {val:.3e} at {pt}");
            }
        };

        if let Some(f) = &spec.b_jac {
            f(&pt, &mut ja);
            finite_or(&ja, "b_jac", &pt)?;
            fd_jacobian(&*spec.b, &pt, n, &mut jf);
            track(mismatch(&ja, &jf), "b partials", &mut first);
        }
        if let Some(f) = &spec.sigma_jac {
            f(&pt, &mut ja);
            finite_or(&ja, "sigma_jac", &pt)?;
            fd_jacobian(&*spec.sigma, &pt, n, &mut jf);
            track(mismatch(&ja, &jf), "sigma partials", &mut first);
        }
        if let Some(f) = &spec.g_grad {
            f(&pt, &mut ga);
            finite_or(&ga, "g_grad", &pt)?;
            fd_jacobian(&spec.g_as_vec(), &pt, 1, &mut gf);
            track(mismatch(&ga, &gf), "g partials", &mut first);
        }
        if let Some(f) = &spec.phi_grad {
            f(&x, &mut pa);
            finite_or(&pa, "phi_grad", &pt)?;
            fd_terminal_grad(&*spec.phi, &x, &mut pf);
            track(mismatch(&pa, &pf), "phi partials", &mut first);
        }
        if let Some(f) = &spec.b_hess {
            f(&pt, &mut ha);
            finite_or(&ha, "b_hess", &pt)?;
            fd_hessians(&*spec.b, spec.b_jac.as_deref().map(|f| f as &dyn Fn(&Point<S>, &mut [S])), &pt, n, &mut hf);
            track(mismatch(&ha, &hf), "b second partials", &mut second);
        }
        if let Some(f) = &spec.sigma_hess {
            f(&pt, &mut ha);
            finite_or(&ha, "sigma_hess", &pt)?;
            fd_hessians(&*spec.sigma, spec.sigma_jac.as_deref().map(|f| f as &dyn Fn(&Point<S>, &mut [S])), &pt, n, &mut hf);
            track(mismatch(&ha, &hf), "sigma second partials", &mut second);
        }
        if let Some(f) = &spec.g_hess {
            f(&pt, &mut gha);
            finite_or(&gha, "g_hess", &pt)?;
            let gv = spec.g_as_vec();
            fd_hessians(&gv, spec.g_grad.as_deref().map(|f| f as &dyn Fn(&Point<S>, &mut [S])), &pt, 1, &mut ghf);
            track(mismatch(&gha, &ghf), "g second partials", &mut second);
        }
        if let Some(f) = &spec.phi_hess {
            f(&x, &mut pha);
            finite_or(&pha, "phi_hess", &pt)?;
            let grad = |x: &[S], o: &mut [S]| spec.phi_grad(x, o);
            fd_terminal_hess(&grad, &x, &mut phf);
            track(mismatch(&pha, &phf), "phi second partials", &mut second);
        }

        let scale = spec.growth_l.as_f64()
            * (1.0
                + x.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt()
                + y.as_f64().abs()
                + z.as_f64().abs()
                + u.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt());
        let nb = crate::scalar::norm(&vb).as_f64();
        let ns = crate::scalar::norm(&vs).as_f64();
        growth = growth.max(nb / scale).max(ns / scale).max(gv.as_f64().abs() / scale);

        if let SigmaForm::LinearInZ { a, sigma1 } = &spec.sigma_form {
            a(t, &mut av);
            sigma1(&pt, &mut s1);
            let mut r = 0.0f64;
            for j in 0..n {
                let rec = av[j] * z + s1[j];
                let d = (rec - vs[j]).as_f64().abs();
                r = r.max(d);
                if d > 16.0 * eps * (1.0 + vs[j].as_f64().abs() + (av[j] * z).as_f64().abs()) {
                    lin_tol_ok = false;
                }
            }
            linres = Some(linres.unwrap_or(0.0).max(r));
        }
    }

    let derivatives_pass = first <= DERIVATIVE_TOL && second <= DERIVATIVE_TOL;
    let growth_pass = growth <= 1.0;
    let linear_z_pass = lin_tol_ok;
    Ok(ValidationReport {
        probes,
        max_first_mismatch: first,
        max_second_mismatch: second,
        max_growth_ratio: growth,
        linear_z_residual: linres,
        derivatives_pass,
        growth_pass,
        linear_z_pass,
        pass: derivatives_pass && growth_pass && linear_z_pass,
        worst_probe: worst,
    })
}

/// A problem bundled with its known optimal control and oracle data.
#[derive(Clone, Debug)]
pub struct BenchmarkProblem<S: Scalar> {
    pub spec: ProblemSpec<S>,
    pub optimal: ControlLaw<S>,
    /// Analytic optimal value `J*`, when known.
    pub value: Option<f64>,
    pub oracle: String,
}

/// Scalar overrides of the linear-quadratic benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LqParams {
    pub x0: f64,
    pub sigma0: f64,
    pub horizon: f64,
    pub growth_l: f64,
    pub u_lo: f64,
    pub u_hi: f64,
    pub u_step: f64,
}

impl Default for LqParams {
    fn default() -> Self {
        Self { x0: 1.0, sigma0: 0.5, horizon: 1.0, growth_l: 2.0, u_lo: -3.0, u_hi: 3.0, u_step: 0.1 }
    }
}

/// Linear-quadratic problem with default parameters.
pub fn benchmark_lq<S: Scalar>() -> BenchmarkProblem<S> {
    benchmark_lq_with(LqParams::default())
}

/// `dX = u dt + sigma0 dB`, `g = (x^2 + u^2) / 2`, `phi = x^2 / 2`.
///
/// The Riccati equation `P' = P^2 - 1`, `P(T) = 1` has the constant solution
/// 1, so the optimal feedback is `u = -x` and `J* = x0^2 / 2 + sigma0^2 T / 2`.
pub fn benchmark_lq_with<S: Scalar>(params: LqParams) -> BenchmarkProblem<S> {
    let s0 = S::lit(params.sigma0);
    let half = S::lit(0.5);
    let b: VecFn<S> = Arc::new(|p: &Point<S>, o: &mut [S]| o[0] = p.u[0]);
    let sigma: VecFn<S> = Arc::new(move |_: &Point<S>, o: &mut [S]| o[0] = s0);
    let g: ScalarFn<S> = Arc::new(move |p: &Point<S>| half * (p.x[0] * p.x[0] + p.u[0] * p.u[0]));
    let phi: TerminalFn<S> = Arc::new(move |x: &[S]| half * x[0] * x[0]);
    let mut spec = ProblemSpec::new("lq", 1, 1, S::lit(params.horizon), vec![S::lit(params.x0)], b, sigma, g, phi);
    spec.growth_l = S::lit(params.growth_l);
    spec.forward_coupled = false;
    spec.control_set = ControlSet::real_line_grid(params.u_lo, params.u_hi, params.u_step);
    spec.b_jac = Some(Arc::new(|_: &Point<S>, o: &mut [S]| o.fill(S::zero())));
    spec.sigma_jac = Some(Arc::new(|_: &Point<S>, o: &mut [S]| o.fill(S::zero())));
    spec.g_grad = Some(Arc::new(|p: &Point<S>, o: &mut [S]| {
        o[0] = p.x[0];
        o[1] = S::zero();
        o[2] = S::zero();
    }));
    spec.phi_grad = Some(Arc::new(|x: &[S], o: &mut [S]| o[0] = x[0]));
    spec.b_hess = Some(Arc::new(|_: &Point<S>, o: &mut [S]| o.fill(S::zero())));
    spec.sigma_hess = Some(Arc::new(|_: &Point<S>, o: &mut [S]| o.fill(S::zero())));
    spec.g_hess = Some(Arc::new(|_: &Point<S>, o: &mut [S]| {
        o.fill(S::zero());
        o[0] = S::one();
    }));
    spec.phi_hess = Some(Arc::new(|_: &[S], o: &mut [S]| o[0] = S::one()));
    let optimal = ControlLaw::Feedback(Arc::new(|_, x: &[S], o: &mut [S]| o[0] = -x[0]));
    let value = 0.5 * params.x0 * params.x0 + 0.5 * params.sigma0 * params.sigma0 * params.horizon;
    BenchmarkProblem {
        spec,
        optimal,
        value: Some(value),
        oracle: "Riccati P(t) = 1, optimal feedback u = -x, adjoint p = X".into(),
    }
}

/// RK4 integration of `P' = P^2 - 1`, `P(T) = 1` and the value offset
/// `r' = -sigma0^2 P / 2`, `r(T) = 0`, backwards from `T`. Returns
/// `(t, P(t), r(t))` on `steps + 1` nodes in increasing time.
pub fn riccati_rk4(horizon: f64, sigma0: f64, steps: usize) -> Vec<(f64, f64, f64)> {
    let h = horizon / steps as f64;
    let rhs = |p: f64| (p * p - 1.0, -0.5 * sigma0 * sigma0 * p);
    let mut out = vec![(horizon, 1.0, 0.0)];
    let (mut p, mut r) = (1.0, 0.0);
    for j in 0..steps {
        // integrate in reversed time s = T - t, so dP/ds = -(P^2 - 1)
        let f = |p: f64| {
            let (a, b) = rhs(p);
            (-a, -b)
        };
        let (k1p, k1r) = f(p);
        let (k2p, k2r) = f(p + 0.5 * h * k1p);
        let (k3p, k3r) = f(p + 0.5 * h * k2p);
        let (k4p, k4r) = f(p + h * k3p);
        p += h / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p);
        r += h / 6.0 * (k1r + 2.0 * k2r + 2.0 * k3r + k4r);
        out.push((horizon - (j + 1) as f64 * h, p, r));
    }
    out.reverse();
    out
}

/// Optimal LQ value `P(0) x0^2 / 2 + r(0)` from the RK4 Riccati solve.
pub fn lq_value_rk4(x0: f64, sigma0: f64, horizon: f64, steps: usize) -> f64 {
    let (_, p, r) = riccati_rk4(horizon, sigma0, steps)[0];
    0.5 * p * x0 * x0 + r
}

/// Exact cost of the Euler-discretized LQ system under `u = -x`, including
/// the terminal term: `E[X_N^2] / 2 + sum_i E[X_i^2] dt`.
pub fn lq_discrete_value(x0: f64, sigma0: f64, horizon: f64, steps: usize) -> f64 {
    let dt = horizon / steps as f64;
    let mut m = x0 * x0;
    let mut acc = 0.0;
    for _ in 0..steps {
        acc += m * dt;
        m = (1.0 - dt).powi(2) * m + sigma0 * sigma0 * dt;
    }
    acc + 0.5 * m
}

/// Scalar overrides of the coupled benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoupledZParams {
    pub alpha: f64,
    pub x0: f64,
    pub horizon: f64,
    pub growth_l: f64,
    pub c_min: f64,
}

impl Default for CoupledZParams {
    fn default() -> Self {
        Self { alpha: 0.1, x0: 1.0, horizon: 1.0, growth_l: 3.0, c_min: 0.1 }
    }
}

pub fn benchmark_coupled_z<S: Scalar>(alpha: f64) -> Result<BenchmarkProblem<S>> {
    benchmark_coupled_z_with(CoupledZParams { alpha, ..Default::default() })
}

/// `dX = (u - Y) dt + (alpha Z + X + u) dB`, `g = u^2 / 2 + x`, `phi = x`,
/// `U = {-1, 0, 1}`.
///
/// Along the candidate `u = -1` the first-order adjoint solves
/// `p' = -(1 - p^2)`, `p(T) = 1`, hence `p = 1`, `q = 0` and the invertibility
/// margin is `|1 - alpha|`; the constructor refuses parameters where it falls
/// below `c_min`.
pub fn benchmark_coupled_z_with<S: Scalar>(params: CoupledZParams) -> Result<BenchmarkProblem<S>> {
    let margin = (1.0 - params.alpha).abs();
    if margin < params.c_min {
        return Err(SmpError::Invertibility { margin, c_min: params.c_min, path: 0, node: 0 });
    }
    let a = S::lit(params.alpha);
    let half = S::lit(0.5);
    let b: VecFn<S> = Arc::new(|p: &Point<S>, o: &mut [S]| o[0] = p.u[0] - p.y);
    let sigma: VecFn<S> = Arc::new(move |p: &Point<S>, o: &mut [S]| o[0] = a * p.z + p.x[0] + p.u[0]);
    let g: ScalarFn<S> = Arc::new(move |p: &Point<S>| half * p.u[0] * p.u[0] + p.x[0]);
    let phi: TerminalFn<S> = Arc::new(|x: &[S]| x[0]);
    let mut spec = ProblemSpec::new(
        "coupled_z",
        1,
        1,
        S::lit(params.horizon),
        vec![S::lit(params.x0)],
        b,
        sigma,
        g,
        phi,
    );
    spec.growth_l = S::lit(params.growth_l);
    spec.control_set = ControlSet::Finite(vec![vec![-S::one()], vec![S::zero()], vec![S::one()]]);
    spec.sigma_form = SigmaForm::LinearInZ {
        a: Arc::new(move |_, o: &mut [S]| o[0] = a),
        sigma1: Arc::new(|p: &Point<S>, o: &mut [S]| o[0] = p.x[0] + p.u[0]),
    };
    spec.b_jac = Some(Arc::new(|_: &Point<S>, o: &mut [S]| {
        o[0] = S::zero();
        o[1] = -S::one();
        o[2] = S::zero();
    }));
    spec.sigma_jac = Some(Arc::new(move |_: &Point<S>, o: &mut [S]| {
        o[0] = S::one();
        o[1] = S::zero();
        o[2] = a;
    }));
    spec.g_grad = Some(Arc::new(|_: &Point<S>, o: &mut [S]| {
        o[0] = S::one();
        o[1] = S::zero();
        o[2] = S::zero();
    }));
    spec.phi_grad = Some(Arc::new(|_: &[S], o: &mut [S]| o[0] = S::one()));
    spec.b_hess = Some(Arc::new(|_: &Point<S>, o: &mut [S]| o.fill(S::zero())));
    spec.sigma_hess = Some(Arc::new(|_: &Point<S>, o: &mut [S]| o.fill(S::zero())));
    spec.g_hess = Some(Arc::new(|_: &Point<S>, o: &mut [S]| o.fill(S::zero())));
    spec.phi_hess = Some(Arc::new(|_: &[S], o: &mut [S]| o[0] = S::zero()));
    Ok(BenchmarkProblem {
        spec,
        optimal: ControlLaw::constant(vec![-S::one()]),
        value: None,
        oracle: "fine-grid Picard reference solve".into(),
    })
}

/// Uniform grid for a spec's horizon.
pub fn grid_for<S: Scalar>(spec: &ProblemSpec<S>, steps: usize) -> Result<TimeGrid<S>> {
    TimeGrid::new(spec.horizon, steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_spec() -> ProblemSpec<f64> {
        let mut s = ProblemSpec::new(
            "const",
            1,
            1,
            1.0,
            vec![0.0],
            Arc::new(|_: &Point<f64>, o: &mut [f64]| o[0] = 0.0),
            Arc::new(|_: &Point<f64>, o: &mut [f64]| o[0] = 1.0),
            Arc::new(|_: &Point<f64>| 0.0),
            Arc::new(|x: &[f64]| x[0]),
        );
        s.b_jac = Some(Arc::new(|_: &Point<f64>, o: &mut [f64]| o.fill(0.0)));
        s.sigma_jac = Some(Arc::new(|_: &Point<f64>, o: &mut [f64]| o.fill(0.0)));
        s.g_grad = Some(Arc::new(|_: &Point<f64>, o: &mut [f64]| o.fill(0.0)));
        s.phi_grad = Some(Arc::new(|_: &[f64], o: &mut [f64]| o[0] = 1.0));
        s
    }

    #[test]
    fn constant_coefficients_validate_with_zero_mismatch() {
        let r = validate_spec(&constant_spec(), 100, SeedSpec::new(1)).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.max_first_mismatch < 1e-9);
    }

    #[test]
    fn wrong_drift_partial_is_caught() {
        let mut s = constant_spec();
        s.b_jac = Some(Arc::new(|_: &Point<f64>, o: &mut [f64]| {
            o.fill(0.0);
            o[0] = 1.0;
        }));
        let r = validate_spec(&s, 100, SeedSpec::new(1)).unwrap();
        assert!(!r.derivatives_pass);
        assert!(r.max_first_mismatch >= 1.0);
    }

    #[test]
    fn lq_spec_validates_on_many_probes() {
        let r = validate_spec(&benchmark_lq::<f64>().spec, 1000, SeedSpec::new(7)).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.max_first_mismatch <= 1e-4 && r.max_second_mismatch <= 1e-4);
    }

    #[test]
    fn coupled_spec_validates_and_reconstructs_sigma() {
        let b = benchmark_coupled_z::<f64>(0.1).unwrap();
        let r = validate_spec(&b.spec, 1000, SeedSpec::new(3)).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.linear_z_residual.unwrap() <= 4.0 * f64::EPSILON);
    }

    #[test]
    fn non_finite_coefficient_reports_probe() {
        let mut s = constant_spec();
        s.g = Arc::new(|p: &Point<f64>| if p.x[0] > 0.0 { f64::NAN } else { 0.0 });
        match validate_spec(&s, 50, SeedSpec::new(2)) {
            Err(SmpError::Evaluator(msg)) => assert!(msg.starts_with("g at t=")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn finite_difference_partials_match_analytic() {
        let mut s = benchmark_coupled_z::<f64>(0.3).unwrap().spec;
        let x = [0.7];
        let u = [1.0];
        let pt = Point::new(0.2, &x, -0.4, 1.3, &u);
        let mut a = [0.0; 3];
        s.sigma_jac(&pt, &mut a);
        s.sigma_jac = None;
        let mut f = [0.0; 3];
        s.sigma_jac(&pt, &mut f);
        for j in 0..3 {
            assert!((a[j] - f[j]).abs() < 1e-9);
        }
        let mut h = [1.0; 9];
        s.sigma_hess = None;
        s.sigma_hess(&pt, &mut h);
        assert!(h.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn value_based_hessian_of_quadratic() {
        let mut s = benchmark_lq::<f64>().spec;
        s.g_grad = None;
        s.g_hess = None;
        let x = [1.5];
        let u = [0.2];
        let pt = Point::new(0.0, &x, 0.0, 0.0, &u);
        let mut h = [0.0; 9];
        s.g_hess(&pt, &mut h);
        assert!((h[0] - 1.0).abs() < 1e-5, "{h:?}");
        assert!(h[1..].iter().all(|v| v.abs() < 1e-5));
    }

    #[test]
    fn riccati_solution_is_constant() {
        let tab = riccati_rk4(1.0, 0.0, 200);
        let mid = tab[100];
        assert!((mid.0 - 0.5).abs() < 1e-12);
        assert!((mid.1 - 1.0).abs() < 1e-12);
        assert!((lq_value_rk4(1.0, 0.0, 1.0, 200) - 0.5).abs() < 1e-12);
        assert!((lq_value_rk4(1.0, 0.5, 1.0, 200) - 0.625).abs() < 1e-12);
        assert_eq!(lq_value_rk4(0.0, 0.0, 1.0, 50), 0.0);
    }

    #[test]
    fn discrete_lq_value_converges_to_continuous() {
        let coarse = (lq_discrete_value(1.0, 0.5, 1.0, 256) - 0.625).abs();
        let fine = (lq_discrete_value(1.0, 0.5, 1.0, 1024) - 0.625).abs();
        assert!(fine < coarse / 3.0);
    }

    #[test]
    fn invertibility_guard_fires() {
        match benchmark_coupled_z::<f64>(0.95) {
            Err(SmpError::Invertibility { margin, .. }) => assert!((margin - 0.05).abs() < 1e-12),
            other => panic!("unexpected {:?}", other.map(|b| b.spec.name)),
        }
    }

    #[test]
    fn box_candidates_cover_corners() {
        let set: ControlSet<f64> = ControlSet::Box { lo: vec![-1.0, 0.0], hi: vec![1.0, 2.0], per_axis: 3 };
        let c = set.candidates();
        assert_eq!(c.len(), 9);
        assert!(c.contains(&vec![-1.0, 0.0]) && c.contains(&vec![1.0, 2.0]));
        assert!((set.spacing(1) - 1.0).abs() < 1e-12);
    }
}
