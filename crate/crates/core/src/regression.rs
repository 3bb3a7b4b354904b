//! Least-squares regression of next-node values on polynomial features of the
//! current state, the conditional-expectation engine behind every backward
//! solve.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// How `(E[Y_{i+1} | F_i], E[Y_{i+1} dB_i | F_i] / dt)` is estimated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegressionScheme {
    /// One least-squares fit of `Y_{i+1}` on `[phi(X_i), phi(X_i) dB_i / sqrt(dt)]`;
    /// the first block gives the conditional mean, the second the `Z` estimate.
    Joint,
    /// Separate fits of `Y_{i+1}` and `Y_{i+1} dB_i / dt` on `phi(X_i)`.
    Projection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub degree: usize,
    pub scheme: RegressionScheme,
}

impl Default for BasisSpec {
    fn default() -> Self {
        Self { degree: 2, scheme: RegressionScheme::Joint }
    }
}

pub const RIDGE_LAMBDA: f64 = 1e-8;
const CHUNK: usize = 2048;

/// Standardized monomials of the non-constant feature coordinates.
#[derive(Clone, Debug)]
pub(crate) struct FeatureMap {
    means: Vec<f64>,
    scales: Vec<f64>,
    active: Vec<usize>,
    monomials: Vec<Vec<u32>>,
}

impl FeatureMap {
    fn fit<S: Scalar>(samples: &[S], d: usize, degree: usize) -> Self {
        let m = samples.len() / d.max(1);
        let mut means = vec![0.0; d];
        let mut scales = vec![1.0; d];
        let mut active = Vec::new();
        // columns whose spread is rounding noise relative to the largest
        // feature are treated as constant
        let global = samples.iter().fold(0.0f64, |a, v| a.max(v.as_f64().abs()));
        for j in 0..d {
            let (mut lo, mut hi, mut sum, mut amax) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0.0f64);
            for k in 0..m {
                let v = samples[k * d + j].as_f64();
                lo = lo.min(v);
                hi = hi.max(v);
                sum += v;
                amax = amax.max(v.abs());
            }
            if m == 0 || hi - lo <= 1e-12 * (1.0 + amax.max(global)) {
                continue;
            }
            let mean = sum / m as f64;
            let var = (0..m).map(|k| (samples[k * d + j].as_f64() - mean).powi(2)).sum::<f64>() / m as f64;
            means[j] = mean;
            scales[j] = var.sqrt();
            active.push(j);
        }
        let monomials = monomials(active.len(), degree);
        Self { means, scales, active, monomials }
    }

    pub(crate) fn len(&self) -> usize {
        self.monomials.len()
    }

    #[inline]
    pub(crate) fn eval<S: Scalar>(&self, x: &[S], out: &mut [f64]) {
        let mut z = [0.0f64; 16];
        let mut zv;
        let zs: &mut [f64] = if self.active.len() <= 16 {
            &mut z[..self.active.len()]
        } else {
            zv = vec![0.0; self.active.len()];
            &mut zv
        };
        for (k, &j) in self.active.iter().enumerate() {
            zs[k] = (x[j].as_f64() - self.means[j]) / self.scales[j];
        }
        for (o, mono) in out.iter_mut().zip(&self.monomials) {
            let mut v = 1.0;
            for (k, &p) in mono.iter().enumerate() {
                if p > 0 {
                    v *= zs[k].powi(p as i32);
                }
            }
            *o = v;
        }
    }
}

/// Exponent vectors of total degree `<= degree`, ordered by degree and then
/// lexicographically.
fn monomials(vars: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for total in 0..=degree {
        let mut cur = vec![0u32; vars];
        push_with_total(&mut out, &mut cur, 0, total as u32);
    }
    out
}

fn push_with_total(out: &mut Vec<Vec<u32>>, cur: &mut Vec<u32>, pos: usize, left: u32) {
    if pos == cur.len() {
        if left == 0 {
            out.push(cur.clone());
        }
        return;
    }
    for p in (0..=left).rev() {
        cur[pos] = p;
        push_with_total(out, cur, pos + 1, left - p);
    }
    cur[pos] = 0;
}

/// Fitted conditional-mean and `Z` coefficients at one node.
#[derive(Clone, Debug)]
pub struct NodeFit {
    map: FeatureMap,
    targets: usize,
    coef_a: Vec<f64>,
    coef_z: Vec<f64>,
    /// Per-target residual variance divided by the path count.
    noise: Vec<f64>,
    /// Inverse normalized Gram matrix (joint layout: `[a block, z block]`).
    gram_inv: DMatrix<f64>,
    z_scale: f64,
    scheme: RegressionScheme,
    pub ridge: bool,
}

impl NodeFit {
    pub fn basis_len(&self) -> usize {
        self.map.len()
    }

    /// Conditional mean and `Z` estimate of every target at state `x`.
    pub fn eval<S: Scalar>(&self, x: &[S], a: &mut [S], z: &mut [S]) {
        let c = self.map.len();
        let mut buf = [0.0f64; 64];
        let mut heap;
        let phi: &mut [f64] = if c <= 64 {
            &mut buf[..c]
        } else {
            heap = vec![0.0; c];
            &mut heap
        };
        self.map.eval(x, phi);
        for t in 0..self.targets {
            let (mut sa, mut sz) = (0.0, 0.0);
            for j in 0..c {
                sa += self.coef_a[j * self.targets + t] * phi[j];
                sz += self.coef_z[j * self.targets + t] * phi[j];
            }
            a[t] = S::lit(sa);
            z[t] = S::lit(sz);
        }
    }

    /// Standard errors of the fitted conditional mean and `Z` of target `t` at `x`.
    pub fn stderr<S: Scalar>(&self, x: &[S], t: usize) -> (f64, f64) {
        let c = self.map.len();
        let mut phi = vec![0.0; c];
        self.map.eval(x, &mut phi);
        let quad = |off: usize| {
            let mut acc = 0.0;
            for i in 0..c {
                for j in 0..c {
                    acc += phi[i] * self.gram_inv[(off + i, off + j)] * phi[j];
                }
            }
            acc.max(0.0)
        };
        let s2 = self.noise[t];
        match self.scheme {
            RegressionScheme::Joint => ((s2 * quad(0)).sqrt(), (s2 * quad(c)).sqrt() * self.z_scale),
            RegressionScheme::Projection => {
                let v = (s2 * quad(0)).sqrt();
                (v, v * self.z_scale)
            }
        }
    }
}

/// Accumulates `sum_k row_k row_k^T` and `sum_k row_k y_k^T` over chunks of
/// paths, combining chunk sums in path order so results do not depend on the
/// thread count.
fn normal_equations<F>(m: usize, p: usize, r: usize, row: F) -> (Vec<f64>, Vec<f64>)
where
    F: Fn(usize, &mut [f64], &mut [f64]) + Sync,
{
    // the right-hand side carries the targets, so it is summed with Neumaier
    // compensation to keep the fit linear in the targets to rounding
    let chunks: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..m.div_ceil(CHUNK))
        .into_par_iter()
        .map(|ch| {
            let mut g = vec![0.0; p * p];
            let mut b = vec![0.0; p * r];
            let mut bc = vec![0.0; p * r];
            let mut x = vec![0.0; p];
            let mut y = vec![0.0; r];
            for k in ch * CHUNK..((ch + 1) * CHUNK).min(m) {
                row(k, &mut x, &mut y);
                for i in 0..p {
                    let xi = x[i];
                    if xi == 0.0 {
                        continue;
                    }
                    for j in i..p {
                        g[i * p + j] += xi * x[j];
                    }
                    for t in 0..r {
                        let idx = i * r + t;
                        neumaier_add(&mut b[idx], &mut bc[idx], xi * y[t]);
                    }
                }
            }
            (g, b, bc)
        })
        .collect();
    let mut g = vec![0.0; p * p];
    let mut b = vec![0.0; p * r];
    let mut bc = vec![0.0; p * r];
    for (cg, cb, cc) in chunks {
        g.iter_mut().zip(&cg).for_each(|(a, v)| *a += v);
        for idx in 0..p * r {
            neumaier_add(&mut b[idx], &mut bc[idx], cb[idx]);
            neumaier_add(&mut b[idx], &mut bc[idx], cc[idx]);
        }
    }
    b.iter_mut().zip(&bc).for_each(|(a, c)| *a += c);
    for i in 0..p {
        for j in 0..i {
            g[i * p + j] = g[j * p + i];
        }
    }
    (g, b)
}

#[inline]
fn neumaier_add(sum: &mut f64, comp: &mut f64, v: f64) {
    let t = *sum + v;
    if sum.abs() >= v.abs() {
        *comp += (*sum - t) + v;
    } else {
        *comp += (v - t) + *sum;
    }
    *sum = t;
}

/// Solves `G c = b` for every right-hand side, falling back to a ridge
/// penalty when `G` is numerically rank deficient. Returns the coefficients,
/// `G^{-1}` and the ridge flag.
fn solve_normal(g: Vec<f64>, b: Vec<f64>, p: usize, r: usize, m: usize) -> (Vec<f64>, DMatrix<f64>, bool) {
    let scale = 1.0 / m as f64;
    let gm = DMatrix::from_row_slice(p, p, &g) * scale;
    let bm = DMatrix::from_row_slice(p, r, &b) * scale;
    let max_diag = (0..p).map(|i| gm[(i, i)]).fold(0.0f64, f64::max).max(1e-300);
    let try_chol = |mat: DMatrix<f64>| {
        mat.cholesky().filter(|ch| {
            let l = ch.l_dirty();
            (0..p).all(|i| l[(i, i)] * l[(i, i)] > 1e-11 * max_diag)
        })
    };
    let (chol, ridge) = match try_chol(gm.clone()) {
        Some(ch) => (ch, false),
        None => {
            let reg = gm + DMatrix::identity(p, p) * RIDGE_LAMBDA;
            match reg.clone().cholesky() {
                Some(ch) => (ch, true),
                None => {
                    let reg = reg + DMatrix::identity(p, p) * (RIDGE_LAMBDA * 1e4);
                    (reg.cholesky().expect("ridge-regularized Gram matrix is positive definite"), true)
                }
            }
        }
    };
    let coef = chol.solve(&bm);
    let inv = chol.inverse();
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        for t in 0..r {
            out[i * r + t] = coef[(i, t)];
        }
    }
    (out, inv, ridge)
}

/// Fits the conditional mean and martingale-integrand estimates of `r`
/// targets at one node.
///
/// `features` holds `M x d` state values at `t_i`, `db` the increments over
/// `[t_i, t_{i+1}]`, `targets` the `M x r` values at `t_{i+1}`.
pub fn fit_node<S: Scalar>(
    features: &[S],
    d: usize,
    db: &[S],
    dt: S,
    targets: &[S],
    r: usize,
    basis: &BasisSpec,
) -> NodeFit {
    let m = db.len();
    let map = FeatureMap::fit(features, d, basis.degree);
    let c = map.len();
    let sdt = dt.as_f64().sqrt();
    match basis.scheme {
        RegressionScheme::Joint => {
            let p = 2 * c;
            let (g, b) = normal_equations(m, p, r, |k, x, y| {
                map.eval(&features[k * d..(k + 1) * d], &mut x[..c]);
                let w = db[k].as_f64() / sdt;
                for j in 0..c {
                    x[c + j] = x[j] * w;
                }
                for t in 0..r {
                    y[t] = targets[k * r + t].as_f64();
                }
            });
            let (coef, inv, ridge) = solve_normal(g, b, p, r, m);
            let coef_a = coef[..c * r].to_vec();
            let coef_z: Vec<f64> = coef[c * r..].iter().map(|v| v / sdt).collect();
            let noise = residual_noise(m, p, r, |k, resid| {
                let mut phi = vec![0.0; c];
                map.eval(&features[k * d..(k + 1) * d], &mut phi);
                let w = db[k].as_f64() / sdt;
                for t in 0..r {
                    let mut fit = 0.0;
                    for j in 0..c {
                        fit += phi[j] * (coef[j * r + t] + coef[(c + j) * r + t] * w);
                    }
                    resid[t] = targets[k * r + t].as_f64() - fit;
                }
            });
            NodeFit { map, targets: r, coef_a, coef_z, noise, gram_inv: inv, z_scale: 1.0 / sdt, scheme: basis.scheme, ridge }
        }
        RegressionScheme::Projection => {
            let dtf = dt.as_f64();
            let (g, b) = normal_equations(m, c, 2 * r, |k, x, y| {
                map.eval(&features[k * d..(k + 1) * d], x);
                let w = db[k].as_f64() / dtf;
                for t in 0..r {
                    let v = targets[k * r + t].as_f64();
                    y[t] = v;
                    y[r + t] = v * w;
                }
            });
            let (coef, inv, ridge) = solve_normal(g, b, c, 2 * r, m);
            let mut coef_a = vec![0.0; c * r];
            let mut coef_z = vec![0.0; c * r];
            for j in 0..c {
                for t in 0..r {
                    coef_a[j * r + t] = coef[j * 2 * r + t];
                    coef_z[j * r + t] = coef[j * 2 * r + r + t];
                }
            }
            let noise = residual_noise(m, c, r, |k, resid| {
                let mut phi = vec![0.0; c];
                map.eval(&features[k * d..(k + 1) * d], &mut phi);
                for t in 0..r {
                    let fit: f64 = (0..c).map(|j| phi[j] * coef_a[j * r + t]).sum();
                    resid[t] = targets[k * r + t].as_f64() - fit;
                }
            });
            NodeFit { map, targets: r, coef_a, coef_z, noise, gram_inv: inv, z_scale: sdt / dtf, scheme: basis.scheme, ridge }
        }
    }
}

fn residual_noise<F>(m: usize, p: usize, r: usize, resid: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let sums: Vec<Vec<f64>> = (0..m.div_ceil(CHUNK))
        .into_par_iter()
        .map(|ch| {
            let mut acc = vec![0.0; r];
            let mut buf = vec![0.0; r];
            for k in ch * CHUNK..((ch + 1) * CHUNK).min(m) {
                resid(k, &mut buf);
                for t in 0..r {
                    acc[t] += buf[t] * buf[t];
                }
            }
            acc
        })
        .collect();
    let mut tot = vec![0.0; r];
    for s in sums {
        tot.iter_mut().zip(&s).for_each(|(a, v)| *a += v);
    }
    let dof = (m as f64 - p as f64).max(1.0);
    tot.iter().map(|v| v / dof / m as f64).collect()
}

/// Plain least-squares fit of `y` on `x` columns, used by tests and
/// diagnostics.
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let svd = x.clone().svd(true, true);
    svd.solve(y, 1e-12).expect("SVD solve with both factors")
}
