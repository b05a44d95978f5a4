//! Primal-dual interior-point method for smooth nonlinear programs
//!
//! ```text
//! min f(x)  s.t.  g(x) = 0,  h(x) <= 0,  l <= x <= u
//! ```
//!
//! Inequalities are slacked (`h + z = 0`, `z > 0`), the barrier parameter is
//! driven down by a fixed centering factor and Newton steps on the condensed
//! KKT system are damped by the fraction-to-boundary rule. Variables with
//! equal bounds are eliminated before the iteration starts.

use crate::error::{Error, Result};
use crate::linalg::{norm_inf, DenseLu, Matrix};
use faer::Mat;

/// Sparse rows: for every constraint the list of `(column, value)` pairs.
pub type SparseRows = Vec<Vec<(usize, f64)>>;

pub trait Nlp {
    fn dim(&self) -> usize;
    fn bounds(&self) -> (Vec<f64>, Vec<f64>);
    fn objective(&self, x: &[f64]) -> (f64, Vec<f64>);
    fn equalities(&self, x: &[f64]) -> (Vec<f64>, SparseRows);
    fn inequalities(&self, x: &[f64]) -> (Vec<f64>, SparseRows);
    /// Hessian of `cost_mult * f + lam' g + mu' h` (dense, full).
    fn hessian(&self, x: &[f64], cost_mult: f64, lam: &[f64], mu: &[f64]) -> Matrix;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IpmOptions {
    /// Absolute tolerance on equality residuals and inequality violation.
    pub feastol: f64,
    pub gradtol: f64,
    pub comptol: f64,
    pub costtol: f64,
    pub max_iter: usize,
    pub cost_mult: f64,
    /// Fraction-to-boundary factor.
    pub step_fraction: f64,
    /// Centering factor applied to the average complementarity.
    pub centering: f64,
}

impl Default for IpmOptions {
    fn default() -> Self {
        Self {
            feastol: 1e-8,
            gradtol: 1e-6,
            comptol: 1e-6,
            costtol: 1e-6,
            max_iter: 150,
            cost_mult: 1.0,
            step_fraction: 0.99995,
            centering: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IpmIterate {
    pub objective: f64,
    pub feascond: f64,
    pub gradcond: f64,
    pub compcond: f64,
    pub costcond: f64,
}

/// Slacks and multipliers over the expanded inequality list (model rows
/// followed by bound rows), reusable as a warm start for the same problem.
#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    pub z: Vec<f64>,
    pub mu: Vec<f64>,
    pub lam: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct IpmReport {
    pub x: Vec<f64>,
    /// Unscaled objective value.
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    pub last: IpmIterate,
    pub history: Vec<IpmIterate>,
    pub duals: DualState,
    /// Multipliers of the model's own equality and inequality rows.
    pub eq_multipliers: Vec<f64>,
    pub ineq_multipliers: Vec<f64>,
}

impl IpmReport {
    /// Normalized gradient of the Lagrangian at exit.
    pub fn kkt_residual(&self) -> f64 {
        self.last.gradcond
    }
}

struct Reduced<'a, P: Nlp + ?Sized> {
    nlp: &'a P,
    base: Vec<f64>,
    free: Vec<usize>,
    /// Column of each full variable in the reduced vector.
    col: Vec<Option<usize>>,
    /// Bound rows: (reduced column, bound, is_upper).
    bound_rows: Vec<(usize, f64, bool)>,
    n_model_ineq: usize,
}

impl<'a, P: Nlp + ?Sized> Reduced<'a, P> {
    fn new(nlp: &'a P, x0: &[f64]) -> Self {
        let n = nlp.dim();
        let (lo, hi) = nlp.bounds();
        let mut base = x0.to_vec();
        let mut free = Vec::new();
        let mut col = vec![None; n];
        let mut bound_rows = Vec::new();
        for i in 0..n {
            if lo[i] == hi[i] {
                base[i] = lo[i];
                continue;
            }
            col[i] = Some(free.len());
            if lo[i].is_finite() {
                bound_rows.push((free.len(), lo[i], false));
            }
            if hi[i].is_finite() {
                bound_rows.push((free.len(), hi[i], true));
            }
            free.push(i);
        }
        let n_model_ineq = nlp.inequalities(&base).0.len();
        Self { nlp, base, free, col, bound_rows, n_model_ineq }
    }

    fn expand(&self, y: &[f64]) -> Vec<f64> {
        let mut x = self.base.clone();
        for (k, &i) in self.free.iter().enumerate() {
            x[i] = y[k];
        }
        x
    }

    fn restrict_rows(&self, rows: SparseRows) -> SparseRows {
        rows.into_iter()
            .map(|r| r.into_iter().filter_map(|(j, v)| self.col[j].map(|c| (c, v))).collect())
            .collect()
    }

    fn objective(&self, y: &[f64], mult: f64) -> (f64, Vec<f64>) {
        let (f, df) = self.nlp.objective(&self.expand(y));
        (f, self.free.iter().map(|&i| mult * df[i]).collect())
    }

    fn equalities(&self, y: &[f64]) -> (Vec<f64>, SparseRows) {
        let (g, dg) = self.nlp.equalities(&self.expand(y));
        (g, self.restrict_rows(dg))
    }

    fn inequalities(&self, y: &[f64]) -> (Vec<f64>, SparseRows) {
        let (mut h, dh) = self.nlp.inequalities(&self.expand(y));
        let mut dh = self.restrict_rows(dh);
        for &(c, b, upper) in &self.bound_rows {
            if upper {
                h.push(y[c] - b);
                dh.push(vec![(c, 1.0)]);
            } else {
                h.push(b - y[c]);
                dh.push(vec![(c, -1.0)]);
            }
        }
        (h, dh)
    }

    fn hessian(&self, y: &[f64], mult: f64, lam: &[f64], mu: &[f64]) -> Matrix {
        let full = self.nlp.hessian(&self.expand(y), mult, lam, &mu[..self.n_model_ineq]);
        let nf = self.free.len();
        Mat::from_fn(nf, nf, |r, c| full[(self.free[r], self.free[c])])
    }
}

fn rows_t_times(rows: &SparseRows, w: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (r, wi) in rows.iter().zip(w) {
        if *wi != 0.0 {
            for &(j, v) in r {
                out[j] += v * wi;
            }
        }
    }
    out
}

fn rows_times(rows: &SparseRows, x: &[f64]) -> Vec<f64> {
    rows.iter().map(|r| r.iter().map(|&(j, v)| v * x[j]).sum()).collect()
}

#[allow(clippy::too_many_arguments)]
fn conditions(g: &[f64], h: &[f64], lx: &[f64], lam: &[f64], mu: &[f64], z: &[f64], y: &[f64], f: f64, f_prev: f64) -> IpmIterate {
    let maxh = h.iter().copied().fold(0.0f64, f64::max);
    let feascond = norm_inf(g).max(maxh);
    let gradcond = norm_inf(lx) / (1.0 + norm_inf(lam).max(norm_inf(mu)));
    let zmu: f64 = z.iter().zip(mu).map(|(a, b)| a * b).sum();
    let compcond = zmu / (1.0 + norm_inf(y));
    let costcond = (f - f_prev).abs() / (1.0 + f_prev.abs());
    IpmIterate { objective: f, feascond, gradcond, compcond, costcond }
}

/// Solve the program from `x0`. Returns a report whether or not the
/// tolerances were met; only a failed factorization or a non-finite iterate
/// produce an error.
/// Solves the KKT system. Late iterations are badly conditioned by nature,
/// so only a non-finite solution counts as failure; then the primal block is
/// shifted by growing multiples of the identity (free directions without
/// curvature), and as a last resort the equality block as well (dependent
/// rows, at the price of inexact steps).
fn solve_kkt(kkt: &Matrix, nf: usize, rhs: &[f64]) -> Result<Vec<f64>> {
    let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
    let sol = DenseLu::factor_unchecked(kkt).solve_vec(rhs);
    if finite(&sol) {
        return Ok(sol);
    }
    let dim = kkt.nrows();
    let scale = (0..nf).map(|i| kkt[(i, i)].abs()).filter(|x| x.is_finite()).fold(1.0, f64::max);
    for dual in [false, true] {
        for exp in [-12, -10, -8, -6] {
            let delta = scale * 10f64.powi(exp);
            let mut k = kkt.clone();
            for i in 0..dim {
                if i < nf {
                    k[(i, i)] += delta;
                } else if dual {
                    k[(i, i)] -= delta;
                }
            }
            let sol = DenseLu::factor_unchecked(&k).solve_vec(rhs);
            if finite(&sol) {
                return Ok(sol);
            }
        }
    }
    Err(Error::Singular("interior-point KKT system is singular".into()))
}

pub fn solve_ipm<P: Nlp + ?Sized>(nlp: &P, x0: &[f64], warm: Option<&DualState>, opts: IpmOptions) -> Result<IpmReport> {
    let red = Reduced::new(nlp, x0);
    let nf = red.free.len();
    let mut y: Vec<f64> = red.free.iter().map(|&i| x0[i]).collect();
    // Cold starts begin strictly inside the variable bounds.
    let (lo, hi) = nlp.bounds();
    for (c, &i) in red.free.iter().enumerate().filter(|_| warm.is_none()) {
        let (l, u) = (lo[i], hi[i]);
        if l.is_finite() && u.is_finite() {
            let pad = (1e-4 * (u - l)).min(1e-2);
            y[c] = y[c].clamp(l + pad, u - pad);
        } else if l.is_finite() {
            y[c] = y[c].max(l + 1e-4);
        } else if u.is_finite() {
            y[c] = y[c].min(u - 1e-4);
        }
    }

    let mult = opts.cost_mult;
    let (mut f, mut df) = red.objective(&y, mult);
    let (mut g, mut dg) = red.equalities(&y);
    let (mut h, mut dh) = red.inequalities(&y);
    let neq = g.len();
    let niq = h.len();

    let z0 = 1.0;
    let (mut z, mut mu, mut lam, mut gamma);
    match warm {
        Some(d) if d.z.len() == niq && d.mu.len() == niq && d.lam.len() == neq => {
            z = d.z.iter().zip(&h).map(|(&zi, &hi)| zi.max(-hi).max(1e-12)).collect::<Vec<_>>();
            mu = d.mu.iter().map(|&m| m.max(1e-12)).collect::<Vec<_>>();
            lam = d.lam.clone();
            let zmu: f64 = z.iter().zip(&mu).map(|(a, b): (&f64, &f64)| a * b).sum();
            gamma = if niq > 0 { opts.centering * zmu / niq as f64 } else { 0.0 };
        }
        _ => {
            gamma = 1.0;
            z = h.iter().map(|&hi| if hi < -z0 { -hi } else { z0 }).collect();
            mu = z.iter().map(|&zi| if gamma / zi > z0 { gamma / zi } else { z0 }).collect();
            lam = vec![0.0; neq];
        }
    }

    let lagrangian_grad = |df: &[f64], dg: &SparseRows, dh: &SparseRows, lam: &[f64], mu: &[f64]| -> Vec<f64> {
        let a = rows_t_times(dg, lam, nf);
        let b = rows_t_times(dh, mu, nf);
        (0..nf).map(|i| df[i] + a[i] + b[i]).collect()
    };

    let mut lx = lagrangian_grad(&df, &dg, &dh, &lam, &mu);
    let mut cond = conditions(&g, &h, &lx, &lam, &mu, &z, &y, f * mult, f * mult);
    cond.costcond = f64::INFINITY;
    let mut history = vec![cond];
    let mut converged = cond.feascond < opts.feastol
        && cond.gradcond < opts.gradtol
        && cond.compcond < opts.comptol
        && warm.is_some();
    let mut iterations = 0;

    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let mut m = red.hessian(&y, mult, &lam, &mu);
        let mut nvec = lx.clone();
        for (r, row) in dh.iter().enumerate() {
            let w = mu[r] / z[r];
            let coef = (mu[r] * h[r] + gamma) / z[r];
            for &(i, vi) in row {
                nvec[i] += vi * coef;
                for &(j, vj) in row {
                    m[(i, j)] += w * vi * vj;
                }
            }
        }
        let dim = nf + neq;
        let mut kkt = Mat::<f64>::zeros(dim, dim);
        for i in 0..nf {
            for j in 0..nf {
                kkt[(i, j)] = m[(i, j)];
            }
        }
        for (r, row) in dg.iter().enumerate() {
            for &(j, v) in row {
                kkt[(nf + r, j)] += v;
                kkt[(j, nf + r)] += v;
            }
        }
        let mut rhs = vec![0.0; dim];
        for i in 0..nf {
            rhs[i] = -nvec[i];
        }
        for r in 0..neq {
            rhs[nf + r] = -g[r];
        }
        let sol = solve_kkt(&kkt, nf, &rhs)?;
        let dx = &sol[..nf];
        let dlam = &sol[nf..];
        let dh_dx = rows_times(&dh, dx);
        let dz: Vec<f64> = (0..niq).map(|r| -h[r] - z[r] - dh_dx[r]).collect();
        let dmu: Vec<f64> = (0..niq).map(|r| -mu[r] + (gamma - mu[r] * dz[r]) / z[r]).collect();

        let mut alpha_p = 1.0f64;
        let mut alpha_d = 1.0f64;
        for r in 0..niq {
            if dz[r] < 0.0 {
                alpha_p = alpha_p.min(opts.step_fraction * z[r] / -dz[r]);
            }
            if dmu[r] < 0.0 {
                alpha_d = alpha_d.min(opts.step_fraction * mu[r] / -dmu[r]);
            }
        }
        for i in 0..nf {
            y[i] += alpha_p * dx[i];
        }
        for r in 0..niq {
            z[r] += alpha_p * dz[r];
            mu[r] += alpha_d * dmu[r];
        }
        for r in 0..neq {
            lam[r] += alpha_d * dlam[r];
        }
        if niq > 0 {
            let zmu: f64 = z.iter().zip(&mu).map(|(a, b)| a * b).sum();
            // Floored so the barrier terms stay representable near the end.
            gamma = (opts.centering * zmu / niq as f64).max(1e-13);
        }

        let f_prev = f;
        (f, df) = red.objective(&y, mult);
        (g, dg) = red.equalities(&y);
        (h, dh) = red.inequalities(&y);
        lx = lagrangian_grad(&df, &dg, &dh, &lam, &mu);
        cond = conditions(&g, &h, &lx, &lam, &mu, &z, &y, f * mult, f_prev * mult);
        history.push(cond);
        log::trace!(
            "ipm it {iterations}: f={:.6e} feas={:.2e} grad={:.2e} comp={:.2e} cost={:.2e}",
            f,
            cond.feascond,
            cond.gradcond,
            cond.compcond,
            cond.costcond
        );
        if !y.iter().all(|v| v.is_finite()) || !f.is_finite() {
            return Err(Error::Solver(format!("interior-point iterate became non-finite at iteration {iterations}")));
        }
        converged = cond.feascond < opts.feastol
            && cond.gradcond < opts.gradtol
            && cond.compcond < opts.comptol
            && cond.costcond < opts.costtol;
    }

    let x = red.expand(&y);
    let n_model = red.n_model_ineq;
    Ok(IpmReport {
        x,
        objective: f,
        converged,
        iterations,
        last: cond,
        history,
        eq_multipliers: lam.clone(),
        ineq_multipliers: mu[..n_model].to_vec(),
        duals: DualState { z, mu, lam },
    })
}
