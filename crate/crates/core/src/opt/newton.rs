//! Projected Newton method for smooth minimization over a box.
//!
//! Variables on a bound whose gradient points outward are held fixed; the
//! Newton system is solved on the rest with a diagonal shift whenever the
//! reduced Hessian is not positive definite. Steps are projected onto the box
//! and accepted by an Armijo backtracking test.

use nalgebra::{DMatrix, DVector};

pub trait BoxObjective {
    fn value(&mut self, x: &[f64]) -> f64;
    /// Returns `f(x)`, writing the gradient and (dense, symmetric) Hessian.
    fn value_grad_hess(&mut self, x: &[f64], grad: &mut [f64], hess: &mut DMatrix<f64>) -> f64;
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    /// Stop when `‖P(x − ∇f) − x‖∞` falls below this.
    pub tol: f64,
    pub max_iter: usize,
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions { tol: 1e-6, max_iter: 100, armijo: 1e-4, max_backtracks: 30 }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub proj_grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[inline]
fn project(x: f64, lo: f64, hi: f64) -> f64 {
    x.max(lo).min(hi)
}

pub fn proj_grad_norm(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    let mut m = 0.0f64;
    for i in 0..x.len() {
        m = m.max((project(x[i] - g[i], lo[i], hi[i]) - x[i]).abs());
    }
    m
}

pub fn minimize_box<P: BoxObjective>(
    obj: &mut P,
    x0: &[f64],
    lo: &[f64],
    hi: &[f64],
    opts: &NewtonOptions,
) -> NewtonResult {
    let n = x0.len();
    let mut x: Vec<f64> = (0..n).map(|i| project(x0[i], lo[i], hi[i])).collect();
    let mut g = vec![0.0; n];
    let mut hess = DMatrix::zeros(n, n);
    let mut x_new = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut f;
    let mut pg = f64::INFINITY;
    let mut iterations = 0;

    loop {
        hess.fill(0.0);
        f = obj.value_grad_hess(&x, &mut g, &mut hess);
        if !f.is_finite() {
            break;
        }
        pg = proj_grad_norm(&x, &g, lo, hi);
        if pg <= opts.tol || iterations >= opts.max_iter {
            break;
        }
        iterations += 1;

        box_newton_step(&hess, &g, &x, lo, hi, &mut d);
        let mut slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if !(slope < 0.0) {
            // Scaled projected-gradient fallback.
            for i in 0..n {
                let hii = hess[(i, i)];
                let t = x[i] - g[i] / if hii > 1e-12 { hii } else { 1.0 };
                d[i] = project(t, lo[i], hi[i]) - x[i];
            }
            slope = d.iter().zip(&g).map(|(a, b)| a * b).sum();
            if !(slope < 0.0) {
                break;
            }
        }

        // x + αd stays inside the box for α ∈ [0, 1].
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..opts.max_backtracks {
            for i in 0..n {
                x_new[i] = project(x[i] + step * d[i], lo[i], hi[i]);
            }
            let f_new = obj.value(&x_new);
            if f_new.is_finite() && f_new <= f + opts.armijo * step * slope {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        std::mem::swap(&mut x, &mut x_new);
    }
    NewtonResult { x, f, proj_grad_norm: pg, iterations, converged: pg <= opts.tol }
}

const MAX_ACTIVE_SET_ROUNDS: usize = 30;

#[derive(Clone, Copy, PartialEq)]
enum Side {
    Free,
    Lower,
    Upper,
}

/// Minimizes the model `gᵀd + ½dᵀHd` subject to `lo ≤ x + d ≤ hi` with a
/// primal-dual active-set iteration, writing the step into `d`.
fn box_newton_step(hess: &DMatrix<f64>, g: &[f64], x: &[f64], lo: &[f64], hi: &[f64], d: &mut [f64]) {
    let n = x.len();
    let scale: Vec<f64> = (0..n).map(|i| hess[(i, i)].max(1e-12)).collect();
    let mut lam: Vec<f64> = g.iter().map(|v| -v).collect();
    d.iter_mut().for_each(|v| *v = 0.0);
    let mut sides = vec![Side::Free; n];
    for round in 0..MAX_ACTIVE_SET_ROUNDS {
        let mut changed = round == 0;
        for i in 0..n {
            let (l, u) = (lo[i] - x[i], hi[i] - x[i]);
            let side = if lam[i] + scale[i] * (d[i] - u) > 0.0 {
                Side::Upper
            } else if lam[i] + scale[i] * (d[i] - l) < 0.0 {
                Side::Lower
            } else {
                Side::Free
            };
            if side != sides[i] {
                sides[i] = side;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for i in 0..n {
            match sides[i] {
                Side::Upper => d[i] = hi[i] - x[i],
                Side::Lower => d[i] = lo[i] - x[i],
                Side::Free => {}
            }
        }
        let free: Vec<usize> = (0..n).filter(|&i| sides[i] == Side::Free).collect();
        if !free.is_empty() {
            let fixed: Vec<usize> = (0..n).filter(|&i| sides[i] != Side::Free).collect();
            let rhs: Vec<f64> =
                free.iter().map(|&i| -g[i] - fixed.iter().map(|&j| hess[(i, j)] * d[j]).sum::<f64>()).collect();
            let sol = solve_shifted(hess, &free, &rhs);
            for (k, &i) in free.iter().enumerate() {
                d[i] = sol[k];
            }
        }
        for i in 0..n {
            lam[i] = match sides[i] {
                Side::Free => 0.0,
                _ => -(g[i] + (0..n).map(|j| hess[(i, j)] * d[j]).sum::<f64>()),
            };
        }
    }
    for i in 0..n {
        d[i] = project(x[i] + d[i], lo[i], hi[i]) - x[i];
    }
}

/// Solves `(H_FF + τI) y = rhs`, raising `τ` until the Cholesky factorization
/// succeeds.
fn solve_shifted(hess: &DMatrix<f64>, free: &[usize], rhs: &[f64]) -> Vec<f64> {
    let m = free.len();
    let sub = DMatrix::from_fn(m, m, |a, b| hess[(free[a], free[b])]);
    let rhs = DVector::from_column_slice(rhs);
    let diag_max = (0..m).map(|a| sub[(a, a)].abs()).fold(0.0, f64::max);
    let mut tau = 0.0;
    for _ in 0..40 {
        let mut shifted = sub.clone();
        for a in 0..m {
            shifted[(a, a)] += tau;
        }
        if let Some(ch) = shifted.cholesky() {
            return ch.solve(&rhs).iter().copied().collect();
        }
        tau = if tau == 0.0 { 1e-10 * diag_max.max(1.0) } else { tau * 10.0 };
    }
    rhs.iter().map(|v| v / diag_max.max(1.0)).collect()
}
