//! Augmented-Lagrangian solvers for the AC-OPF model and the load-flow
//! projection.

pub mod newton;
mod problem;

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::grid::Network;
use crate::powerflow::{LoadPoint, OperatingPoint, ThermalLimit};
use newton::{minimize_box, BoxObjective, NewtonOptions};
use problem::{AcProblem, Eval, Objective};

/// Equality residual (max-norm, p.u.) above which a failed solve is reported
/// as infeasible rather than out of iterations.
pub const INFEASIBLE_RESIDUAL: f64 = 1e-4;

const PENALTY_CAP: f64 = 1e9;
const ACTIVE_SET_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub feas_tol: f64,
    pub opt_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub penalty_init: f64,
    pub penalty_growth: f64,
    pub thermal: ThermalLimit,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            feas_tol: 1e-6,
            opt_tol: 1e-6,
            max_outer: 50,
            max_inner: 200,
            penalty_init: 10.0,
            penalty_growth: 10.0,
            thermal: ThermalLimit::Squared,
        }
    }
}

impl SolverConfig {
    pub fn check(&self) -> Result<(), String> {
        if !(self.feas_tol > 0.0 && self.opt_tol > 0.0) {
            return Err("solver tolerances must be positive".into());
        }
        if !(self.penalty_growth > 1.0) {
            return Err("penalty_growth must exceed 1".into());
        }
        if !(self.penalty_init > 0.0) {
            return Err("penalty_init must be positive".into());
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err("iteration limits must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::MaxIterations => "max_iterations",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutcome {
    pub status: SolveStatus,
    /// Present iff `status == Optimal`.
    pub solution: Option<OperatingPoint>,
    /// Final iterate regardless of status.
    pub last_point: OperatingPoint,
    /// Dispatch cost ($/h) for AC-OPF, squared distance for the projection.
    pub objective: f64,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    /// Max-norm of the balance residuals at the final iterate.
    pub max_residual: f64,
    pub wall_time: f64,
}

impl SolveOutcome {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

/// Solves the AC-OPF for one load snapshot.
pub fn solve_acopf(
    net: &Network,
    load: &LoadPoint,
    cfg: &SolverConfig,
    warm_start: Option<&OperatingPoint>,
) -> SolveOutcome {
    let scale = cost_scale(net);
    let prob = AcProblem::new(net, load, Objective::Cost { scale }, cfg.thermal);
    let start = match warm_start {
        Some(op) => op.clone(),
        None => flat_start(net, load),
    };
    let mut out = augmented_lagrangian(&prob, &start, cfg, warm_start.is_some());
    out.objective *= scale;
    out
}

/// Projects a predicted setpoint `(pg, v)` to the nearest AC-feasible point.
/// `start` seeds the angles and reactive dispatch (flat otherwise).
pub fn solve_loadflow(
    net: &Network,
    load: &LoadPoint,
    target_pg: &[f64],
    target_v: &[f64],
    cfg: &SolverConfig,
    start: Option<&OperatingPoint>,
) -> SolveOutcome {
    let objective = Objective::Distance { pg: target_pg.to_vec(), v: target_v.to_vec() };
    let prob = AcProblem::new(net, load, objective, cfg.thermal);
    let mut init = match start {
        Some(op) => op.clone(),
        None => OperatingPoint::flat(net),
    };
    init.v.copy_from_slice(target_v);
    init.pg.copy_from_slice(target_pg);
    augmented_lagrangian(&prob, &init, cfg, false)
}

/// Largest marginal cost over the generator ranges ($/h per p.u.), at least 1.
fn cost_scale(net: &Network) -> f64 {
    net.generators
        .iter()
        .map(|g| {
            let pmax_mw = g.p_max.abs() * net.base_mva;
            (2.0 * g.cost[0] * pmax_mw + g.cost[1].abs()) * net.base_mva
        })
        .fold(1.0, f64::max)
}

/// `v = 1`, `θ = 0`, `pg` at bound midpoints rescaled to total demand,
/// `qg = 0`, all clipped into bounds.
pub fn flat_start(net: &Network, load: &LoadPoint) -> OperatingPoint {
    let mut op = OperatingPoint::flat(net);
    let mids: Vec<f64> = net.generators.iter().map(|g| 0.5 * (g.p_min + g.p_max)).collect();
    let total_mid: f64 = mids.iter().sum();
    let demand = load.total_active();
    let k = if total_mid > 0.0 { demand / total_mid } else { 0.0 };
    for (i, b) in net.buses.iter().enumerate() {
        op.v[i] = 1.0f64.clamp(b.v_min, b.v_max);
    }
    for (j, g) in net.generators.iter().enumerate() {
        op.pg[j] = (mids[j] * k).clamp(g.p_min, g.p_max);
        op.qg[j] = 0.0f64.clamp(g.q_min, g.q_max);
    }
    op
}

struct Violation {
    eq: f64,
    ineq: f64,
}

impl Violation {
    fn of(ev: &Eval) -> Self {
        Violation { eq: ev.c.iter().fold(0.0, |m, c| m.max(c.abs())), ineq: ev.h.iter().fold(0.0, |m, &h| m.max(h)) }
    }

    fn max(&self) -> f64 {
        self.eq.max(self.ineq)
    }
}

/// Augmented Lagrangian at fixed multipliers and penalty.
struct AlFunction<'p, 'a> {
    prob: &'p AcProblem<'a>,
    ev: Eval,
    lam: Vec<f64>,
    nu: Vec<f64>,
    mu: f64,
    fgrad: Vec<f64>,
    wc: Vec<f64>,
    wh: Vec<f64>,
}

impl AlFunction<'_, '_> {
    /// Evaluates the function and fills the constraint weights `wc`, `wh`.
    fn eval_weights(&mut self, x: &[f64]) -> f64 {
        self.prob.evaluate(x, &mut self.ev);
        let mut phi = self.prob.objective(x, &mut self.fgrad);
        let mu = self.mu;
        for r in 0..self.lam.len() {
            let c = self.ev.c[r];
            phi += self.lam[r] * c + 0.5 * mu * c * c;
            self.wc[r] = self.lam[r] + mu * c;
        }
        for r in 0..self.nu.len() {
            let s = (self.nu[r] + mu * self.ev.h[r]).max(0.0);
            phi += (s * s - self.nu[r] * self.nu[r]) / (2.0 * mu);
            self.wh[r] = s;
        }
        phi
    }
}

impl BoxObjective for AlFunction<'_, '_> {
    fn value(&mut self, x: &[f64]) -> f64 {
        self.eval_weights(x)
    }

    fn value_grad_hess(&mut self, x: &[f64], grad: &mut [f64], hess: &mut DMatrix<f64>) -> f64 {
        let phi = self.eval_weights(x);
        grad.copy_from_slice(&self.fgrad);
        self.prob.adjoint(x, &self.ev, &self.wc, &self.wh, grad);
        self.prob.add_objective_hessian(hess);
        self.prob.add_constraint_hessian(&self.ev, &self.wc, &self.wh, hess);
        let ne = self.lam.len();
        for (r, row) in self.prob.jacobian(&self.ev).iter().enumerate() {
            if r >= ne && self.wh[r - ne] <= 0.0 {
                continue;
            }
            for &(a, va) in row {
                for &(b, vb) in row {
                    hess[(a, b)] += self.mu * va * vb;
                }
            }
        }
        phi
    }
}

fn augmented_lagrangian(prob: &AcProblem, start: &OperatingPoint, cfg: &SolverConfig, warm: bool) -> SolveOutcome {
    let clock = Instant::now();
    let (lo, hi) = prob.bounds();
    let mut x: Vec<f64> =
        prob.pack(start).into_iter().zip(lo.iter().zip(&hi)).map(|(v, (&l, &h))| v.clamp(l, h)).collect();
    let (ne, ni) = (prob.n_eq(), prob.n_ineq());
    let mut ev = prob.new_eval();
    prob.evaluate(&x, &mut ev);
    let (lam, nu) = if warm { estimate_multipliers(prob, &x, &ev, &lo, &hi) } else { (vec![0.0; ne], vec![0.0; ni]) };
    let mut al = AlFunction {
        prob,
        ev,
        lam,
        nu,
        mu: cfg.penalty_init,
        fgrad: vec![0.0; prob.n_vars()],
        wc: vec![0.0; ne],
        wh: vec![0.0; ni],
    };
    let mut prev_viol = Violation::of(&al.ev).max();
    let mut inner_total = 0;
    let mut outer = 0;
    let mut converged = false;

    while outer < cfg.max_outer {
        let omega = inner_tolerance(cfg.opt_tol, outer, warm);
        outer += 1;
        let opts = NewtonOptions { tol: omega, max_iter: cfg.max_inner, ..NewtonOptions::default() };
        let res = minimize_box(&mut al, &x, &lo, &hi, &opts);
        inner_total += res.iterations;
        x = res.x;
        prob.evaluate(&x, &mut al.ev);
        let viol = Violation::of(&al.ev);
        let mu = al.mu;
        for r in 0..ne {
            al.lam[r] += mu * al.ev.c[r];
        }
        for r in 0..ni {
            al.nu[r] = (al.nu[r] + mu * al.ev.h[r]).max(0.0);
        }
        log::trace!(
            "outer {outer}: mu={mu:e} eq={:e} ineq={:e} pg={:e} inner={}",
            viol.eq,
            viol.ineq,
            res.proj_grad_norm,
            res.iterations
        );
        if viol.max() <= cfg.feas_tol && res.converged && omega == cfg.opt_tol {
            converged = true;
            break;
        }
        if viol.max() > 0.25 * prev_viol && viol.max() > cfg.feas_tol {
            if mu >= PENALTY_CAP {
                break;
            }
            al.mu = (mu * cfg.penalty_growth).min(PENALTY_CAP);
        }
        prev_viol = viol.max();
    }

    let viol = Violation::of(&al.ev);
    let point = prob.unpack(&x);
    let objective = prob.objective(&x, &mut al.fgrad);
    let status = if converged {
        SolveStatus::Optimal
    } else if viol.eq > INFEASIBLE_RESIDUAL || viol.ineq > INFEASIBLE_RESIDUAL {
        SolveStatus::Infeasible
    } else {
        SolveStatus::MaxIterations
    };
    SolveOutcome {
        status,
        solution: converged.then(|| point.clone()),
        last_point: point,
        objective,
        outer_iterations: outer,
        inner_iterations: inner_total,
        max_residual: viol.eq,
        wall_time: clock.elapsed().as_secs_f64(),
    }
}

/// Inner stationarity target for outer round `k` (0-based): `0.1^(k+1)`
/// down to `opt_tol`, or `opt_tol` throughout on a warm start.
fn inner_tolerance(opt_tol: f64, k: usize, warm: bool) -> f64 {
    let loose = 0.1f64.powi(k as i32 + 1);
    if warm || loose <= opt_tol * (1.0 + 1e-9) {
        opt_tol
    } else {
        loose
    }
}

/// Least-squares first-order multipliers at `x`, restricted to variables off
/// their bounds and inequalities that are active.
fn estimate_multipliers(prob: &AcProblem, x: &[f64], ev: &Eval, lo: &[f64], hi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (ne, ni) = (prob.n_eq(), prob.n_ineq());
    let mut grad = vec![0.0; prob.n_vars()];
    prob.objective(x, &mut grad);
    let free: Vec<usize> =
        (0..x.len()).filter(|&i| x[i] > lo[i] + ACTIVE_SET_TOL && x[i] < hi[i] - ACTIVE_SET_TOL).collect();
    let active: Vec<usize> = (0..ni).filter(|&r| ev.h[r] > -ACTIVE_SET_TOL).collect();
    let mut rows = vec![vec![0.0; x.len()]; ne + ni];
    for (r, row) in prob.jacobian(ev).into_iter().enumerate() {
        for (k, v) in row {
            rows[r][k] += v;
        }
    }
    let m = ne + active.len();
    if free.is_empty() || m == 0 {
        return (vec![0.0; ne], vec![0.0; ni]);
    }
    let a = DMatrix::from_fn(free.len(), m, |i, k| {
        let row = if k < ne { &rows[k] } else { &rows[ne + active[k - ne]] };
        row[free[i]]
    });
    let b = DVector::from_iterator(free.len(), free.iter().map(|&i| -grad[i]));
    let sol = match a.svd(true, true).solve(&b, 1e-10) {
        Ok(s) => s,
        Err(_) => return (vec![0.0; ne], vec![0.0; ni]),
    };
    let lam = (0..ne).map(|k| sol[k]).collect();
    let mut nu = vec![0.0; ni];
    for (k, &r) in active.iter().enumerate() {
        nu[r] = sol[ne + k].max(0.0);
    }
    (lam, nu)
}
