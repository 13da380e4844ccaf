//! Nonlinear program view of the AC-OPF constraints over the decision vector
//! `x = [v (all buses) | θ (non-reference buses) | pg | qg]`.

use nalgebra::DMatrix;

use crate::grid::{Network, UNLIMITED_ANGLE};
use crate::powerflow::{
    dispatch_cost, dispatch_cost_grad, line_flow_partials, FlowPartials, LoadPoint, OperatingPoint, ThermalLimit,
};

#[derive(Debug, Clone)]
pub(crate) enum Objective {
    /// Dispatch cost divided by `scale`.
    Cost { scale: f64 },
    /// `‖pg − pg_t‖² + ‖v − v_t‖²`.
    Distance { pg: Vec<f64>, v: Vec<f64> },
}

#[derive(Debug, Clone, Copy)]
enum Ineq {
    AngleUpper(usize),
    AngleLower(usize),
    /// Directed flow index and its cap.
    Thermal(usize, f64),
}

pub(crate) struct AcProblem<'a> {
    pub net: &'a Network,
    pub load: &'a LoadPoint,
    pub objective: Objective,
    n_bus: usize,
    n_gen: usize,
    ref_bus: usize,
    ineqs: Vec<Ineq>,
}

/// Scratch values shared by the constraint and adjoint passes.
pub(crate) struct Eval {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub partials: Vec<FlowPartials>,
    /// `[rp; rq]`.
    pub c: Vec<f64>,
    pub h: Vec<f64>,
}

impl<'a> AcProblem<'a> {
    pub fn new(net: &'a Network, load: &'a LoadPoint, objective: Objective, thermal: ThermalLimit) -> Self {
        let mut ineqs = Vec::new();
        for (k, br) in net.branches.iter().enumerate() {
            if br.theta_delta < UNLIMITED_ANGLE {
                ineqs.push(Ineq::AngleUpper(k));
                ineqs.push(Ineq::AngleLower(k));
            }
        }
        for (k, br) in net.branches.iter().enumerate() {
            if let Some(s) = br.s_max {
                let cap = thermal.cap(s);
                ineqs.push(Ineq::Thermal(2 * k, cap));
                ineqs.push(Ineq::Thermal(2 * k + 1, cap));
            }
        }
        AcProblem { net, load, objective, n_bus: net.n_bus(), n_gen: net.n_gen(), ref_bus: net.reference_bus(), ineqs }
    }

    pub fn n_vars(&self) -> usize {
        2 * self.n_bus - 1 + 2 * self.n_gen
    }

    pub fn n_eq(&self) -> usize {
        2 * self.n_bus
    }

    pub fn n_ineq(&self) -> usize {
        self.ineqs.len()
    }

    fn theta_offset(&self) -> usize {
        self.n_bus
    }

    fn pg_offset(&self) -> usize {
        2 * self.n_bus - 1
    }

    fn qg_offset(&self) -> usize {
        2 * self.n_bus - 1 + self.n_gen
    }

    fn theta_slot(&self, bus: usize) -> Option<usize> {
        use std::cmp::Ordering::*;
        match bus.cmp(&self.ref_bus) {
            Less => Some(self.theta_offset() + bus),
            Equal => None,
            Greater => Some(self.theta_offset() + bus - 1),
        }
    }

    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.n_vars();
        let mut lo = vec![f64::NEG_INFINITY; n];
        let mut hi = vec![f64::INFINITY; n];
        for (i, b) in self.net.buses.iter().enumerate() {
            lo[i] = b.v_min;
            hi[i] = b.v_max;
        }
        for (k, g) in self.net.generators.iter().enumerate() {
            lo[self.pg_offset() + k] = g.p_min;
            hi[self.pg_offset() + k] = g.p_max;
            lo[self.qg_offset() + k] = g.q_min;
            hi[self.qg_offset() + k] = g.q_max;
        }
        (lo, hi)
    }

    pub fn pack(&self, op: &OperatingPoint) -> Vec<f64> {
        let mut x = vec![0.0; self.n_vars()];
        x[..self.n_bus].copy_from_slice(&op.v);
        for i in 0..self.n_bus {
            if let Some(s) = self.theta_slot(i) {
                x[s] = op.theta[i] - op.theta[self.ref_bus];
            }
        }
        let (pg, qg) = (self.pg_offset(), self.qg_offset());
        x[pg..pg + self.n_gen].copy_from_slice(&op.pg);
        x[qg..qg + self.n_gen].copy_from_slice(&op.qg);
        x
    }

    pub fn unpack(&self, x: &[f64]) -> OperatingPoint {
        let (pg, qg) = (self.pg_offset(), self.qg_offset());
        OperatingPoint {
            v: x[..self.n_bus].to_vec(),
            theta: self.full_theta(x),
            pg: x[pg..pg + self.n_gen].to_vec(),
            qg: x[qg..qg + self.n_gen].to_vec(),
        }
    }

    fn full_theta(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_bus).map(|i| self.theta_slot(i).map_or(0.0, |s| x[s])).collect()
    }

    pub fn new_eval(&self) -> Eval {
        Eval {
            v: vec![0.0; self.n_bus],
            theta: vec![0.0; self.n_bus],
            partials: vec![FlowPartials::default(); 2 * self.net.n_branch()],
            c: vec![0.0; self.n_eq()],
            h: vec![0.0; self.n_ineq()],
        }
    }

    /// Flows, balance residuals and inequality values at `x`.
    pub fn evaluate(&self, x: &[f64], ev: &mut Eval) {
        let n = self.n_bus;
        for i in 0..n {
            ev.theta[i] = self.theta_slot(i).map_or(0.0, |s| x[s]);
        }
        ev.v.copy_from_slice(&x[..n]);
        let v = &ev.v;
        for (k, br) in self.net.branches.iter().enumerate() {
            let (i, j) = (br.from_bus, br.to_bus);
            ev.partials[2 * k] = line_flow_partials(v[i], v[j], ev.theta[i], ev.theta[j], br.g, br.b);
            ev.partials[2 * k + 1] = line_flow_partials(v[j], v[i], ev.theta[j], ev.theta[i], br.g, br.b);
        }
        ev.c.iter_mut().for_each(|c| *c = 0.0);
        let (rp, rq) = ev.c.split_at_mut(n);
        for (k, g) in self.net.generators.iter().enumerate() {
            rp[g.bus] += x[self.pg_offset() + k];
            rq[g.bus] += x[self.qg_offset() + k];
        }
        for (k, l) in self.net.loads.iter().enumerate() {
            rp[l.bus] -= self.load.p[k];
            rq[l.bus] -= self.load.q[k];
        }
        for (k, br) in self.net.branches.iter().enumerate() {
            let (f, t) = (&ev.partials[2 * k], &ev.partials[2 * k + 1]);
            rp[br.from_bus] -= f.p;
            rq[br.from_bus] -= f.q;
            rp[br.to_bus] -= t.p;
            rq[br.to_bus] -= t.q;
        }
        for (r, ineq) in self.ineqs.iter().enumerate() {
            ev.h[r] = match *ineq {
                Ineq::AngleUpper(k) => {
                    let br = &self.net.branches[k];
                    ev.theta[br.from_bus] - ev.theta[br.to_bus] - br.theta_delta
                }
                Ineq::AngleLower(k) => {
                    let br = &self.net.branches[k];
                    ev.theta[br.to_bus] - ev.theta[br.from_bus] - br.theta_delta
                }
                Ineq::Thermal(d, cap) => {
                    let fp = &ev.partials[d];
                    fp.p * fp.p + fp.q * fp.q - cap
                }
            };
        }
    }

    pub fn objective(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        match &self.objective {
            Objective::Cost { scale } => {
                let off = self.pg_offset();
                let pg = &x[off..off + self.n_gen];
                dispatch_cost_grad(self.net, pg, &mut grad[off..off + self.n_gen]);
                for g in &mut grad[off..off + self.n_gen] {
                    *g /= scale;
                }
                dispatch_cost(self.net, pg) / scale
            }
            Objective::Distance { pg, v } => {
                let mut f = 0.0;
                for i in 0..self.n_bus {
                    let d = x[i] - v[i];
                    f += d * d;
                    grad[i] = 2.0 * d;
                }
                let off = self.pg_offset();
                for k in 0..self.n_gen {
                    let d = x[off + k] - pg[k];
                    f += d * d;
                    grad[off + k] = 2.0 * d;
                }
                f
            }
        }
    }

    /// Accumulates `Σ wc·∇c + Σ wh·∇h` into `grad`.
    pub fn adjoint(&self, x: &[f64], ev: &Eval, wc: &[f64], wh: &[f64], grad: &mut [f64]) {
        let n = self.n_bus;
        let _ = x;
        let (wp, wq) = wc.split_at(n);
        for (k, g) in self.net.generators.iter().enumerate() {
            grad[self.pg_offset() + k] += wp[g.bus];
            grad[self.qg_offset() + k] += wq[g.bus];
        }
        let mut gtheta = vec![0.0; n];
        let mut ap = vec![0.0; ev.partials.len()];
        let mut aq = vec![0.0; ev.partials.len()];
        for (k, br) in self.net.branches.iter().enumerate() {
            ap[2 * k] = -wp[br.from_bus];
            aq[2 * k] = -wq[br.from_bus];
            ap[2 * k + 1] = -wp[br.to_bus];
            aq[2 * k + 1] = -wq[br.to_bus];
        }
        for (r, ineq) in self.ineqs.iter().enumerate() {
            let w = wh[r];
            if w == 0.0 {
                continue;
            }
            match *ineq {
                Ineq::AngleUpper(k) => {
                    let br = &self.net.branches[k];
                    gtheta[br.from_bus] += w;
                    gtheta[br.to_bus] -= w;
                }
                Ineq::AngleLower(k) => {
                    let br = &self.net.branches[k];
                    gtheta[br.from_bus] -= w;
                    gtheta[br.to_bus] += w;
                }
                Ineq::Thermal(d, _) => {
                    ap[d] += 2.0 * w * ev.partials[d].p;
                    aq[d] += 2.0 * w * ev.partials[d].q;
                }
            }
        }
        for (k, br) in self.net.branches.iter().enumerate() {
            for (d, i, j) in [(2 * k, br.from_bus, br.to_bus), (2 * k + 1, br.to_bus, br.from_bus)] {
                let fp = &ev.partials[d];
                let (a, b) = (ap[d], aq[d]);
                grad[i] += a * fp.dp_dvi + b * fp.dq_dvi;
                grad[j] += a * fp.dp_dvj + b * fp.dq_dvj;
                let dt = a * fp.dp_dti + b * fp.dq_dti;
                gtheta[i] += dt;
                gtheta[j] -= dt;
            }
        }
        for (i, gt) in gtheta.into_iter().enumerate() {
            if let Some(s) = self.theta_slot(i) {
                grad[s] += gt;
            }
        }
    }

    /// Sparse constraint Jacobian rows (equalities first, then inequalities).
    /// Rows may repeat an index; entries are meant to be summed.
    pub fn jacobian(&self, ev: &Eval) -> Vec<SparseRow> {
        let n = self.n_bus;
        let mut rows: Vec<SparseRow> = vec![Vec::new(); self.n_eq()];
        for (k, g) in self.net.generators.iter().enumerate() {
            rows[g.bus].push((self.pg_offset() + k, 1.0));
            rows[n + g.bus].push((self.qg_offset() + k, 1.0));
        }
        for (k, br) in self.net.branches.iter().enumerate() {
            for (d, i, j) in [(2 * k, br.from_bus, br.to_bus), (2 * k + 1, br.to_bus, br.from_bus)] {
                let fp = &ev.partials[d];
                self.push_flow_row(&mut rows[i], i, j, -1.0, [fp.dp_dvi, fp.dp_dvj, fp.dp_dti]);
                self.push_flow_row(&mut rows[n + i], i, j, -1.0, [fp.dq_dvi, fp.dq_dvj, fp.dq_dti]);
            }
        }
        for ineq in &self.ineqs {
            let mut row = Vec::new();
            match *ineq {
                Ineq::AngleUpper(k) | Ineq::AngleLower(k) => {
                    let br = &self.net.branches[k];
                    let sign = if matches!(ineq, Ineq::AngleUpper(_)) { 1.0 } else { -1.0 };
                    if let Some(s) = self.theta_slot(br.from_bus) {
                        row.push((s, sign));
                    }
                    if let Some(s) = self.theta_slot(br.to_bus) {
                        row.push((s, -sign));
                    }
                }
                Ineq::Thermal(d, _) => {
                    let br = &self.net.branches[d / 2];
                    let (i, j) = if d % 2 == 0 { (br.from_bus, br.to_bus) } else { (br.to_bus, br.from_bus) };
                    let fp = &ev.partials[d];
                    let grad = [
                        2.0 * (fp.p * fp.dp_dvi + fp.q * fp.dq_dvi),
                        2.0 * (fp.p * fp.dp_dvj + fp.q * fp.dq_dvj),
                        2.0 * (fp.p * fp.dp_dti + fp.q * fp.dq_dti),
                    ];
                    self.push_flow_row(&mut row, i, j, 1.0, grad);
                }
            }
            rows.push(row);
        }
        rows
    }

    /// Appends `scale·grad` given in local `(v_i, v_j, Δθ)` coordinates.
    fn push_flow_row(&self, row: &mut SparseRow, i: usize, j: usize, scale: f64, grad: [f64; 3]) {
        for (slot, sign, u) in self.local_slots(i, j) {
            if let Some(s) = slot {
                row.push((s, scale * sign * grad[u]));
            }
        }
    }

    /// Variable slots touched by a flow from `i` to `j`, each with the sign
    /// and index of the local coordinate `(v_i, v_j, Δθ)` it maps to.
    fn local_slots(&self, i: usize, j: usize) -> [(Option<usize>, f64, usize); 4] {
        [(Some(i), 1.0, 0), (Some(j), 1.0, 1), (self.theta_slot(i), 1.0, 2), (self.theta_slot(j), -1.0, 2)]
    }

    /// Adds the objective Hessian (diagonal) to `hess`.
    pub fn add_objective_hessian(&self, hess: &mut DMatrix<f64>) {
        match &self.objective {
            Objective::Cost { scale } => {
                let base = self.net.base_mva;
                for (k, g) in self.net.generators.iter().enumerate() {
                    let s = self.pg_offset() + k;
                    hess[(s, s)] += 2.0 * g.cost[0] * base * base / scale;
                }
            }
            Objective::Distance { .. } => {
                for i in 0..self.n_bus {
                    hess[(i, i)] += 2.0;
                }
                for k in 0..self.n_gen {
                    let s = self.pg_offset() + k;
                    hess[(s, s)] += 2.0;
                }
            }
        }
    }

    /// Adds `Σ wc·∇²c + Σ wh·∇²h` to `hess`.
    pub fn add_constraint_hessian(&self, ev: &Eval, wc: &[f64], wh: &[f64], hess: &mut DMatrix<f64>) {
        let n = self.n_bus;
        let (wp, wq) = wc.split_at(n);
        let mut thermal_w = vec![0.0; ev.partials.len()];
        for (r, ineq) in self.ineqs.iter().enumerate() {
            if let Ineq::Thermal(d, _) = *ineq {
                thermal_w[d] += wh[r];
            }
        }
        for (k, br) in self.net.branches.iter().enumerate() {
            for (d, i, j) in [(2 * k, br.from_bus, br.to_bus), (2 * k + 1, br.to_bus, br.from_bus)] {
                let fp = &ev.partials[d];
                let wt = thermal_w[d];
                let ap = -wp[i] + 2.0 * wt * fp.p;
                let aq = -wq[i] + 2.0 * wt * fp.q;
                if ap == 0.0 && aq == 0.0 && wt == 0.0 {
                    continue;
                }
                let (vi, vj) = (ev.v[i], ev.v[j]);
                let (s, c) = (ev.theta[i] - ev.theta[j]).sin_cos();
                let (g, b) = (br.g, br.b);
                let a = b * s + g * c;
                let bb = g * s - b * c;
                let hp = [[2.0 * g, -a, vj * bb], [-a, 0.0, vi * bb], [vj * bb, vi * bb, vi * vj * a]];
                let hq = [[-2.0 * b, -bb, -vj * a], [-bb, 0.0, -vi * a], [-vj * a, -vi * a, vi * vj * bb]];
                let gp = [fp.dp_dvi, fp.dp_dvj, fp.dp_dti];
                let gq = [fp.dq_dvi, fp.dq_dvj, fp.dq_dti];
                let mut m = [[0.0; 3]; 3];
                for u in 0..3 {
                    for w in 0..3 {
                        m[u][w] = ap * hp[u][w] + aq * hq[u][w] + 2.0 * wt * (gp[u] * gp[w] + gq[u] * gq[w]);
                    }
                }
                let slots = self.local_slots(i, j);
                for &(sa, sign_a, ua) in &slots {
                    let Some(sa) = sa else { continue };
                    for &(sb, sign_b, ub) in &slots {
                        let Some(sb) = sb else { continue };
                        hess[(sa, sb)] += sign_a * sign_b * m[ua][ub];
                    }
                }
            }
        }
    }
}

/// `(variable index, value)` pairs of one constraint gradient.
pub(crate) type SparseRow = Vec<(usize, f64)>;
