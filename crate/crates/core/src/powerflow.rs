//! Branch flows, bus balance residuals, dispatch cost and constraint
//! violation degrees for the AC optimal power flow model.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::grid::Network;

/// Satisfaction tolerance (p.u.) used when counting satisfied constraints.
pub const TAU_SAT: f64 = 1e-6;

/// A load snapshot: active and reactive demand per load, in p.u.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadPoint {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl LoadPoint {
    pub fn nominal(net: &Network) -> Self {
        let (p, q) = net.nominal_load();
        LoadPoint { p, q }
    }

    /// Input vector layout used by the learning code: `[p..., q...]`.
    pub fn to_features(&self) -> Vec<f64> {
        self.p.iter().chain(self.q.iter()).copied().collect()
    }

    pub fn from_features(x: &[f64]) -> Self {
        let n = x.len() / 2;
        LoadPoint { p: x[..n].to_vec(), q: x[n..].to_vec() }
    }

    pub fn matches(&self, net: &Network) -> bool {
        self.p.len() == net.n_load() && self.q.len() == net.n_load()
    }

    pub fn total_active(&self) -> f64 {
        self.p.iter().sum()
    }
}

/// Voltages, angles and dispatch for one operating point. Angles are given
/// for every bus including the reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub pg: Vec<f64>,
    pub qg: Vec<f64>,
}

impl OperatingPoint {
    pub fn flat(net: &Network) -> Self {
        OperatingPoint {
            v: vec![1.0; net.n_bus()],
            theta: vec![0.0; net.n_bus()],
            pg: vec![0.0; net.n_gen()],
            qg: vec![0.0; net.n_gen()],
        }
    }

    pub fn matches(&self, net: &Network) -> bool {
        self.v.len() == net.n_bus()
            && self.theta.len() == net.n_bus()
            && self.pg.len() == net.n_gen()
            && self.qg.len() == net.n_gen()
    }

    pub fn is_finite(&self) -> bool {
        self.v.iter().chain(&self.theta).chain(&self.pg).chain(&self.qg).all(|x| x.is_finite())
    }
}

/// Directed flows: entry `2k` is branch `k` from→to, entry `2k + 1` to→from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSet {
    pub pf: Vec<f64>,
    pub qf: Vec<f64>,
}

/// Directed flow `(p, q)` leaving bus i towards bus j over a series admittance `g + jb`.
#[inline]
pub fn line_flow(vi: f64, vj: f64, ti: f64, tj: f64, g: f64, b: f64) -> (f64, f64) {
    let d = ti - tj;
    let (s, c) = d.sin_cos();
    let (vv, v2) = (vi * vj, vi * vi);
    let p = g * v2 - vv * (b * s + g * c);
    let q = -b * v2 - vv * (g * s - b * c);
    (p, q)
}

/// Partial derivatives of a directed flow with respect to `(vi, vj, ti)`;
/// the derivative with respect to `tj` is the negation of the `ti` entry.
#[derive(Debug, Clone, Copy, Default)]
pub struct FlowPartials {
    pub p: f64,
    pub q: f64,
    pub dp_dvi: f64,
    pub dp_dvj: f64,
    pub dp_dti: f64,
    pub dq_dvi: f64,
    pub dq_dvj: f64,
    pub dq_dti: f64,
}

#[inline]
pub fn line_flow_partials(vi: f64, vj: f64, ti: f64, tj: f64, g: f64, b: f64) -> FlowPartials {
    let d = ti - tj;
    let (s, c) = d.sin_cos();
    let vv = vi * vj;
    let bs_gc = b * s + g * c;
    let gs_bc = g * s - b * c;
    FlowPartials {
        p: g * (vi * vi) - vv * bs_gc,
        q: -b * (vi * vi) - vv * gs_bc,
        dp_dvi: 2.0 * g * vi - vj * bs_gc,
        dp_dvj: -vi * bs_gc,
        dp_dti: -vv * (b * c - g * s),
        dq_dvi: -2.0 * b * vi - vj * gs_bc,
        dq_dvj: -vi * gs_bc,
        dq_dti: -vv * (g * c + b * s),
    }
}

pub fn all_flows(net: &Network, op: &OperatingPoint) -> FlowSet {
    let m = net.n_branch();
    let mut pf = Vec::with_capacity(2 * m);
    let mut qf = Vec::with_capacity(2 * m);
    for br in &net.branches {
        let (i, j) = (br.from_bus, br.to_bus);
        let (p, q) = line_flow(op.v[i], op.v[j], op.theta[i], op.theta[j], br.g, br.b);
        pf.push(p);
        qf.push(q);
        let (p, q) = line_flow(op.v[j], op.v[i], op.theta[j], op.theta[i], br.g, br.b);
        pf.push(p);
        qf.push(q);
    }
    FlowSet { pf, qf }
}

/// Signed bus balance residuals `Σ gen − demand − Σ outgoing flow`.
pub fn balance_residuals(
    net: &Network,
    load: &LoadPoint,
    op: &OperatingPoint,
    flows: &FlowSet,
) -> (Vec<f64>, Vec<f64>) {
    let n = net.n_bus();
    let mut rp = vec![0.0; n];
    let mut rq = vec![0.0; n];
    for (k, gen) in net.generators.iter().enumerate() {
        rp[gen.bus] += op.pg[k];
        rq[gen.bus] += op.qg[k];
    }
    for (k, l) in net.loads.iter().enumerate() {
        rp[l.bus] -= load.p[k];
        rq[l.bus] -= load.q[k];
    }
    for (k, br) in net.branches.iter().enumerate() {
        rp[br.from_bus] -= flows.pf[2 * k];
        rq[br.from_bus] -= flows.qf[2 * k];
        rp[br.to_bus] -= flows.pf[2 * k + 1];
        rq[br.to_bus] -= flows.qf[2 * k + 1];
    }
    (rp, rq)
}

/// Violation degree of an inequality with satisfiability degree `sigma`.
#[inline]
pub fn violation_degree_ineq(sigma: f64) -> f64 {
    sigma.max(0.0)
}

/// Violation degree of an equality with satisfiability degree `sigma`.
#[inline]
pub fn violation_degree_eq(sigma: f64) -> f64 {
    sigma.abs()
}

/// Violation of a two-sided bound `lo <= x <= hi`.
#[inline]
pub fn bound_violation(x: f64, lo: f64, hi: f64) -> f64 {
    violation_degree_ineq(lo - x) + violation_degree_ineq(x - hi)
}

/// How the branch rating enters the thermal constraint `p² + q² <= cap`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThermalLimit {
    /// `cap = s_max²` (MVA rating).
    #[default]
    Squared,
    /// `cap = s_max`, the rating compared against squared flow as printed.
    Literal,
}

impl ThermalLimit {
    #[inline]
    pub fn cap(self, s_max: f64) -> f64 {
        match self {
            ThermalLimit::Squared => s_max * s_max,
            ThermalLimit::Literal => s_max,
        }
    }
}

impl FromStr for ThermalLimit {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "squared" => Ok(ThermalLimit::Squared),
            "literal" => Ok(ThermalLimit::Literal),
            _ => Err(format!("unknown thermal limit mode `{s}`")),
        }
    }
}

/// Constraint families of the AC-OPF model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Family {
    /// Voltage magnitude bounds.
    #[serde(rename = "2a")]
    Voltage,
    /// Angle-difference bounds.
    #[serde(rename = "2b")]
    AngleDiff,
    /// Active generation bounds.
    #[serde(rename = "3a")]
    ActiveGen,
    /// Reactive generation bounds.
    #[serde(rename = "3b")]
    ReactiveGen,
    /// Branch thermal limits.
    #[serde(rename = "4")]
    Thermal,
    /// Active power balance.
    #[serde(rename = "6a")]
    ActiveBalance,
    /// Reactive power balance.
    #[serde(rename = "6b")]
    ReactiveBalance,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::Voltage,
        Family::AngleDiff,
        Family::ActiveGen,
        Family::ReactiveGen,
        Family::Thermal,
        Family::ActiveBalance,
        Family::ReactiveBalance,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Family::Voltage => "2a",
            Family::AngleDiff => "2b",
            Family::ActiveGen => "3a",
            Family::ReactiveGen => "3b",
            Family::Thermal => "4",
            Family::ActiveBalance => "6a",
            Family::ReactiveBalance => "6b",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_equality(self) -> bool {
        matches!(self, Family::ActiveBalance | Family::ReactiveBalance)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Family {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::ALL.into_iter().find(|f| f.label() == s).ok_or_else(|| format!("unknown constraint family `{s}`"))
    }
}

/// Violations of one constraint family.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilyViolations {
    pub family: Family,
    /// Violation degree of every member constraint (p.u., p.u.² for thermal).
    pub values: Vec<f64>,
}

impl FamilyViolations {
    /// Mean violation over the family (0 for an empty family).
    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.values.iter().sum::<f64>() / self.values.len() as f64
        }
    }

    pub fn n_total(&self) -> usize {
        self.values.len()
    }

    pub fn n_satisfied(&self) -> usize {
        self.values.iter().filter(|&&v| v <= TAU_SAT).count()
    }

    pub fn satisfied(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v <= TAU_SAT).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViolationReport {
    pub families: Vec<FamilyViolations>,
}

impl ViolationReport {
    pub fn family(&self, f: Family) -> &FamilyViolations {
        &self.families[f.index()]
    }

    pub fn mean(&self, f: Family) -> f64 {
        self.family(f).mean()
    }

    /// Largest family mean.
    pub fn worst_mean(&self) -> f64 {
        self.families.iter().map(|f| f.mean()).fold(0.0, f64::max)
    }

    /// Largest single-constraint violation over all families.
    pub fn max_violation(&self) -> f64 {
        self.families.iter().flat_map(|f| f.values.iter().copied()).fold(0.0, f64::max)
    }

    pub fn all_within(&self, tol: f64) -> bool {
        self.families.iter().all(|f| f.mean() <= tol)
    }

    /// CSV rows `instance_id,family,mean_violation,n_satisfied,n_total`.
    pub fn write_csv_rows<W: std::io::Write>(&self, instance_id: &str, w: &mut W) -> std::io::Result<()> {
        for f in &self.families {
            writeln!(w, "{},{},{:e},{},{}", instance_id, f.family, f.mean(), f.n_satisfied(), f.n_total())?;
        }
        Ok(())
    }
}

pub const VIOLATION_CSV_HEADER: &str = "instance_id,family,mean_violation,n_satisfied,n_total";

pub fn violation_report(net: &Network, load: &LoadPoint, op: &OperatingPoint) -> ViolationReport {
    violation_report_with(net, load, op, ThermalLimit::default())
}

pub fn violation_report_with(
    net: &Network,
    load: &LoadPoint,
    op: &OperatingPoint,
    thermal: ThermalLimit,
) -> ViolationReport {
    let flows = all_flows(net, op);
    let (rp, rq) = balance_residuals(net, load, op, &flows);

    let voltage = net.buses.iter().zip(&op.v).map(|(b, &v)| bound_violation(v, b.v_min, b.v_max)).collect();
    let angle = net
        .branches
        .iter()
        .map(|br| {
            let d = op.theta[br.from_bus] - op.theta[br.to_bus];
            bound_violation(d, -br.theta_delta, br.theta_delta)
        })
        .collect();
    let active = net.generators.iter().zip(&op.pg).map(|(g, &p)| bound_violation(p, g.p_min, g.p_max)).collect();
    let reactive = net.generators.iter().zip(&op.qg).map(|(g, &q)| bound_violation(q, g.q_min, g.q_max)).collect();
    let mut thermal_values = Vec::new();
    for (k, br) in net.branches.iter().enumerate() {
        if let Some(s) = br.s_max {
            let cap = thermal.cap(s);
            for d in [2 * k, 2 * k + 1] {
                let sq = flows.pf[d] * flows.pf[d] + flows.qf[d] * flows.qf[d];
                thermal_values.push(violation_degree_ineq(sq - cap));
            }
        }
    }
    let families = vec![
        FamilyViolations { family: Family::Voltage, values: voltage },
        FamilyViolations { family: Family::AngleDiff, values: angle },
        FamilyViolations { family: Family::ActiveGen, values: active },
        FamilyViolations { family: Family::ReactiveGen, values: reactive },
        FamilyViolations { family: Family::Thermal, values: thermal_values },
        FamilyViolations { family: Family::ActiveBalance, values: rp.into_iter().map(violation_degree_eq).collect() },
        FamilyViolations { family: Family::ReactiveBalance, values: rq.into_iter().map(violation_degree_eq).collect() },
    ];
    ViolationReport { families }
}

/// Total dispatch cost in $/h; generators at zero output still pay `c0`.
pub fn dispatch_cost(net: &Network, pg: &[f64]) -> f64 {
    net.generators
        .iter()
        .zip(pg)
        .map(|(g, &p)| {
            let mw = p * net.base_mva;
            (g.cost[0] * mw + g.cost[1]) * mw + g.cost[2]
        })
        .sum()
}

/// Gradient of [`dispatch_cost`] with respect to `pg` (p.u.).
pub fn dispatch_cost_grad(net: &Network, pg: &[f64], out: &mut [f64]) {
    for ((g, &p), o) in net.generators.iter().zip(pg).zip(out.iter_mut()) {
        let mw = p * net.base_mva;
        *o = (2.0 * g.cost[0] * mw + g.cost[1]) * net.base_mva;
    }
}
