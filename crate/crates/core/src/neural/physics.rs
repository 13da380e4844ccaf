//! Family-mean violation degrees of a predicted operating point and their
//! subgradients. Flows are recomputed from the predicted voltages, so the
//! flow definitions hold exactly. The derivative of `|·|` and `max(0, ·)` is
//! taken as 0 at the kink.

use crate::grid::Network;
use crate::powerflow::{line_flow_partials, Family, FlowPartials, LoadPoint, OperatingPoint, ThermalLimit};

/// Reusable buffers sized for one network.
#[derive(Debug, Clone)]
pub struct PhysicsScratch {
    flows: Vec<FlowPartials>,
    rp: Vec<f64>,
    rq: Vec<f64>,
    n_thermal: usize,
}

impl PhysicsScratch {
    pub fn new(net: &Network) -> Self {
        PhysicsScratch {
            flows: vec![FlowPartials::default(); 2 * net.n_branch()],
            rp: vec![0.0; net.n_bus()],
            rq: vec![0.0; net.n_bus()],
            n_thermal: 2 * net.branches.iter().filter(|b| b.s_max.is_some()).count(),
        }
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Subgradient of `max(0, lo − x) + max(0, x − hi)`.
#[inline]
fn bound_slope(x: f64, lo: f64, hi: f64) -> f64 {
    if x > hi {
        1.0
    } else if x < lo {
        -1.0
    } else {
        0.0
    }
}

#[inline]
fn bound_value(x: f64, lo: f64, hi: f64) -> f64 {
    (lo - x).max(0.0) + (x - hi).max(0.0)
}

/// Mean violation per family (indexed by [`Family::index`]). When `grad` is
/// given, `Σ_f weights[f] · ∂ν_f/∂op` is added to it.
///
/// Returns the name of the first non-finite intermediate on failure.
pub fn violations(
    net: &Network,
    load: &LoadPoint,
    op: &OperatingPoint,
    thermal: ThermalLimit,
    scratch: &mut PhysicsScratch,
    weights: &[f64; 7],
    mut grad: Option<&mut OperatingPoint>,
) -> Result<[f64; 7], String> {
    let n = net.n_bus();
    let mut nu = [0.0; 7];
    let w = |f: Family| weights[f.index()];

    // Voltage bounds.
    let inv = 1.0 / n as f64;
    for (i, bus) in net.buses.iter().enumerate() {
        nu[Family::Voltage.index()] += bound_value(op.v[i], bus.v_min, bus.v_max) * inv;
        if let Some(g) = grad.as_deref_mut() {
            g.v[i] += w(Family::Voltage) * bound_slope(op.v[i], bus.v_min, bus.v_max) * inv;
        }
    }

    // Angle differences.
    if net.n_branch() > 0 {
        let inv = 1.0 / net.n_branch() as f64;
        for br in &net.branches {
            let (i, j) = (br.from_bus, br.to_bus);
            let d = op.theta[i] - op.theta[j];
            nu[Family::AngleDiff.index()] += bound_value(d, -br.theta_delta, br.theta_delta) * inv;
            if let Some(g) = grad.as_deref_mut() {
                let s = w(Family::AngleDiff) * bound_slope(d, -br.theta_delta, br.theta_delta) * inv;
                g.theta[i] += s;
                g.theta[j] -= s;
            }
        }
    }

    // Generator bounds.
    if net.n_gen() > 0 {
        let inv = 1.0 / net.n_gen() as f64;
        for (k, gen) in net.generators.iter().enumerate() {
            nu[Family::ActiveGen.index()] += bound_value(op.pg[k], gen.p_min, gen.p_max) * inv;
            nu[Family::ReactiveGen.index()] += bound_value(op.qg[k], gen.q_min, gen.q_max) * inv;
            if let Some(g) = grad.as_deref_mut() {
                g.pg[k] += w(Family::ActiveGen) * bound_slope(op.pg[k], gen.p_min, gen.p_max) * inv;
                g.qg[k] += w(Family::ReactiveGen) * bound_slope(op.qg[k], gen.q_min, gen.q_max) * inv;
            }
        }
    }

    // Flows and balance residuals.
    scratch.rp.fill(0.0);
    scratch.rq.fill(0.0);
    for (k, gen) in net.generators.iter().enumerate() {
        scratch.rp[gen.bus] += op.pg[k];
        scratch.rq[gen.bus] += op.qg[k];
    }
    for (k, l) in net.loads.iter().enumerate() {
        scratch.rp[l.bus] -= load.p[k];
        scratch.rq[l.bus] -= load.q[k];
    }
    for (k, br) in net.branches.iter().enumerate() {
        let (i, j) = (br.from_bus, br.to_bus);
        let fwd = line_flow_partials(op.v[i], op.v[j], op.theta[i], op.theta[j], br.g, br.b);
        let rev = line_flow_partials(op.v[j], op.v[i], op.theta[j], op.theta[i], br.g, br.b);
        if !(fwd.p.is_finite() && fwd.q.is_finite() && rev.p.is_finite() && rev.q.is_finite()) {
            return Err(format!("flow on branch {k}"));
        }
        scratch.rp[i] -= fwd.p;
        scratch.rq[i] -= fwd.q;
        scratch.rp[j] -= rev.p;
        scratch.rq[j] -= rev.q;
        scratch.flows[2 * k] = fwd;
        scratch.flows[2 * k + 1] = rev;
    }
    if let Some(i) = scratch.rp.iter().chain(&scratch.rq).position(|r| !r.is_finite()) {
        return Err(format!("balance residual at bus {}", i % n));
    }
    for i in 0..n {
        nu[Family::ActiveBalance.index()] += scratch.rp[i].abs() * inv;
        nu[Family::ReactiveBalance.index()] += scratch.rq[i].abs() * inv;
    }

    let inv_th = if scratch.n_thermal > 0 { 1.0 / scratch.n_thermal as f64 } else { 0.0 };
    for (k, br) in net.branches.iter().enumerate() {
        let Some(s) = br.s_max else { continue };
        let cap = thermal.cap(s);
        for d in [2 * k, 2 * k + 1] {
            let f = &scratch.flows[d];
            nu[Family::Thermal.index()] += (f.p * f.p + f.q * f.q - cap).max(0.0) * inv_th;
        }
    }

    let Some(g) = grad else { return Ok(nu) };
    for i in 0..n {
        scratch.rp[i] = w(Family::ActiveBalance) * sign(scratch.rp[i]) * inv;
        scratch.rq[i] = w(Family::ReactiveBalance) * sign(scratch.rq[i]) * inv;
    }
    for (k, gen) in net.generators.iter().enumerate() {
        g.pg[k] += scratch.rp[gen.bus];
        g.qg[k] += scratch.rq[gen.bus];
    }
    for (k, br) in net.branches.iter().enumerate() {
        for (d, i, j) in [(2 * k, br.from_bus, br.to_bus), (2 * k + 1, br.to_bus, br.from_bus)] {
            let f = &scratch.flows[d];
            // ∂ν/∂p and ∂ν/∂q of this directed flow.
            let mut wp = -scratch.rp[i];
            let mut wq = -scratch.rq[i];
            if let Some(s) = br.s_max {
                if f.p * f.p + f.q * f.q - thermal.cap(s) > 0.0 {
                    wp += w(Family::Thermal) * 2.0 * f.p * inv_th;
                    wq += w(Family::Thermal) * 2.0 * f.q * inv_th;
                }
            }
            if wp == 0.0 && wq == 0.0 {
                continue;
            }
            g.v[i] += wp * f.dp_dvi + wq * f.dq_dvi;
            g.v[j] += wp * f.dp_dvj + wq * f.dq_dvj;
            let dt = wp * f.dp_dti + wq * f.dq_dti;
            g.theta[i] += dt;
            g.theta[j] -= dt;
        }
    }
    Ok(nu)
}
