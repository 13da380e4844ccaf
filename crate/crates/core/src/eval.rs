//! Held-out evaluation: prediction errors in physical units, constraint
//! satisfaction, objective gaps and latency.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::datagen::DataPoint;
use crate::grid::Network;
use crate::neural::NeuralError;
use crate::opt::{solve_loadflow, SolverConfig};
use crate::powerflow::{
    all_flows, dispatch_cost, violation_report_with, Family, OperatingPoint, ThermalLimit, ViolationReport, TAU_SAT,
};
use crate::trainer::{Checkpoint, Predictor, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("test set is empty")]
    Empty,
    #[error("{0}")]
    Train(#[from] TrainError),
    #[error("{0}")]
    Neural(#[from] NeuralError),
    #[error("ground-truth objective of record {index} is {value}; gaps need positive costs")]
    NonPositiveCost { index: usize, value: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub loadflow: bool,
    pub solver: SolverConfig,
    pub thermal: ThermalLimit,
    pub timing_runs: usize,
    pub jobs: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            loadflow: false,
            solver: SolverConfig::default(),
            thermal: ThermalLimit::Squared,
            timing_runs: 100,
            jobs: 1,
        }
    }
}

/// Mean absolute errors: kV, degrees, MW, MVA(r).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct QuantityErrors {
    pub v_kv: f64,
    pub theta_deg: f64,
    pub pg_mw: f64,
    pub qg_mvar: f64,
    pub pf_mw: f64,
    pub qf_mvar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntityProfile {
    pub entity: String,
    pub ground_truth_mean: f64,
    pub err_mean: f64,
    pub err_p2_5: f64,
    pub err_p97_5: f64,
}

/// One physical quantity: name, unit and per-entity profiles.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantityProfile {
    pub quantity: &'static str,
    pub rows: Vec<EntityProfile>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FamilySummary {
    pub family: Family,
    pub satisfied: usize,
    pub total: usize,
    /// `None` for an empty family.
    pub satisfied_pct: Option<f64>,
    /// Mean over violated pairs only, in reporting units; `None` when
    /// nothing is violated.
    pub mean_violation: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapSummary {
    pub n: usize,
    pub raw_pct: f64,
    pub loadflow_pct: Option<f64>,
    pub loadflow_failed: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct TimingSummary {
    pub predict_median_s: Option<f64>,
    pub predict_runs: usize,
    pub train_s: Option<f64>,
    pub label_s: Option<f64>,
    pub peak_rss_kb: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n_test: usize,
    pub errors: QuantityErrors,
    pub profiles: Vec<QuantityProfile>,
    pub feasibility: Vec<FamilySummary>,
    pub gaps: GapSummary,
    pub timing: TimingSummary,
}

impl EvalReport {
    pub fn family(&self, f: Family) -> &FamilySummary {
        &self.feasibility[f.index()]
    }

    /// Satisfaction over the pooled pairs of `families`.
    pub fn pooled_satisfaction_pct(&self, families: &[Family]) -> f64 {
        let (s, t) = families.iter().map(|&f| self.family(f)).fold((0, 0), |(s, t), f| (s + f.satisfied, t + f.total));
        if t == 0 {
            100.0
        } else {
            100.0 * s as f64 / t as f64
        }
    }
}

/// Empirical percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

struct Accum {
    entities: Vec<String>,
    truth: Vec<Vec<f64>>,
    err: Vec<Vec<f64>>,
}

impl Accum {
    fn new(entities: Vec<String>) -> Self {
        let n = entities.len();
        Accum { entities, truth: vec![Vec::new(); n], err: vec![Vec::new(); n] }
    }

    fn push(&mut self, k: usize, truth: f64, pred: f64, unit: f64) {
        self.truth[k].push(truth * unit);
        self.err[k].push((truth - pred).abs() * unit);
    }

    fn mean_error(&self) -> f64 {
        let (s, n) = self.err.iter().flatten().fold((0.0, 0usize), |(s, n), e| (s + e, n + 1));
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }

    fn profile(mut self, quantity: &'static str) -> QuantityProfile {
        let mut rows: Vec<EntityProfile> = (0..self.entities.len())
            .map(|k| {
                let n = self.err[k].len().max(1) as f64;
                let gt = self.truth[k].iter().sum::<f64>() / n;
                let mean = self.err[k].iter().sum::<f64>() / n;
                self.err[k].sort_by(f64::total_cmp);
                EntityProfile {
                    entity: std::mem::take(&mut self.entities[k]),
                    ground_truth_mean: gt,
                    err_mean: mean,
                    err_p2_5: percentile(&self.err[k], 2.5),
                    err_p97_5: percentile(&self.err[k], 97.5),
                }
            })
            .collect();
        rows.sort_by(|a, b| a.ground_truth_mean.total_cmp(&b.ground_truth_mean));
        QuantityProfile { quantity, rows }
    }
}

/// Mean absolute errors and per-entity profiles.
pub fn prediction_errors(
    net: &Network,
    test: &[DataPoint],
    preds: &[OperatingPoint],
) -> Result<(QuantityErrors, Vec<QuantityProfile>), EvalError> {
    if test.is_empty() {
        return Err(EvalError::Empty);
    }
    let bus = |i: usize| net.buses[i].id.to_string();
    let base = net.base_mva;
    let mut v = Accum::new((0..net.n_bus()).map(bus).collect());
    let mut th = Accum::new((0..net.n_bus()).map(bus).collect());
    let mut pg = Accum::new((0..net.n_gen()).map(|k| format!("{}@{}", k + 1, bus(net.generators[k].bus))).collect());
    let mut qg = Accum::new(pg.entities.clone());
    let dirs: Vec<String> = net
        .branches
        .iter()
        .flat_map(|b| {
            [format!("{}-{}", bus(b.from_bus), bus(b.to_bus)), format!("{}-{}", bus(b.to_bus), bus(b.from_bus))]
        })
        .collect();
    let mut pf = Accum::new(dirs.clone());
    let mut qf = Accum::new(dirs);
    for (p, y) in test.iter().zip(preds) {
        let t = &p.solution;
        for i in 0..net.n_bus() {
            v.push(i, t.v[i], y.v[i], net.buses[i].base_kv);
            th.push(i, t.theta[i], y.theta[i], 180.0 / std::f64::consts::PI);
        }
        for k in 0..net.n_gen() {
            pg.push(k, t.pg[k], y.pg[k], base);
            qg.push(k, t.qg[k], y.qg[k], base);
        }
        let (ft, fy) = (all_flows(net, t), all_flows(net, y));
        for d in 0..ft.pf.len() {
            pf.push(d, ft.pf[d], fy.pf[d], base);
            qf.push(d, ft.qf[d], fy.qf[d], base);
        }
    }
    let errors = QuantityErrors {
        v_kv: v.mean_error(),
        theta_deg: th.mean_error(),
        pg_mw: pg.mean_error(),
        qg_mvar: qg.mean_error(),
        pf_mw: pf.mean_error(),
        qf_mvar: qf.mean_error(),
    };
    let profiles = vec![
        v.profile("v"),
        th.profile("theta"),
        pg.profile("pg"),
        qg.profile("qg"),
        pf.profile("pf"),
        qf.profile("qf"),
    ];
    Ok((errors, profiles))
}

/// Converts each member violation of `report` to reporting units: kV,
/// degrees, MW, MVA.
fn violation_units(net: &Network, fam: Family, values: &[f64], thermal: ThermalLimit, op: &OperatingPoint) -> Vec<f64> {
    let base = net.base_mva;
    match fam {
        Family::Voltage => values.iter().zip(&net.buses).map(|(v, b)| v * b.base_kv).collect(),
        Family::AngleDiff => values.iter().map(|v| v.to_degrees()).collect(),
        Family::Thermal => {
            let flows = all_flows(net, op);
            let mut out = Vec::with_capacity(values.len());
            for (k, br) in net.branches.iter().enumerate() {
                let Some(s) = br.s_max else { continue };
                let rating = thermal.cap(s).sqrt();
                for d in [2 * k, 2 * k + 1] {
                    let mag = flows.pf[d].hypot(flows.qf[d]);
                    out.push((mag - rating).max(0.0) * base);
                }
            }
            out
        }
        _ => values.iter().map(|v| v * base).collect(),
    }
}

/// Satisfaction percentages and mean violations of violated pairs.
pub fn feasibility_summary(
    net: &Network,
    test: &[DataPoint],
    preds: &[OperatingPoint],
    thermal: ThermalLimit,
) -> Vec<FamilySummary> {
    let reports: Vec<ViolationReport> =
        test.iter().zip(preds).map(|(p, y)| violation_report_with(net, &p.load, y, thermal)).collect();
    Family::ALL
        .into_iter()
        .map(|fam| {
            let (mut sat, mut tot, mut vsum, mut vcount) = (0, 0, 0.0, 0usize);
            for (r, y) in reports.iter().zip(preds) {
                let f = r.family(fam);
                sat += f.n_satisfied();
                tot += f.n_total();
                let units = violation_units(net, fam, &f.values, thermal, y);
                for (v, u) in f.values.iter().zip(units) {
                    if *v > TAU_SAT {
                        vsum += u;
                        vcount += 1;
                    }
                }
            }
            FamilySummary {
                family: fam,
                satisfied: sat,
                total: tot,
                satisfied_pct: (tot > 0).then(|| 100.0 * sat as f64 / tot as f64),
                mean_violation: (vcount > 0).then(|| vsum / vcount as f64),
            }
        })
        .collect()
}

/// Raw and (optionally) load-flow-projected mean objective gaps in percent.
pub fn objective_gaps(
    net: &Network,
    test: &[DataPoint],
    preds: &[OperatingPoint],
    loadflow: Option<&SolverConfig>,
    jobs: usize,
) -> Result<GapSummary, EvalError> {
    if test.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some((index, p)) = test.iter().enumerate().find(|(_, p)| !(p.objective > 0.0)) {
        return Err(EvalError::NonPositiveCost { index, value: p.objective });
    }
    let gap = |c: f64, chat: f64| (1.0 - chat / c).abs() * 100.0;
    let n = test.len();
    let raw = test.iter().zip(preds).map(|(p, y)| gap(p.objective, dispatch_cost(net, &y.pg))).sum::<f64>() / n as f64;
    let (loadflow_pct, loadflow_failed) = match loadflow {
        None => (None, 0),
        Some(cfg) => {
            let project = |(p, y): (&DataPoint, &OperatingPoint)| {
                let out = solve_loadflow(net, &p.load, &y.pg, &y.v, cfg, Some(y));
                out.solution.map(|s| gap(p.objective, dispatch_cost(net, &s.pg)))
            };
            let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build().expect("thread pool");
            let gaps: Vec<Option<f64>> = pool.install(|| test.par_iter().zip(preds.par_iter()).map(project).collect());
            let ok: Vec<f64> = gaps.iter().flatten().copied().collect();
            let failed = n - ok.len();
            if failed > 0 {
                log::warn!("load-flow projection failed on {failed} of {n} test points");
            }
            let mean = if ok.is_empty() { None } else { Some(ok.iter().sum::<f64>() / ok.len() as f64) };
            (mean, failed)
        }
    };
    Ok(GapSummary { n, raw_pct: raw, loadflow_pct, loadflow_failed })
}

/// Median wall time of `runs` single-snapshot predictions.
pub fn predict_latency(predictor: &mut Predictor, test: &[DataPoint], runs: usize) -> Result<Option<f64>, EvalError> {
    if test.is_empty() || runs == 0 {
        return Ok(None);
    }
    let mut times = Vec::with_capacity(runs);
    for r in 0..runs {
        let load = &test[r % test.len()].load;
        let t = Instant::now();
        let p = predictor.predict(load)?;
        times.push(t.elapsed().as_secs_f64());
        std::hint::black_box(p);
    }
    times.sort_by(f64::total_cmp);
    Ok(Some(percentile(&times, 50.0)))
}

/// Peak resident set size of this process, where the platform reports it.
pub fn peak_rss_kb() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

/// Predictions for every test record.
pub fn predict_all(predictor: &mut Predictor, test: &[DataPoint]) -> Result<Vec<OperatingPoint>, EvalError> {
    test.iter().map(|p| Ok(predictor.predict(&p.load)?.point)).collect()
}

pub fn evaluate(
    checkpoint: &Checkpoint,
    net: &Network,
    test: &[DataPoint],
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    if test.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut predictor = Predictor::new(checkpoint, net)?;
    let preds = predict_all(&mut predictor, test)?;
    let mut report = evaluate_predictions(net, test, &preds, opts)?;
    report.timing.predict_median_s = predict_latency(&mut predictor, test, opts.timing_runs)?;
    report.timing.predict_runs = opts.timing_runs;
    Ok(report)
}

/// Everything except latency, for an arbitrary set of predictions.
pub fn evaluate_predictions(
    net: &Network,
    test: &[DataPoint],
    preds: &[OperatingPoint],
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let (errors, profiles) = prediction_errors(net, test, preds)?;
    let feasibility = feasibility_summary(net, test, preds, opts.thermal);
    let gaps = objective_gaps(net, test, preds, opts.loadflow.then_some(&opts.solver), opts.jobs)?;
    Ok(EvalReport {
        n_test: test.len(),
        errors,
        profiles,
        feasibility,
        gaps,
        timing: TimingSummary { peak_rss_kb: peak_rss_kb(), ..Default::default() },
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:e}"))
}

/// Writes the CSV tables of `report` into `dir`. Wall-clock values go only
/// to timing.csv.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<(), EvalError> {
    let write = |name: &str, body: String| {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|source| EvalError::Io { path, source })
    };
    std::fs::create_dir_all(dir).map_err(|source| EvalError::Io { path: dir.to_path_buf(), source })?;
    let e = &report.errors;
    write(
        "errors.csv",
        format!(
            "quantity,unit,mean_abs_error\nv,kV,{:e}\ntheta,deg,{:e}\npg,MW,{:e}\nqg,MVAr,{:e}\npf,MW,{:e}\nqf,MVAr,{:e}\n",
            e.v_kv, e.theta_deg, e.pg_mw, e.qg_mvar, e.pf_mw, e.qf_mvar
        ),
    )?;
    let mut feas = String::from("family,satisfied,total,satisfied_pct\n");
    let mut viol = String::from("family,unit,mean_violation\n");
    for f in &report.feasibility {
        let _ = writeln!(
            feas,
            "{},{},{},{}",
            f.family,
            f.satisfied,
            f.total,
            f.satisfied_pct.map_or("-".into(), |p| format!("{p:.4}"))
        );
        let unit = match f.family {
            Family::Voltage => "kV",
            Family::AngleDiff => "deg",
            Family::ActiveGen | Family::ActiveBalance => "MW",
            _ => "MVA",
        };
        let _ = writeln!(viol, "{},{},{}", f.family, unit, opt(f.mean_violation));
    }
    write("feasibility.csv", feas)?;
    write("violations.csv", viol)?;
    let g = &report.gaps;
    write(
        "gaps.csv",
        format!(
            "n,raw_gap_pct,loadflow_gap_pct,loadflow_failed\n{},{:e},{},{}\n",
            g.n,
            g.raw_pct,
            opt(g.loadflow_pct),
            g.loadflow_failed
        ),
    )?;
    let t = &report.timing;
    write(
        "timing.csv",
        format!(
            "predict_median_s,predict_runs,train_s,label_s,peak_rss_kb\n{},{},{},{},{}\n",
            opt(t.predict_median_s),
            t.predict_runs,
            opt(t.train_s),
            opt(t.label_s),
            t.peak_rss_kb.map_or("-".into(), |k| k.to_string())
        ),
    )?;
    for q in &report.profiles {
        let mut body = String::from("entity,ground_truth_mean,err_mean,err_p2.5,err_p97.5\n");
        for r in &q.rows {
            let _ = writeln!(
                body,
                "{},{:e},{:e},{:e},{:e}",
                r.entity, r.ground_truth_mean, r.err_mean, r.err_p2_5, r.err_p97_5
            );
        }
        write(&format!("profiles_{}.csv", q.quantity), body)?;
    }
    Ok(())
}
