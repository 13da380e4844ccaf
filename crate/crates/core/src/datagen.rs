//! Labelled dataset generation, persistence and train/test splitting.
//!
//! Load snapshots ramp from a sampled lower bound to a sampled upper bound
//! with small multiplicative noise; each snapshot is labelled by the
//! embedded AC-OPF solver and kept only if the solve is optimal.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Network;
use crate::opt::{solve_acopf, SolveStatus, SolverConfig};
use crate::powerflow::{violation_report_with, LoadPoint, OperatingPoint};
use crate::rng;

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Record { line: usize, msg: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("only {feasible} feasible snapshot(s); at least 2 are needed")]
    TooFewFeasible { feasible: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_points: usize,
    pub seed: u64,
    pub lb_range: [f64; 2],
    pub ub_range: [f64; 2],
    pub noise_scale: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { n_points: 2000, seed: 0, lb_range: [0.8, 0.9], ub_range: [1.1, 1.2], noise_scale: 1.0 }
    }
}

impl GenConfig {
    pub fn check(&self) -> Result<(), String> {
        if self.n_points == 0 {
            return Err("n_points must be at least 1".into());
        }
        let [a, b] = self.lb_range;
        let [c, d] = self.ub_range;
        if !(0.0 < a && a <= b && b < c && c <= d) {
            return Err(format!("multiplier ranges must satisfy 0 < {a} <= {b} < {c} <= {d}"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err("noise_scale must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// Per-load lower and upper ramp endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadBounds {
    pub lb: LoadPoint,
    pub ub: LoadPoint,
}

/// Draws one lower and one upper multiplier per load; each scales the load's
/// active and reactive nominal demand together.
pub fn sample_bounds<R: Rng>(net: &Network, cfg: &GenConfig, rng: &mut R) -> LoadBounds {
    let nominal = LoadPoint::nominal(net);
    let mut lb = nominal.clone();
    let mut ub = nominal.clone();
    for k in 0..net.n_load() {
        let m_lb = rng.gen_range(cfg.lb_range[0]..=cfg.lb_range[1]);
        let m_ub = rng.gen_range(cfg.ub_range[0]..=cfg.ub_range[1]);
        lb.p[k] *= m_lb;
        lb.q[k] *= m_lb;
        ub.p[k] *= m_ub;
        ub.q[k] *= m_ub;
    }
    LoadBounds { lb, ub }
}

/// Interpolated snapshot at ramp fraction `c` with per-load noise
/// `ξ ~ U[1 − w, 1 + w]`, `w = noise_scale · ‖ub − lb‖ / (100 n_points)`.
pub fn snapshot<R: Rng>(bounds: &LoadBounds, c: f64, cfg: &GenConfig, rng: &mut R) -> LoadPoint {
    let (lb, ub) = (&bounds.lb, &bounds.ub);
    let mut out = lb.clone();
    for k in 0..lb.p.len() {
        let width = cfg.noise_scale * (ub.p[k] - lb.p[k]).hypot(ub.q[k] - lb.q[k]) / (100.0 * cfg.n_points as f64);
        let xi = if width > 0.0 { rng.gen_range(1.0 - width..=1.0 + width) } else { 1.0 };
        out.p[k] = xi * ((1.0 - c) * lb.p[k] + c * ub.p[k]);
        out.q[k] = xi * ((1.0 - c) * lb.q[k] + c * ub.q[k]);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    pub schema_version: u32,
    pub case_id: String,
    pub c: f64,
    pub load: LoadPoint,
    pub solution: OperatingPoint,
    pub objective: f64,
    pub solver_status: SolveStatus,
    pub seed_index: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discard {
    pub seed_index: u64,
    pub c: f64,
    pub solver_status: SolveStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub case_id: String,
    pub case_hash: String,
    pub gen: Option<GenConfig>,
    pub solver: Option<SolverConfig>,
    pub n_candidates: usize,
    pub n_feasible: usize,
    pub n_discarded: usize,
    pub discarded: Vec<Discard>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub points: Vec<DataPoint>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Dataset restricted to the given record indices, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset { manifest: self.manifest.clone(), points: idx.iter().map(|&i| self.points[i].clone()).collect() }
    }
}

/// Runs the ramp over `n_points + 1` candidates on `jobs` worker threads.
///
/// Every candidate is warm-started from the nominal-load solution and falls
/// back to a cold start, so the outcome never depends on scheduling.
pub fn generate(net: &Network, cfg: &GenConfig, solver: &SolverConfig, jobs: usize) -> Result<Dataset, DataError> {
    cfg.check().map_err(DataError::Config)?;
    solver.check().map_err(DataError::Config)?;
    let bounds = sample_bounds(net, cfg, &mut rng::stream(cfg.seed, rng::BOUNDS, 0));
    let anchor = solve_acopf(net, &LoadPoint::nominal(net), solver, None).solution;
    if anchor.is_none() {
        log::warn!("nominal load is not solvable; snapshots use cold starts");
    }

    let n = cfg.n_points;
    let label = |k: usize| {
        let c = k as f64 / n as f64;
        let load = snapshot(&bounds, c, cfg, &mut rng::stream(cfg.seed, rng::SNAPSHOT, k as u64));
        let mut out = solve_acopf(net, &load, solver, anchor.as_ref());
        if !out.is_optimal() && anchor.is_some() {
            out = solve_acopf(net, &load, solver, None);
        }
        (k as u64, c, load, out)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| DataError::Config(e.to_string()))?;
    let results: Vec<_> = pool.install(|| (0..=n).into_par_iter().map(label).collect());

    let mut points = Vec::new();
    let mut discarded = Vec::new();
    for (seed_index, c, load, out) in results {
        match out.solution {
            Some(solution) => points.push(DataPoint {
                schema_version: DATASET_SCHEMA_VERSION,
                case_id: net.name.clone(),
                c,
                load,
                solution,
                objective: out.objective,
                solver_status: out.status,
                seed_index,
            }),
            None => {
                log::info!("snapshot {seed_index} (c = {c}) discarded: {}", out.status);
                discarded.push(Discard { seed_index, c, solver_status: out.status });
            }
        }
    }
    if points.len() < 2 {
        return Err(DataError::TooFewFeasible { feasible: points.len() });
    }
    let manifest = Manifest {
        schema_version: DATASET_SCHEMA_VERSION,
        case_id: net.name.clone(),
        case_hash: net.case_hash(),
        gen: Some(cfg.clone()),
        solver: Some(*solver),
        n_candidates: n + 1,
        n_feasible: points.len(),
        n_discarded: discarded.len(),
        discarded,
    };
    Ok(Dataset { manifest, points })
}

/// Sidecar manifest path for a dataset file.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Writes the JSON-lines dataset and its sidecar manifest.
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<(), DataError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for p in &ds.points {
        let line = serde_json::to_string(p).expect("record serializes");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    let mpath = manifest_path(path);
    let text = serde_json::to_string_pretty(&ds.manifest).expect("manifest serializes");
    std::fs::write(&mpath, text + "\n").map_err(io_err(&mpath))
}

/// Reads a dataset and re-verifies every record against `net`.
///
/// A missing manifest is allowed (externally solved data); one is then
/// synthesized from the records.
pub fn read_dataset(path: &Path, net: &Network, feas_tol: f64) -> Result<Dataset, DataError> {
    let mpath = manifest_path(path);
    let manifest = if mpath.exists() {
        let text = std::fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
        if m.case_hash != net.case_hash() {
            return Err(DataError::Manifest(format!(
                "dataset was generated for case {} with a different network (hash {})",
                m.case_id, m.case_hash
            )));
        }
        Some(m)
    } else {
        None
    };
    let thermal = manifest.as_ref().and_then(|m| m.solver).map(|s| s.thermal).unwrap_or_default();

    let file = File::open(path).map_err(io_err(path))?;
    let mut points = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = |msg: String| DataError::Record { line: i + 1, msg };
        let p: DataPoint = serde_json::from_str(&line).map_err(|e| rec(e.to_string()))?;
        if p.schema_version != DATASET_SCHEMA_VERSION {
            return Err(rec(format!("unsupported schema_version {}", p.schema_version)));
        }
        if !p.load.matches(net) || !p.solution.matches(net) {
            return Err(rec("dimensions do not match the network".into()));
        }
        if !p.solution.is_finite() || !p.load.p.iter().chain(&p.load.q).all(|v| v.is_finite()) {
            return Err(rec("non-finite value".into()));
        }
        let report = violation_report_with(net, &p.load, &p.solution, thermal);
        if !report.all_within(feas_tol) {
            let worst = report.families.iter().max_by(|a, b| a.mean().total_cmp(&b.mean())).expect("families");
            return Err(rec(format!(
                "infeasible solution: family {} mean violation {:e} exceeds {:e}",
                worst.family,
                worst.mean(),
                feas_tol
            )));
        }
        points.push(p);
    }
    if points.len() < 2 {
        return Err(DataError::TooFewFeasible { feasible: points.len() });
    }
    let manifest = manifest.unwrap_or_else(|| Manifest {
        schema_version: DATASET_SCHEMA_VERSION,
        case_id: net.name.clone(),
        case_hash: net.case_hash(),
        gen: None,
        solver: None,
        n_candidates: points.len(),
        n_feasible: points.len(),
        n_discarded: 0,
        discarded: Vec::new(),
    });
    Ok(Dataset { manifest, points })
}

/// Test-set size for `n` records: `floor((1 − ratio) n)`, kept in `1..n`.
pub fn test_size(n: usize, ratio: f64) -> usize {
    let t = ((1.0 - ratio) * n as f64 + 1e-9).floor() as usize;
    t.clamp(1, n.saturating_sub(1).max(1))
}

/// Seeded random partition of `0..n` into (train, test) index sets.
pub fn split_indices(n: usize, ratio: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    assert!(n >= 2, "split needs at least two records");
    assert!(ratio > 0.0 && ratio < 1.0, "split ratio must lie in (0, 1)");
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, rng::SPLIT, 0));
    let test = idx.split_off(n - test_size(n, ratio));
    (idx, test)
}

pub fn split(ds: &Dataset, ratio: f64, seed: u64) -> (Dataset, Dataset) {
    let (tr, te) = split_indices(ds.len(), ratio, seed);
    (ds.subset(&tr), ds.subset(&te))
}
