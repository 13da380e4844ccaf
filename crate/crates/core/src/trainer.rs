//! Training loop for the constrained network: L1 regression on the four
//! heads plus multiplier-weighted constraint violations, with periodic
//! multiplier ascent.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::Dataset;
use crate::grid::Network;
use crate::neural::physics::{violations, PhysicsScratch};
use crate::neural::{head_values, AdamState, Head, NeuralError, OpfDnn, Standardizer, Workspace};
use crate::powerflow::{all_flows, Family, FlowSet, LoadPoint, OperatingPoint, ThermalLimit};
use crate::rng::{self, RngState};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// Rows per gradient chunk. Chunks are reduced in a fixed order, so the
/// result does not depend on how many threads evaluate them.
const CHUNK: usize = 32;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training set has {n} record(s); need at least 1")]
    Empty { n: usize },
    #[error("epoch {epoch}: {source}")]
    NonFinite {
        epoch: usize,
        #[source]
        source: NeuralError,
    },
    #[error("{0}")]
    Neural(#[from] NeuralError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Mb,
    Mc,
    Mcd,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Mb => "mb",
            Variant::Mc => "mc",
            Variant::Mcd => "mcd",
        })
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "mb" => Ok(Variant::Mb),
            "mc" => Ok(Variant::Mc),
            "mcd" => Ok(Variant::Mcd),
            _ => Err(format!("unknown variant `{s}` (expected mb, mc or mcd)")),
        }
    }
}

/// Which regression heads enter the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveTerms {
    /// Voltage, angle, active and reactive dispatch.
    All,
    /// Voltage and active dispatch only.
    VoltagePower,
}

impl FromStr for ObjectiveTerms {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "all" => Ok(ObjectiveTerms::All),
            "voltage_power" => Ok(ObjectiveTerms::VoltagePower),
            _ => Err(format!("unknown objective terms `{s}` (expected all or voltage_power)")),
        }
    }
}

impl ObjectiveTerms {
    pub fn mask(self) -> [bool; 4] {
        match self {
            ObjectiveTerms::All => [true; 4],
            ObjectiveTerms::VoltagePower => [true, false, true, false],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub lambda_init: f64,
    pub rho: f64,
    pub u_lambda: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub split_ratio: f64,
    pub constraint_set: Vec<Family>,
    /// Hidden widths; empty selects [`OpfDnn::default_hidden`].
    pub hidden: Vec<usize>,
    pub relu_heads: bool,
    pub objective_terms: ObjectiveTerms,
    pub grad_clip: f64,
    pub thermal: ThermalLimit,
    /// Epochs between checkpoint writes (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::for_variant(Variant::Mcd)
    }
}

impl TrainConfig {
    pub fn for_variant(variant: Variant) -> Self {
        let (lambda_init, rho) = match variant {
            Variant::Mb => (0.0, 0.0),
            Variant::Mc => (1.0, 0.0),
            Variant::Mcd => (0.0, 1e-2),
        };
        TrainConfig {
            variant,
            lambda_init,
            rho,
            u_lambda: 1000,
            lr: 1e-4,
            batch_size: 64,
            max_epochs: 50_000,
            seed: 0,
            split_ratio: 0.8,
            constraint_set: Family::ALL.to_vec(),
            hidden: Vec::new(),
            relu_heads: false,
            objective_terms: ObjectiveTerms::All,
            grad_clip: 1e3,
            thermal: ThermalLimit::Squared,
            checkpoint_every: 0,
        }
    }

    /// Structural checks.
    pub fn check(&self) -> Result<(), String> {
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err("rho must be finite and non-negative".into());
        }
        if !(self.lambda_init >= 0.0 && self.lambda_init.is_finite()) {
            return Err("lambda_init must be finite and non-negative".into());
        }
        if self.u_lambda == 0 || self.batch_size == 0 {
            return Err("u_lambda and batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err("lr must be positive".into());
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err("split_ratio must lie in (0, 1)".into());
        }
        if !(self.grad_clip > 0.0) {
            return Err("grad_clip must be positive".into());
        }
        if self.hidden.contains(&0) {
            return Err("hidden widths must be positive".into());
        }
        Ok(())
    }

    /// Multiplier settings implied by the variant.
    pub fn check_variant(&self) -> Result<(), String> {
        let ok = match self.variant {
            Variant::Mb => self.lambda_init == 0.0 && self.rho == 0.0,
            Variant::Mc => self.lambda_init == 1.0 && self.rho == 0.0,
            Variant::Mcd => self.lambda_init == 0.0 && self.rho > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(format!(
                "variant {} is inconsistent with lambda_init = {} and rho = {}",
                self.variant, self.lambda_init, self.rho
            ))
        }
    }

    pub fn hidden_for(&self, input_dim: usize) -> Vec<usize> {
        if self.hidden.is_empty() {
            OpfDnn::default_hidden(input_dim)
        } else {
            self.hidden.clone()
        }
    }

    fn in_set(&self, f: Family) -> bool {
        self.constraint_set.contains(&f)
    }

    /// Effective batch size for `n` training records.
    pub fn effective_batch(&self, n: usize) -> usize {
        if n < 256 {
            n
        } else {
            self.batch_size.min(n)
        }
    }
}

/// One multiplier per constraint family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "BTreeMap<Family, f64>", try_from = "BTreeMap<Family, f64>")]
pub struct Multipliers(pub [f64; 7]);

impl From<Multipliers> for BTreeMap<Family, f64> {
    fn from(m: Multipliers) -> Self {
        Family::ALL.into_iter().map(|f| (f, m.0[f.index()])).collect()
    }
}

impl TryFrom<BTreeMap<Family, f64>> for Multipliers {
    type Error = String;
    fn try_from(map: BTreeMap<Family, f64>) -> Result<Self, String> {
        let mut out = [0.0; 7];
        for (f, v) in map {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("multiplier {f} must be finite and non-negative"));
            }
            out[f.index()] = v;
        }
        Ok(Multipliers(out))
    }
}

impl Multipliers {
    pub fn initial(cfg: &TrainConfig) -> Self {
        Multipliers(Family::ALL.map(|f| if cfg.in_set(f) { cfg.lambda_init } else { 0.0 }))
    }

    pub fn get(&self, f: Family) -> f64 {
        self.0[f.index()]
    }
}

/// `λ_c ← λ_c + ρ ν̄_c` for the families in `set`.
pub fn multiplier_update(lambda: &Multipliers, nu: &[f64; 7], rho: f64, set: &[Family]) -> Multipliers {
    let mut out = *lambda;
    for &f in set {
        out.0[f.index()] += rho * nu[f.index()];
    }
    out
}

/// Regression loss components.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_v: f64,
    pub l_theta: f64,
    pub l_p: f64,
    pub l_q: f64,
    pub l_c: f64,
    /// Mean violation per family.
    pub nu: [f64; 7],
}

impl LossParts {
    pub fn l_o(&self) -> f64 {
        self.l_v + self.l_theta + self.l_p + self.l_q
    }

    pub fn total(&self) -> f64 {
        self.l_o() + self.l_c
    }

    fn add_scaled(&mut self, o: &LossParts, w: f64) {
        self.l_v += w * o.l_v;
        self.l_theta += w * o.l_theta;
        self.l_p += w * o.l_p;
        self.l_q += w * o.l_q;
        self.l_c += w * o.l_c;
        for (a, b) in self.nu.iter_mut().zip(&o.nu) {
            *a += w * b;
        }
    }

    fn set_head(&mut self, h: usize, v: f64) {
        match h {
            0 => self.l_v = v,
            1 => self.l_theta = v,
            2 => self.l_p = v,
            _ => self.l_q = v,
        }
    }
}

fn mean_l1(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Mean L1 error per head in physical per-unit values; the reference angle
/// is excluded and heads outside `terms` contribute 0.
pub fn loss_o(y: &OperatingPoint, yhat: &OperatingPoint, ref_bus: usize, terms: ObjectiveTerms) -> LossParts {
    let mut out = LossParts::default();
    for (h, head) in Head::ALL.into_iter().enumerate() {
        if terms.mask()[h] {
            out.set_head(h, mean_l1(&head_values(y, head, ref_bus), &head_values(yhat, head, ref_bus)));
        }
    }
    out
}

/// `Σ_c λ_c ν_c(x, ŷ)` with flows derived from the predicted voltages.
pub fn loss_c(net: &Network, x: &LoadPoint, yhat: &OperatingPoint, lambda: &Multipliers, thermal: ThermalLimit) -> f64 {
    let mut scratch = PhysicsScratch::new(net);
    let nu = violations(net, x, yhat, thermal, &mut scratch, &lambda.0, None).expect("finite prediction");
    nu.iter().zip(&lambda.0).map(|(n, l)| n * l).sum()
}

/// Standardized training arrays.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub x: Array2<f64>,
    pub y: [Array2<f64>; 4],
    pub loads: Vec<LoadPoint>,
}

impl TrainData {
    pub fn new(model: &OpfDnn, points: &[(&LoadPoint, &OperatingPoint)]) -> Result<Self, NeuralError> {
        let n = points.len();
        let mut x = Array2::zeros((n, model.input_dim()));
        let widths = model.output_widths();
        let mut y = widths.map(|w| Array2::zeros((n, w)));
        let s = &model.scaler;
        for (r, (load, op)) in points.iter().enumerate() {
            model.standardize_input(load, x.row_mut(r).as_slice_mut().unwrap())?;
            for (h, head) in Head::ALL.into_iter().enumerate() {
                for (k, v) in head_values(op, head, model.ref_bus).into_iter().enumerate() {
                    y[h][(r, k)] = (v - s.y_mean[h][k]) / s.y_std[h][k];
                }
            }
        }
        Ok(TrainData { x, y, loads: points.iter().map(|(l, _)| (*l).clone()).collect() })
    }

    pub fn from_dataset(model: &OpfDnn, ds: &Dataset) -> Result<Self, NeuralError> {
        let pairs: Vec<_> = ds.points.iter().map(|p| (&p.load, &p.solution)).collect();
        TrainData::new(model, &pairs)
    }

    pub fn len(&self) -> usize {
        self.loads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loads.is_empty()
    }
}

/// Rows of one minibatch: standardized inputs, targets and raw loads.
pub struct BatchView<'a> {
    pub x: ArrayView2<'a, f64>,
    pub y: [ArrayView2<'a, f64>; 4],
    pub loads: Vec<&'a LoadPoint>,
}

/// Per-thread buffers for one chunk.
struct Worker {
    ws: Workspace,
    scratch: PhysicsScratch,
    op: OperatingPoint,
    gop: OperatingPoint,
    grad: Vec<f64>,
}

impl Worker {
    fn new(model: &OpfDnn, net: &Network) -> Self {
        let op = OperatingPoint::flat(net);
        Worker {
            ws: Workspace::new(model, CHUNK),
            scratch: PhysicsScratch::new(net),
            gop: op.clone(),
            op,
            grad: vec![0.0; model.n_params()],
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

/// Loss of one chunk, scaled by `1 / batch`; gradients go to `w.grad`.
#[allow(clippy::too_many_arguments)]
fn chunk_loss(
    model: &OpfDnn,
    net: &Network,
    cfg: &TrainConfig,
    lambda: &Multipliers,
    batch: &BatchView,
    rows: std::ops::Range<usize>,
    batch_len: usize,
    with_grad: bool,
    w: &mut Worker,
) -> Result<LossParts, NeuralError> {
    let b = rows.len();
    let x = batch.x.slice(s![rows.clone(), ..]);
    model.forward_batch(x, &mut w.ws)?;
    let mask = cfg.objective_terms.mask();
    let inv_b = 1.0 / batch_len as f64;
    let physics_grad = with_grad && lambda.0.iter().any(|&l| l > 0.0);
    let mut parts = LossParts::default();

    // Regression terms in per-unit values: |σ (o − t)| per component.
    for h in 0..4 {
        if with_grad {
            model.output_grad_mut(&mut w.ws, h, b).fill(0.0);
        }
        let m = model.output_widths()[h];
        if !mask[h] || m == 0 {
            continue;
        }
        let scale = inv_b / m as f64;
        let sd = &model.scaler.y_std[h];
        let y = batch.y[h].slice(s![rows.clone(), ..]);
        let (out, mut d) = model.output_and_grad(&mut w.ws, h, b);
        let mut total = 0.0;
        for r in 0..b {
            for k in 0..m {
                let e = out[(r, k)] - y[(r, k)];
                total += (e * sd[k]).abs();
                if with_grad {
                    d[(r, k)] = sign(e) * sd[k] * scale;
                }
            }
        }
        parts.set_head(h, total * scale);
    }

    // Constraint terms, physical space.
    for r in 0..b {
        model.decode_row(&w.ws, b, r, &mut w.op);
        if physics_grad {
            for v in [&mut w.gop.v, &mut w.gop.theta, &mut w.gop.pg, &mut w.gop.qg] {
                v.fill(0.0);
            }
        }
        let load = batch.loads[rows.start + r];
        let grad = if physics_grad { Some(&mut w.gop) } else { None };
        let nu = violations(net, load, &w.op, cfg.thermal, &mut w.scratch, &lambda.0, grad)
            .map_err(|node| NeuralError::NonFinite { node })?;
        for (k, v) in nu.iter().enumerate() {
            parts.nu[k] += v * inv_b;
            parts.l_c += lambda.0[k] * v * inv_b;
        }
        if physics_grad {
            let sc = &model.scaler;
            let mut d = model.output_grad_mut(&mut w.ws, 0, b);
            for i in 0..model.n_bus {
                d[(r, i)] += w.gop.v[i] * sc.y_std[0][i] * inv_b;
            }
            let mut d = model.output_grad_mut(&mut w.ws, 1, b);
            let mut k = 0;
            for i in 0..model.n_bus {
                if i != model.ref_bus {
                    d[(r, k)] += w.gop.theta[i] * sc.y_std[1][k] * inv_b;
                    k += 1;
                }
            }
            for (h, g) in [(2, &w.gop.pg), (3, &w.gop.qg)] {
                let mut d = model.output_grad_mut(&mut w.ws, h, b);
                for j in 0..model.n_gen {
                    d[(r, j)] += g[j] * sc.y_std[h][j] * inv_b;
                }
            }
        }
    }
    if !parts.total().is_finite() {
        return Err(NeuralError::NonFinite { node: "loss".into() });
    }
    if with_grad {
        w.grad.fill(0.0);
        model.backward_batch(x, &mut w.ws, &mut w.grad);
    }
    Ok(parts)
}

/// Evaluates the composite loss on a batch; with `grad` given, writes its
/// gradient with respect to the model parameters.
pub fn batch_loss(
    model: &OpfDnn,
    net: &Network,
    cfg: &TrainConfig,
    lambda: &Multipliers,
    batch: &BatchView,
    grad: Option<&mut [f64]>,
) -> Result<LossParts, NeuralError> {
    let mut workers = Vec::new();
    batch_loss_with(model, net, cfg, lambda, batch, grad, &mut workers, None)
}

#[allow(clippy::too_many_arguments)]
fn batch_loss_with(
    model: &OpfDnn,
    net: &Network,
    cfg: &TrainConfig,
    lambda: &Multipliers,
    batch: &BatchView,
    grad: Option<&mut [f64]>,
    workers: &mut Vec<Worker>,
    pool: Option<&rayon::ThreadPool>,
) -> Result<LossParts, NeuralError> {
    let n = batch.x.nrows();
    let n_chunks = n.div_ceil(CHUNK);
    while workers.len() < n_chunks {
        workers.push(Worker::new(model, net));
    }
    let with_grad = grad.is_some();
    let run = |(c, w): (usize, &mut Worker)| {
        let rows = c * CHUNK..((c + 1) * CHUNK).min(n);
        chunk_loss(model, net, cfg, lambda, batch, rows, n, with_grad, w)
    };
    let results: Vec<Result<LossParts, NeuralError>> = match pool {
        Some(p) if p.current_num_threads() > 1 => {
            p.install(|| workers[..n_chunks].par_iter_mut().enumerate().map(run).collect())
        }
        _ => workers[..n_chunks].iter_mut().enumerate().map(run).collect(),
    };
    let mut parts = LossParts::default();
    for r in results {
        parts.add_scaled(&r?, 1.0);
    }
    if let Some(g) = grad {
        g.fill(0.0);
        for w in &workers[..n_chunks] {
            for (a, b) in g.iter_mut().zip(&w.grad) {
                *a += b;
            }
        }
    }
    Ok(parts)
}

/// Mean violation per family over all records under the current weights.
pub fn mean_violations(
    model: &OpfDnn,
    net: &Network,
    data: &TrainData,
    thermal: ThermalLimit,
) -> Result<[f64; 7], NeuralError> {
    let cfg = TrainConfig { thermal, ..TrainConfig::for_variant(Variant::Mb) };
    let lambda = Multipliers([0.0; 7]);
    let mut workers = Vec::new();
    Ok(full_pass(model, net, &cfg, &lambda, data, &mut workers, None)?.nu)
}

fn full_pass(
    model: &OpfDnn,
    net: &Network,
    cfg: &TrainConfig,
    lambda: &Multipliers,
    data: &TrainData,
    workers: &mut Vec<Worker>,
    pool: Option<&rayon::ThreadPool>,
) -> Result<LossParts, NeuralError> {
    let n = data.len();
    let view = BatchView {
        x: data.x.view(),
        y: [data.y[0].view(), data.y[1].view(), data.y[2].view(), data.y[3].view()],
        loads: data.loads.iter().collect(),
    };
    // Chunk rows in slices of at most 64 chunks to bound worker memory.
    let span = 64 * CHUNK;
    let mut parts = LossParts::default();
    let mut start = 0;
    while start < n {
        let end = (start + span).min(n);
        let sub = BatchView {
            x: view.x.slice(s![start..end, ..]),
            y: [0, 1, 2, 3].map(|h| view.y[h].slice(s![start..end, ..])),
            loads: view.loads[start..end].to_vec(),
        };
        let p = batch_loss_with(model, net, cfg, lambda, &sub, None, workers, pool)?;
        parts.add_scaled(&p, (end - start) as f64 / n as f64);
        start = end;
    }
    Ok(parts)
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub parts: LossParts,
    pub lambda: Multipliers,
    pub seconds: f64,
}

pub fn log_header() -> String {
    let mut cols =
        vec!["epoch", "l_v", "l_theta", "l_p", "l_q", "l_c"].into_iter().map(String::from).collect::<Vec<_>>();
    cols.extend(Family::ALL.iter().map(|f| format!("lambda_{f}")));
    cols.extend(Family::ALL.iter().map(|f| format!("nu_{f}")));
    cols.push("seconds".into());
    cols.join(",")
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        let p = &self.parts;
        let mut cols = vec![
            self.epoch.to_string(),
            format!("{:e}", p.l_v),
            format!("{:e}", p.l_theta),
            format!("{:e}", p.l_p),
            format!("{:e}", p.l_q),
            format!("{:e}", p.l_c),
        ];
        cols.extend(self.lambda.0.iter().map(|v| format!("{v:e}")));
        cols.extend(p.nu.iter().map(|v| format!("{v:e}")));
        cols.push(format!("{:.3}", self.seconds));
        cols.join(",")
    }
}

/// Everything needed to resume training or to predict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub case_id: String,
    pub case_hash: String,
    pub config: TrainConfig,
    pub epoch: usize,
    pub lambda: Multipliers,
    pub model: OpfDnn,
    pub adam: AdamState,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn write(&self, path: &Path) -> Result<(), TrainError> {
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, text).map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let c: Checkpoint = serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if c.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported schema_version {}", c.schema_version)));
        }
        if c.adam.m.len() != c.model.n_params() || c.adam.v.len() != c.model.n_params() {
            return Err(TrainError::Checkpoint("optimizer state does not match the model".into()));
        }
        Ok(c)
    }

    /// Fails unless the checkpoint was trained on `net`.
    pub fn check_network(&self, net: &Network) -> Result<(), TrainError> {
        if self.case_hash != net.case_hash() {
            return Err(TrainError::Checkpoint(format!(
                "checkpoint was trained on case {} (hash {}), not on this network",
                self.case_id, self.case_hash
            )));
        }
        Ok(())
    }
}

/// Runtime options that do not affect the trained result.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub jobs: usize,
    pub checkpoint_path: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

/// Runs (or resumes) training up to `cfg.max_epochs`.
pub fn train(
    net: &Network,
    train_set: &Dataset,
    cfg: &TrainConfig,
    opts: TrainOptions,
) -> Result<TrainOutcome, TrainError> {
    cfg.check().map_err(TrainError::Config)?;
    if train_set.is_empty() {
        return Err(TrainError::Empty { n: 0 });
    }
    let (mut model, mut adam, mut lambda, mut shuffle, start_epoch) = match opts.resume {
        Some(c) => {
            c.check_network(net)?;
            let same =
                TrainConfig { max_epochs: cfg.max_epochs, checkpoint_every: cfg.checkpoint_every, ..c.config.clone() };
            if &same != cfg {
                return Err(TrainError::Checkpoint(
                    "configuration differs from the checkpoint (only max_epochs and checkpoint_every may change)"
                        .into(),
                ));
            }
            let rng = c.rng.restore().map_err(TrainError::Checkpoint)?;
            (c.model, c.adam, c.lambda, rng, c.epoch)
        }
        None => {
            let hidden = cfg.hidden_for(2 * net.n_load());
            let mut model = OpfDnn::for_network(net, hidden, cfg.relu_heads, cfg.seed);
            let loads: Vec<&LoadPoint> = train_set.points.iter().map(|p| &p.load).collect();
            let sols: Vec<&OperatingPoint> = train_set.points.iter().map(|p| &p.solution).collect();
            model.scaler = Standardizer::fit(net.reference_bus(), &loads, &sols);
            let adam = AdamState::new(model.n_params(), cfg.lr);
            let shuffle = rng::stream(cfg.seed, rng::BATCH_SHUFFLE, 0);
            (model, adam, Multipliers::initial(cfg), shuffle, 0)
        }
    };
    let data = TrainData::from_dataset(&model, train_set)?;
    let n = data.len();
    let bs = cfg.effective_batch(n);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| TrainError::Config(e.to_string()))?;

    let mut log_file = match &opts.log_path {
        Some(p) => {
            let exists = start_epoch > 0 && p.exists();
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(exists)
                .write(true)
                .truncate(!exists)
                .open(p)
                .map_err(io_err(p))?;
            let mut w = std::io::BufWriter::new(f);
            if !exists {
                writeln!(w, "{}", log_header()).map_err(io_err(p))?;
            }
            Some(w)
        }
        None => None,
    };

    let snapshot =
        |model: &OpfDnn, adam: &AdamState, lambda: &Multipliers, rng: &ChaCha8Rng, epoch: usize| Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            case_id: net.name.clone(),
            case_hash: net.case_hash(),
            config: cfg.clone(),
            epoch,
            lambda: *lambda,
            model: model.clone(),
            adam: adam.clone(),
            rng: RngState::capture(rng),
        };

    let mut workers: Vec<Worker> = Vec::new();
    let mut grad = vec![0.0; model.n_params()];
    let mut perm: Vec<usize> = (0..n).collect();
    let mut xb = Array2::zeros((bs, model.input_dim()));
    let mut yb = model.output_widths().map(|w| Array2::zeros((bs, w)));
    let mut log = Vec::new();
    let t0 = Instant::now();

    for epoch in start_epoch + 1..=cfg.max_epochs {
        for (i, p) in perm.iter_mut().enumerate() {
            *p = i;
        }
        perm.shuffle(&mut shuffle);
        let mut epoch_parts = LossParts::default();
        for idx in perm.chunks(bs) {
            let b = idx.len();
            for (r, &i) in idx.iter().enumerate() {
                xb.row_mut(r).assign(&data.x.row(i));
                for h in 0..4 {
                    yb[h].row_mut(r).assign(&data.y[h].row(i));
                }
            }
            let view = BatchView {
                x: xb.slice(s![..b, ..]),
                y: [0, 1, 2, 3].map(|h| yb[h].slice(s![..b, ..])),
                loads: idx.iter().map(|&i| &data.loads[i]).collect(),
            };
            let parts = batch_loss_with(&model, net, cfg, &lambda, &view, Some(&mut grad), &mut workers, Some(&pool))
                .map_err(|source| TrainError::NonFinite { epoch, source })?;
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    source: NeuralError::NonFinite { node: "gradient".into() },
                });
            }
            if norm > cfg.grad_clip {
                let f = cfg.grad_clip / norm;
                grad.iter_mut().for_each(|g| *g *= f);
            }
            adam.update(&mut model.params, &grad);
            epoch_parts.add_scaled(&parts, b as f64 / n as f64);
        }
        if let Some(i) = model.params.iter().position(|p| !p.is_finite()) {
            return Err(TrainError::NonFinite {
                epoch,
                source: NeuralError::NonFinite { node: format!("parameter {i}") },
            });
        }
        let row = LogRow { epoch, parts: epoch_parts, lambda, seconds: t0.elapsed().as_secs_f64() };
        if epoch % cfg.u_lambda == 0 {
            let full = full_pass(&model, net, cfg, &lambda, &data, &mut workers, Some(&pool))
                .map_err(|source| TrainError::NonFinite { epoch, source })?;
            lambda = multiplier_update(&lambda, &full.nu, cfg.rho, &cfg.constraint_set);
        }
        if let Some(w) = log_file.as_mut() {
            writeln!(w, "{}", row.to_csv()).map_err(io_err(opts.log_path.as_deref().unwrap()))?;
        }
        if epoch % 100 == 0 {
            log::info!("epoch {epoch}: L_o {:.4e} L_c {:.4e}", row.parts.l_o(), row.parts.l_c);
        }
        log.push(row);
        if let Some(p) = &opts.checkpoint_path {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                snapshot(&model, &adam, &lambda, &shuffle, epoch).write(p)?;
            }
        }
    }
    if let Some(w) = log_file.as_mut() {
        w.flush().map_err(io_err(opts.log_path.as_deref().unwrap()))?;
    }
    let final_epoch = start_epoch.max(cfg.max_epochs);
    let checkpoint = snapshot(&model, &adam, &lambda, &shuffle, final_epoch);
    if let Some(p) = &opts.checkpoint_path {
        checkpoint.write(p)?;
    }
    Ok(TrainOutcome { checkpoint, log })
}

/// A prediction with the branch flows implied by its voltages.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub point: OperatingPoint,
    pub flows: FlowSet,
    pub seconds: f64,
}

/// Reusable inference state for one model.
pub struct Predictor<'a> {
    model: &'a OpfDnn,
    net: &'a Network,
    ws: Workspace,
    pub clamp: bool,
}

impl<'a> Predictor<'a> {
    pub fn new(checkpoint: &'a Checkpoint, net: &'a Network) -> Result<Self, TrainError> {
        checkpoint.check_network(net)?;
        Ok(Predictor::for_model(&checkpoint.model, net))
    }

    /// Skips the case-hash check; the caller vouches that `model` fits `net`.
    pub fn for_model(model: &'a OpfDnn, net: &'a Network) -> Self {
        Predictor { model, net, ws: Workspace::new(model, 1), clamp: false }
    }

    pub fn predict(&mut self, load: &LoadPoint) -> Result<Prediction, NeuralError> {
        let t = Instant::now();
        let mut point = self.model.forward_with(load, &mut self.ws)?;
        if self.clamp {
            clamp_to_bounds(self.net, &mut point);
        }
        let flows = all_flows(self.net, &point);
        Ok(Prediction { point, flows, seconds: t.elapsed().as_secs_f64() })
    }
}

/// Projects voltages and dispatch onto their box bounds.
pub fn clamp_to_bounds(net: &Network, op: &mut OperatingPoint) {
    for (v, b) in op.v.iter_mut().zip(&net.buses) {
        *v = v.clamp(b.v_min, b.v_max);
    }
    for (k, g) in net.generators.iter().enumerate() {
        op.pg[k] = op.pg[k].clamp(g.p_min, g.p_max);
        op.qg[k] = op.qg[k].clamp(g.q_min, g.q_max);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multiplier_arithmetic() {
        let set = Family::ALL.to_vec();
        let l = Multipliers([1.0; 7]);
        let nu = [0.5; 7];
        assert!((multiplier_update(&l, &nu, 0.01, &set).0[0] - 1.005).abs() < 1e-15);
        assert_eq!(multiplier_update(&l, &[0.0; 7], 0.01, &set), l);
        assert_eq!(multiplier_update(&l, &nu, 0.0, &set), l);
    }

    #[test]
    fn excluded_families_keep_zero_multipliers() {
        let cfg = TrainConfig { constraint_set: vec![Family::Voltage], ..TrainConfig::for_variant(Variant::Mc) };
        let l = Multipliers::initial(&cfg);
        assert_eq!(l.get(Family::Voltage), 1.0);
        assert_eq!(l.get(Family::Thermal), 0.0);
        let u = multiplier_update(&l, &[1.0; 7], 0.5, &cfg.constraint_set);
        assert_eq!(u.get(Family::Thermal), 0.0);
    }

    #[test]
    fn variant_consistency() {
        for v in [Variant::Mb, Variant::Mc, Variant::Mcd] {
            assert!(TrainConfig::for_variant(v).check_variant().is_ok());
        }
        let bad = TrainConfig { rho: 0.1, ..TrainConfig::for_variant(Variant::Mb) };
        assert!(bad.check_variant().is_err());
    }

    #[test]
    fn loss_o_examples() {
        let y = OperatingPoint { v: vec![1.0], theta: vec![0.0], pg: vec![0.5], qg: vec![0.1] };
        assert_eq!(loss_o(&y, &y, 0, ObjectiveTerms::All).total(), 0.0);
        let mut yhat = y.clone();
        yhat.v[0] = 1.02;
        let l = loss_o(&y, &yhat, 0, ObjectiveTerms::All);
        assert!((l.l_v - 0.02).abs() < 1e-15 && (l.total() - 0.02).abs() < 1e-15);
    }

    #[test]
    fn multipliers_serialize_by_family() {
        let m = Multipliers([0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"6a\":5.0"), "{json}");
        assert_eq!(serde_json::from_str::<Multipliers>(&json).unwrap(), m);
    }
}
