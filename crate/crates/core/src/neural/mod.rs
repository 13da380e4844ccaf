//! Four-headed dense network mapping a load snapshot to voltages, angles
//! and dispatch, plus the hand-written backward pass and Adam.

mod adam;
mod mlp;
pub mod physics;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Network;
use crate::powerflow::{LoadPoint, OperatingPoint};
use crate::rng;

pub use adam::AdamState;
pub use mlp::{Mlp, MlpCache};

#[derive(Debug, Error, PartialEq)]
pub enum NeuralError {
    #[error("expected input width {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite value at {node}")]
    NonFinite { node: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    V,
    Theta,
    Pg,
    Qg,
}

impl Head {
    pub const ALL: [Head; 4] = [Head::V, Head::Theta, Head::Pg, Head::Qg];

    pub fn name(self) -> &'static str {
        match self {
            Head::V => "v",
            Head::Theta => "theta",
            Head::Pg => "pg",
            Head::Qg => "qg",
        }
    }
}

/// Per-component affine maps `z = (x − mean) / std` for inputs and each head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: [Vec<f64>; 4],
    pub y_std: [Vec<f64>; 4],
}

/// Columns whose spread falls below this are treated as constant.
const CONSTANT_STD: f64 = 1e-9;

/// Column means and standard deviations. A constant column gets
/// `constant_scale` in place of its (zero) deviation.
fn column_stats(rows: &[Vec<f64>], width: usize, constant_scale: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len().max(1) as f64;
    let mut mean = vec![0.0; width];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; width];
    for r in rows {
        for ((s, x), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (x - m) * (x - m);
        }
    }
    let std = var
        .into_iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > CONSTANT_STD {
                sd
            } else {
                constant_scale
            }
        })
        .collect();
    (mean, std)
}

impl Standardizer {
    pub fn identity(input: usize, outputs: [usize; 4]) -> Self {
        Standardizer {
            x_mean: vec![0.0; input],
            x_std: vec![1.0; input],
            y_mean: outputs.map(|n| vec![0.0; n]),
            y_std: outputs.map(|n| vec![1.0; n]),
        }
    }

    /// Fits means and standard deviations on training pairs.
    pub fn fit(ref_bus: usize, loads: &[&LoadPoint], targets: &[&OperatingPoint]) -> Self {
        let xs: Vec<Vec<f64>> = loads.iter().map(|l| l.to_features()).collect();
        let width = xs.first().map_or(0, |x| x.len());
        let (x_mean, x_std) = column_stats(&xs, width, 1.0);
        let mut y_mean: [Vec<f64>; 4] = Default::default();
        let mut y_std: [Vec<f64>; 4] = Default::default();
        for (h, head) in Head::ALL.into_iter().enumerate() {
            let ys: Vec<Vec<f64>> = targets.iter().map(|t| head_values(t, head, ref_bus)).collect();
            let w = ys.first().map_or(0, |y| y.len());
            // Outputs that never varied are pinned to their mean.
            (y_mean[h], y_std[h]) = column_stats(&ys, w, CONSTANT_STD);
        }
        Standardizer { x_mean, x_std, y_mean, y_std }
    }
}

/// Values of one head's quantity; the reference angle is dropped.
pub fn head_values(op: &OperatingPoint, head: Head, ref_bus: usize) -> Vec<f64> {
    match head {
        Head::V => op.v.clone(),
        Head::Theta => op.theta.iter().enumerate().filter(|&(i, _)| i != ref_bus).map(|(_, &t)| t).collect(),
        Head::Pg => op.pg.clone(),
        Head::Qg => op.qg.clone(),
    }
}

/// Architecture and trained state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ModelRecord", try_from = "ModelRecord")]
pub struct OpfDnn {
    pub n_bus: usize,
    pub n_gen: usize,
    pub ref_bus: usize,
    pub hidden: Vec<usize>,
    pub relu_heads: bool,
    pub heads: [Mlp; 4],
    pub params: Vec<f64>,
    pub scaler: Standardizer,
}

#[derive(Serialize, Deserialize)]
struct ModelRecord {
    n_bus: usize,
    n_gen: usize,
    ref_bus: usize,
    input_dim: usize,
    hidden: Vec<usize>,
    relu_heads: bool,
    scaler: Standardizer,
    params: Vec<f64>,
}

impl From<OpfDnn> for ModelRecord {
    fn from(m: OpfDnn) -> Self {
        ModelRecord {
            n_bus: m.n_bus,
            n_gen: m.n_gen,
            ref_bus: m.ref_bus,
            input_dim: m.input_dim(),
            hidden: m.hidden,
            relu_heads: m.relu_heads,
            scaler: m.scaler,
            params: m.params,
        }
    }
}

impl TryFrom<ModelRecord> for OpfDnn {
    type Error = String;
    fn try_from(r: ModelRecord) -> Result<Self, String> {
        if r.n_bus == 0 || r.ref_bus >= r.n_bus || r.input_dim == 0 || r.hidden.contains(&0) {
            return Err("inconsistent model dimensions".into());
        }
        let mut m = OpfDnn::zeros(r.input_dim, r.n_bus, r.n_gen, r.ref_bus, r.hidden, r.relu_heads);
        if r.params.len() != m.params.len() {
            return Err(format!("expected {} parameters, found {}", m.params.len(), r.params.len()));
        }
        if r.params.iter().any(|p| !p.is_finite()) {
            return Err("non-finite parameter".into());
        }
        let widths = m.output_widths();
        let s = &r.scaler;
        if s.x_mean.len() != r.input_dim
            || s.x_std.len() != r.input_dim
            || (0..4).any(|h| s.y_mean[h].len() != widths[h] || s.y_std[h].len() != widths[h])
        {
            return Err("standardization statistics do not match the model".into());
        }
        m.params = r.params;
        m.scaler = r.scaler;
        Ok(m)
    }
}

impl OpfDnn {
    /// All-zero parameters, identity standardization.
    pub fn zeros(
        input_dim: usize,
        n_bus: usize,
        n_gen: usize,
        ref_bus: usize,
        hidden: Vec<usize>,
        relu_heads: bool,
    ) -> Self {
        let outputs = [n_bus, n_bus - 1, n_gen, n_gen];
        let mut offset = 0;
        let heads = outputs.map(|out| {
            let sizes: Vec<usize> = std::iter::once(input_dim).chain(hidden.iter().copied()).chain([out]).collect();
            let mlp = Mlp::new(sizes, relu_heads, offset);
            offset = mlp.end();
            mlp
        });
        OpfDnn {
            n_bus,
            n_gen,
            ref_bus,
            hidden,
            relu_heads,
            heads,
            params: vec![0.0; offset],
            scaler: Standardizer::identity(input_dim, outputs),
        }
    }

    /// Network shaped for `net` with seeded initial weights.
    pub fn for_network(net: &Network, hidden: Vec<usize>, relu_heads: bool, seed: u64) -> Self {
        let mut m = OpfDnn::zeros(2 * net.n_load(), net.n_bus(), net.n_gen(), net.reference_bus(), hidden, relu_heads);
        let mut r = rng::stream(seed, rng::INIT, 0);
        for head in &m.heads {
            head.init(&mut m.params, &mut r);
        }
        m
    }

    /// Hidden widths used when none are configured: two layers of
    /// `max(64, 2 · input)`.
    pub fn default_hidden(input_dim: usize) -> Vec<usize> {
        vec![64.max(2 * input_dim); 2]
    }

    pub fn input_dim(&self) -> usize {
        self.heads[0].input_dim()
    }

    pub fn output_widths(&self) -> [usize; 4] {
        [self.n_bus, self.n_bus - 1, self.n_gen, self.n_gen]
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Standardized input row for a load snapshot.
    pub fn standardize_input(&self, load: &LoadPoint, out: &mut [f64]) -> Result<(), NeuralError> {
        let n = load.p.len() + load.q.len();
        if n != self.input_dim() || load.p.len() != load.q.len() {
            return Err(NeuralError::Dimension { expected: self.input_dim(), got: n });
        }
        let s = &self.scaler;
        for (k, x) in load.p.iter().chain(&load.q).enumerate() {
            out[k] = (x - s.x_mean[k]) / s.x_std[k];
        }
        Ok(())
    }

    /// Runs all heads on the standardized rows `x`.
    pub fn forward_batch(&self, x: ArrayView2<f64>, ws: &mut Workspace) -> Result<(), NeuralError> {
        if x.ncols() != self.input_dim() {
            return Err(NeuralError::Dimension { expected: self.input_dim(), got: x.ncols() });
        }
        assert!(x.nrows() <= ws.capacity(), "batch exceeds workspace capacity");
        for (h, mlp) in self.heads.iter().enumerate() {
            mlp.forward(&self.params, x, &mut ws.caches[h]).map_err(|l| NeuralError::NonFinite {
                node: format!("{} head, layer {}", Head::ALL[h].name(), l + 1),
            })?;
        }
        Ok(())
    }

    /// Standardized outputs of head `h` for the last batch of `b` rows.
    pub fn output<'a>(&self, ws: &'a Workspace, h: usize, b: usize) -> ArrayView2<'a, f64> {
        self.heads[h].output(&ws.caches[h], b)
    }

    /// De-standardizes row `r` of the last batch into `op`, splicing the
    /// reference angle in as 0.
    pub fn decode_row(&self, ws: &Workspace, b: usize, r: usize, op: &mut OperatingPoint) {
        let s = &self.scaler;
        let out = |h: usize| self.output(ws, h, b);
        for (i, (&o, (m, sd))) in out(0).row(r).iter().zip(s.y_mean[0].iter().zip(&s.y_std[0])).enumerate() {
            op.v[i] = m + sd * o;
        }
        let th = out(1);
        let mut k = 0;
        for i in 0..self.n_bus {
            if i == self.ref_bus {
                op.theta[i] = 0.0;
            } else {
                op.theta[i] = s.y_mean[1][k] + s.y_std[1][k] * th[(r, k)];
                k += 1;
            }
        }
        for (h, dst) in [(2, &mut op.pg), (3, &mut op.qg)] {
            for (j, &o) in out(h).row(r).iter().enumerate() {
                dst[j] = s.y_mean[h][j] + s.y_std[h][j] * o;
            }
        }
    }

    /// Buffer for ∂L/∂(standardized output) of head `h`.
    pub fn output_grad_mut<'a>(&self, ws: &'a mut Workspace, h: usize, b: usize) -> ndarray::ArrayViewMut2<'a, f64> {
        self.heads[h].output_grad_mut(&mut ws.caches[h], b)
    }

    pub fn output_and_grad<'a>(
        &self,
        ws: &'a mut Workspace,
        h: usize,
        b: usize,
    ) -> (ArrayView2<'a, f64>, ndarray::ArrayViewMut2<'a, f64>) {
        self.heads[h].output_and_grad(&mut ws.caches[h], b)
    }

    /// Accumulates ∂L/∂params into `grad` from the output gradients set in
    /// `ws` after [`OpfDnn::forward_batch`] on the same `x`.
    pub fn backward_batch(&self, x: ArrayView2<f64>, ws: &mut Workspace, grad: &mut [f64]) {
        for (h, mlp) in self.heads.iter().enumerate() {
            mlp.backward(&self.params, x, &mut ws.caches[h], grad);
        }
    }

    /// Prediction for one snapshot.
    pub fn forward(&self, load: &LoadPoint) -> Result<OperatingPoint, NeuralError> {
        let mut ws = Workspace::new(self, 1);
        self.forward_with(load, &mut ws)
    }

    /// [`OpfDnn::forward`] reusing a caller-owned workspace.
    pub fn forward_with(&self, load: &LoadPoint, ws: &mut Workspace) -> Result<OperatingPoint, NeuralError> {
        let mut x = std::mem::take(&mut ws.input);
        let res = self.standardize_input(load, x.row_mut(0).as_slice_mut().unwrap());
        let res = res.and_then(|_| self.forward_batch(x.slice(ndarray::s![..1, ..]), ws));
        ws.input = x;
        res?;
        let mut op = OperatingPoint {
            v: vec![0.0; self.n_bus],
            theta: vec![0.0; self.n_bus],
            pg: vec![0.0; self.n_gen],
            qg: vec![0.0; self.n_gen],
        };
        self.decode_row(ws, 1, 0, &mut op);
        Ok(op)
    }
}

/// Activation and gradient buffers for batches of up to `capacity` rows.
#[derive(Debug, Clone)]
pub struct Workspace {
    caches: Vec<MlpCache>,
    input: Array2<f64>,
}

impl Workspace {
    pub fn new(model: &OpfDnn, capacity: usize) -> Self {
        Workspace {
            caches: model.heads.iter().map(|m| MlpCache::new(m, capacity)).collect(),
            input: Array2::zeros((1, model.input_dim())),
        }
    }

    pub fn capacity(&self) -> usize {
        self.caches[0].capacity()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_bus_shape() -> OpfDnn {
        OpfDnn::zeros(2, 2, 1, 0, vec![5, 5], false)
    }

    #[test]
    fn zero_model_outputs_zero() {
        let m = two_bus_shape();
        let op = m.forward(&LoadPoint { p: vec![0.5], q: vec![0.1] }).unwrap();
        assert_eq!(op.v, vec![0.0, 0.0]);
        assert_eq!(op.theta, vec![0.0, 0.0]);
        assert_eq!((op.pg[0], op.qg[0]), (0.0, 0.0));
    }

    #[test]
    fn reference_angle_is_spliced() {
        let mut m = OpfDnn::zeros(2, 3, 1, 1, vec![4], false);
        m.scaler.y_mean[1] = vec![0.25, -0.5];
        let op = m.forward(&LoadPoint { p: vec![0.5], q: vec![0.1] }).unwrap();
        assert_eq!(op.theta, vec![0.25, 0.0, -0.5]);
    }

    #[test]
    fn wrong_width_is_rejected() {
        let m = two_bus_shape();
        let err = m.forward(&LoadPoint { p: vec![0.5, 0.2], q: vec![0.1, 0.0] }).unwrap_err();
        assert_eq!(err, NeuralError::Dimension { expected: 2, got: 4 });
    }

    #[test]
    fn serde_roundtrip_is_exact() {
        let net = crate::cases::network("case9");
        let m = OpfDnn::for_network(&net, vec![7, 3], false, 4);
        let json = serde_json::to_string(&m).unwrap();
        let back: OpfDnn = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn non_finite_weights_name_the_head() {
        let mut m = two_bus_shape();
        let off = m.heads[2].end() - 1;
        m.params[off] = f64::NAN;
        let err = m.forward(&LoadPoint { p: vec![0.5], q: vec![0.1] }).unwrap_err();
        assert_eq!(err, NeuralError::NonFinite { node: "pg head, layer 3".into() });
    }
}
