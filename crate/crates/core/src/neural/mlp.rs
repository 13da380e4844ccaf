//! Dense ReLU network over a slice of a shared flat parameter buffer.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;

/// Layer widths plus the position of this network inside the parameter
/// buffer. Each layer stores `W` (out × in, row-major) followed by `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub relu_output: bool,
    offsets: Vec<usize>,
    end: usize,
}

impl Mlp {
    pub fn new(sizes: Vec<usize>, relu_output: bool, offset: usize) -> Self {
        assert!(sizes.len() >= 2 && sizes.iter().all(|&s| s > 0), "bad layer sizes {sizes:?}");
        let mut offsets = Vec::with_capacity(sizes.len() - 1);
        let mut at = offset;
        for w in sizes.windows(2) {
            offsets.push(at);
            at += w[0] * w[1] + w[1];
        }
        Mlp { sizes, relu_output, offsets, end: at }
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// One past the last parameter index used by this network.
    pub fn end(&self) -> usize {
        self.end
    }

    fn is_relu(&self, l: usize) -> bool {
        l + 1 < self.n_layers() || self.relu_output
    }

    fn dims(&self, l: usize) -> (usize, usize, usize) {
        (self.offsets[l], self.sizes[l], self.sizes[l + 1])
    }

    pub fn weights<'a>(&self, params: &'a [f64], l: usize) -> ArrayView2<'a, f64> {
        let (o, n_in, n_out) = self.dims(l);
        ArrayView2::from_shape((n_out, n_in), &params[o..o + n_in * n_out]).unwrap()
    }

    pub fn bias<'a>(&self, params: &'a [f64], l: usize) -> ArrayView1<'a, f64> {
        let (o, n_in, n_out) = self.dims(l);
        ArrayView1::from(&params[o + n_in * n_out..o + n_in * n_out + n_out])
    }

    fn grads_mut<'a>(&self, grad: &'a mut [f64], l: usize) -> (ArrayViewMut2<'a, f64>, ArrayViewMut1<'a, f64>) {
        let (o, n_in, n_out) = self.dims(l);
        let (w, b) = grad[o..o + n_in * n_out + n_out].split_at_mut(n_in * n_out);
        (ArrayViewMut2::from_shape((n_out, n_in), w).unwrap(), ArrayViewMut1::from(b))
    }

    /// Uniform fan-in scaled weights, zero biases.
    pub fn init<R: Rng>(&self, params: &mut [f64], rng: &mut R) {
        for l in 0..self.n_layers() {
            let (o, n_in, n_out) = self.dims(l);
            let bound = (6.0 / n_in as f64).sqrt();
            for w in &mut params[o..o + n_in * n_out] {
                *w = rng.gen_range(-bound..bound);
            }
            params[o + n_in * n_out..o + n_in * n_out + n_out].fill(0.0);
        }
    }

    /// Forward pass over the first `b` rows of `x`; activations land in
    /// `cache`. On a non-finite value returns the offending layer index.
    pub fn forward(&self, params: &[f64], x: ArrayView2<f64>, cache: &mut MlpCache) -> Result<(), usize> {
        let b = x.nrows();
        for l in 0..self.n_layers() {
            let (prev, rest) = cache.acts.split_at_mut(l);
            let input = if l == 0 { x.view() } else { prev[l - 1].slice(s![..b, ..]) };
            let mut out = rest[0].slice_mut(s![..b, ..]);
            general_mat_mul(1.0, &input, &self.weights(params, l).t(), 0.0, &mut out);
            let bias = self.bias(params, l);
            let relu = self.is_relu(l);
            let mut finite = true;
            for mut row in out.rows_mut() {
                for (z, &bj) in row.iter_mut().zip(bias.iter()) {
                    let v = *z + bj;
                    finite &= v.is_finite();
                    *z = if relu && !(v > 0.0) { 0.0 } else { v };
                }
            }
            if !finite {
                return Err(l);
            }
        }
        Ok(())
    }

    pub fn output<'a>(&self, cache: &'a MlpCache, b: usize) -> ArrayView2<'a, f64> {
        cache.acts.last().unwrap().slice(s![..b, ..])
    }

    /// Buffer the caller fills with ∂L/∂output before [`Mlp::backward`].
    pub fn output_grad_mut<'a>(&self, cache: &'a mut MlpCache, b: usize) -> ArrayViewMut2<'a, f64> {
        cache.deltas.last_mut().unwrap().slice_mut(s![..b, ..])
    }

    /// Output rows together with their gradient buffer.
    pub fn output_and_grad<'a>(
        &self,
        cache: &'a mut MlpCache,
        b: usize,
    ) -> (ArrayView2<'a, f64>, ArrayViewMut2<'a, f64>) {
        (cache.acts.last().unwrap().slice(s![..b, ..]), cache.deltas.last_mut().unwrap().slice_mut(s![..b, ..]))
    }

    /// Accumulates parameter gradients into `grad` from the output gradient
    /// stored in the cache. ReLU derivatives are taken as 0 at the kink.
    pub fn backward(&self, params: &[f64], x: ArrayView2<f64>, cache: &mut MlpCache, grad: &mut [f64]) {
        let b = x.nrows();
        for l in (0..self.n_layers()).rev() {
            if self.is_relu(l) {
                let act = cache.acts[l].slice(s![..b, ..]);
                let mut d = cache.deltas[l].slice_mut(s![..b, ..]);
                d.zip_mut_with(&act, |g, &a| {
                    if !(a > 0.0) {
                        *g = 0.0
                    }
                });
            }
            let (lower, upper) = cache.deltas.split_at_mut(l);
            let delta = upper[0].slice(s![..b, ..]);
            let input = if l == 0 { x.view() } else { cache.acts[l - 1].slice(s![..b, ..]) };
            let (mut gw, mut gb) = self.grads_mut(grad, l);
            general_mat_mul(1.0, &delta.t(), &input, 1.0, &mut gw);
            gb += &delta.sum_axis(Axis(0));
            if l > 0 {
                let mut d_prev = lower[l - 1].slice_mut(s![..b, ..]);
                general_mat_mul(1.0, &delta, &self.weights(params, l), 0.0, &mut d_prev);
            }
        }
    }
}

/// Activation and gradient buffers for up to `cap` rows.
#[derive(Debug, Clone)]
pub struct MlpCache {
    acts: Vec<Array2<f64>>,
    deltas: Vec<Array2<f64>>,
}

impl MlpCache {
    pub fn new(mlp: &Mlp, cap: usize) -> Self {
        let acts: Vec<Array2<f64>> = mlp.sizes[1..].iter().map(|&n| Array2::zeros((cap, n))).collect();
        MlpCache { deltas: acts.clone(), acts }
    }

    pub fn capacity(&self) -> usize {
        self.acts[0].nrows()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_layer_passes_input_through() {
        let mlp = Mlp::new(vec![3, 3], false, 0);
        let mut params = vec![0.0; mlp.end()];
        for i in 0..3 {
            params[i * 3 + i] = 1.0;
        }
        let x = array![[0.5, -1.0, 2.0], [3.0, 0.0, -0.25]];
        let mut cache = MlpCache::new(&mlp, 4);
        mlp.forward(&params, x.view(), &mut cache).unwrap();
        assert_eq!(mlp.output(&cache, 2), x);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mlp = Mlp::new(vec![2, 5, 5, 3], false, 0);
        let params = vec![0.0; mlp.end()];
        let mut cache = MlpCache::new(&mlp, 1);
        mlp.forward(&params, array![[1.0, -2.0]].view(), &mut cache).unwrap();
        assert!(mlp.output(&cache, 1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mlp = Mlp::new(vec![3, 4, 2], false, 0);
        let mut rng = crate::rng::stream(1, crate::rng::INIT, 0);
        let mut params = vec![0.0; mlp.end()];
        mlp.init(&mut params, &mut rng);
        for p in params.iter_mut() {
            *p += 0.05;
        }
        let x = array![[0.3, -0.7, 1.1], [0.9, 0.2, -0.4]];
        let w = array![[1.0, -2.0], [0.5, 3.0]];
        let loss = |p: &[f64]| {
            let mut c = MlpCache::new(&mlp, 2);
            mlp.forward(p, x.view(), &mut c).unwrap();
            (&mlp.output(&c, 2) * &w).sum()
        };
        let mut cache = MlpCache::new(&mlp, 2);
        mlp.forward(&params, x.view(), &mut cache).unwrap();
        mlp.output_grad_mut(&mut cache, 2).assign(&w);
        let mut grad = vec![0.0; mlp.end()];
        mlp.backward(&params, x.view(), &mut cache, &mut grad);
        let h = 1e-6;
        for k in 0..params.len() {
            let mut a = params.clone();
            a[k] += h;
            let mut z = params.clone();
            z[k] -= h;
            let fd = (loss(&a) - loss(&z)) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-6, "param {k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn non_finite_layer_is_reported() {
        let mlp = Mlp::new(vec![1, 2, 1], false, 0);
        let mut params = vec![1.0; mlp.end()];
        params[4] = f64::INFINITY; // second layer weight
        let mut cache = MlpCache::new(&mlp, 1);
        assert_eq!(mlp.forward(&params, array![[1.0]].view(), &mut cache), Err(1));
    }
}
