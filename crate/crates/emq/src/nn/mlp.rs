//! Feed-forward MLP with deterministic Xavier-normal initialization and
//! exact reverse-mode gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{EmqError, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the post-activation value.
    #[inline]
    fn deriv_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[inline]
pub fn softplus(z: f64) -> f64 {
    // Overflow-safe: softplus(z) = max(z, 0) + ln(1 + e^{-|z|}).
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// Weight matrix, shape (out, in).
    pub w: Matrix,
    pub b: Vec<f64>,
}

/// Multi-layer perceptron. Hidden layers share one activation; the output
/// layer is linear with an optional per-output softplus mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    hidden_activation: Activation,
    softplus_mask: Vec<bool>,
    layers: Vec<Layer>,
    seed: u64,
}

/// Per-layer parameter gradients, shaped like the `Mlp` parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Gradients {
            layers: mlp
                .layers
                .iter()
                .map(|l| Layer {
                    w: Matrix::zeros(l.w.rows(), l.w.cols()),
                    b: vec![0.0; l.b.len()],
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.is_finite() && l.b.iter().all(|v| v.is_finite()))
    }
}

/// Cached forward-pass state needed by `backward`.
pub struct ForwardCache {
    /// Post-activation values per layer, index 0 is the input batch.
    activations: Vec<Matrix>,
}

impl Mlp {
    /// Xavier-normal initialization: weights drawn with
    /// std = sqrt(2 / (fan_in + fan_out)), biases zero. The same seed
    /// always produces identical parameters.
    pub fn init(
        layer_sizes: &[usize],
        hidden_activation: Activation,
        softplus_mask: Vec<bool>,
        seed: u64,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(EmqError::Config(
                "an MLP needs at least an input and an output layer".into(),
            ));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(EmqError::Config("layer sizes must be >= 1".into()));
        }
        let out_dim = *layer_sizes.last().unwrap();
        if softplus_mask.len() != out_dim {
            return Err(EmqError::Config(format!(
                "softplus mask length {} does not match output dim {}",
                softplus_mask.len(),
                out_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(layer_sizes.len() - 1);
        for win in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (win[0], win[1]);
            let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("positive std");
            let mut w = Matrix::zeros(fan_out, fan_in);
            for v in w.data_mut() {
                *v = dist.sample(&mut rng);
            }
            layers.push(Layer {
                w,
                b: vec![0.0; fan_out],
            });
        }
        Ok(Mlp {
            layer_sizes: layer_sizes.to_vec(),
            hidden_activation,
            softplus_mask,
            layers,
            seed,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn softplus_mask(&self) -> &[bool] {
        &self.softplus_mask
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Flat parameter view in declared order (per layer: weights then biases).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.w.data());
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.data().len() + l.b.len())
            .sum()
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(EmqError::Dimension(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let wn = l.w.data().len();
            l.w.data_mut().copy_from_slice(&params[off..off + wn]);
            off += wn;
            let bn = l.b.len();
            l.b.copy_from_slice(&params[off..off + bn]);
            off += bn;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.is_finite() && l.b.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.input_dim() {
            return Err(EmqError::Dimension(format!(
                "batch has {} columns, network expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Forward pass without caching.
    pub fn forward(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(batch)?.0)
    }

    /// Forward pass that records per-layer activations for `backward`.
    pub fn forward_cached(&self, batch: &Matrix) -> Result<(Matrix, ForwardCache)> {
        self.check_input(batch)?;
        let n = batch.rows();
        let n_layers = self.layers.len();
        let mut activations = Vec::with_capacity(n_layers + 1);
        activations.push(batch.clone());
        for (li, layer) in self.layers.iter().enumerate() {
            let input = activations.last().unwrap();
            let (out_dim, in_dim) = (layer.w.rows(), layer.w.cols());
            let mut z = Matrix::zeros(n, out_dim);
            for i in 0..n {
                let x = input.row(i);
                let zr = z.row_mut(i);
                for (o, zo) in zr.iter_mut().enumerate() {
                    let wrow = layer.w.row(o);
                    let mut acc = layer.b[o];
                    for c in 0..in_dim {
                        acc += wrow[c] * x[c];
                    }
                    *zo = acc;
                }
            }
            let last = li == n_layers - 1;
            if last {
                for i in 0..n {
                    let zr = z.row_mut(i);
                    for (o, zo) in zr.iter_mut().enumerate() {
                        if self.softplus_mask[o] {
                            *zo = softplus(*zo);
                        }
                    }
                }
            } else {
                let act = self.hidden_activation;
                for v in z.data_mut() {
                    *v = act.apply(*v);
                }
            }
            activations.push(z);
        }
        let output = activations.last().unwrap().clone();
        Ok((output, ForwardCache { activations }))
    }

    /// Reverse-mode gradients of a scalar loss with respect to every
    /// parameter, given d(loss)/d(outputs) for the cached batch.
    ///
    /// `upstream` must carry any batch-mean normalization already; this
    /// routine only applies the chain rule.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Matrix) -> Result<Gradients> {
        let n_layers = self.layers.len();
        if cache.activations.len() != n_layers + 1 {
            return Err(EmqError::State(
                "forward cache does not match this network".into(),
            ));
        }
        let out = &cache.activations[n_layers];
        if upstream.rows() != out.rows() || upstream.cols() != out.cols() {
            return Err(EmqError::Dimension(format!(
                "upstream gradient is {}x{}, outputs are {}x{}",
                upstream.rows(),
                upstream.cols(),
                out.rows(),
                out.cols()
            )));
        }
        let n = upstream.rows();
        let mut grads = Gradients::zeros_like(self);

        // delta: d loss / d z for the current layer.
        let mut delta = upstream.clone();
        for i in 0..n {
            let a = out.row(i);
            let d = delta.row_mut(i);
            for (o, dv) in d.iter_mut().enumerate() {
                if self.softplus_mask[o] {
                    // a = softplus(z) ⇒ dz = sigmoid(z) = 1 - e^{-a}.
                    *dv *= 1.0 - (-a[o]).exp();
                }
            }
        }

        for li in (0..n_layers).rev() {
            let layer = &self.layers[li];
            let input = &cache.activations[li];
            let (out_dim, in_dim) = (layer.w.rows(), layer.w.cols());
            {
                let g = &mut grads.layers[li];
                for i in 0..n {
                    let d = delta.row(i);
                    let x = input.row(i);
                    for o in 0..out_dim {
                        let dv = d[o];
                        if dv != 0.0 {
                            let gw = g.w.row_mut(o);
                            for c in 0..in_dim {
                                gw[c] += dv * x[c];
                            }
                            g.b[o] += dv;
                        }
                    }
                }
            }
            if li > 0 {
                let act = self.hidden_activation;
                let mut prev = Matrix::zeros(n, in_dim);
                for i in 0..n {
                    let d = delta.row(i);
                    let a = input.row(i);
                    let p = prev.row_mut(i);
                    for o in 0..out_dim {
                        let dv = d[o];
                        if dv != 0.0 {
                            let wrow = layer.w.row(o);
                            for c in 0..in_dim {
                                p[c] += dv * wrow[c];
                            }
                        }
                    }
                    for (c, pv) in p.iter_mut().enumerate() {
                        *pv *= act.deriv_from_output(a[c]);
                    }
                }
                delta = prev;
            }
        }
        Ok(grads)
    }
}
