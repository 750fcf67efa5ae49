//! A small dense feed-forward network with hand-written reverse-mode gradients.
//!
//! Inputs are row-major batches: one sample per row. Layer weights are stored
//! `input × output` so a layer computes `x · W + b`. The network caches the
//! activations of the most recent [`Net::forward`] call so that
//! [`Net::backward`] can produce exact parameter gradients for it.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LEAKY_RELU_ALPHA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu { alpha: f64 },
    Tanh,
    Identity,
}

impl Activation {
    pub fn leaky_relu() -> Self {
        Activation::LeakyRelu {
            alpha: LEAKY_RELU_ALPHA,
        }
    }

    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu { alpha } => {
                if z > 0.0 {
                    z
                } else {
                    alpha * z
                }
            }
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed in terms of the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::LeakyRelu { alpha } => {
                if z > 0.0 {
                    1.0
                } else {
                    alpha
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
    /// Dropout keep probability applied to this layer's output in training mode.
    pub keep_prob: f64,
    /// Whether the ℓ2 penalty applies to this layer's weights.
    pub l2: bool,
}

impl LayerSpec {
    pub fn new(input: usize, output: usize, activation: Activation) -> Self {
        Self {
            input,
            output,
            activation,
            keep_prob: 1.0,
            l2: true,
        }
    }

    pub fn with_dropout(mut self, keep_prob: f64) -> Self {
        self.keep_prob = keep_prob;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct Dense {
    spec: LayerSpec,
    weight: Array2<f64>,
    bias: Array1<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    mask: Option<Array2<f64>>,
}

/// Per-parameter gradients, shape-congruent with the [`Net`] that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Net) -> Self {
        Self {
            weights: net.layers.iter().map(|l| Array2::zeros(l.weight.raw_dim())).collect(),
            biases: net.layers.iter().map(|l| Array1::zeros(l.bias.raw_dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.weights.iter_mut().for_each(|w| *w *= factor);
        self.biases.iter_mut().for_each(|b| *b *= factor);
    }

    pub fn sum_squares(&self) -> f64 {
        self.weights.iter().map(|w| w.iter().map(|x| x * x).sum::<f64>()).sum::<f64>()
            + self.biases.iter().map(|b| b.iter().map(|x| x * x).sum::<f64>()).sum::<f64>()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    /// Flattened in the same order as [`Net::params_flat`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.weights.len() * 2);
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Net {
    layers: Vec<Dense>,
    rng: ChaCha8Rng,
    cache: Option<Vec<LayerCache>>,
}

impl Net {
    /// Builds a network with orthogonal initialisation: `hidden_gain` for every
    /// layer but the last, `head_gain` for the output layer. Biases start at zero.
    pub fn new(specs: &[LayerSpec], hidden_gain: f64, head_gain: f64, seed: u64) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::config("network needs at least one layer"));
        }
        for pair in specs.windows(2) {
            if pair[0].output != pair[1].input {
                return Err(Error::config(format!(
                    "layer widths do not chain: {} -> {}",
                    pair[0].output, pair[1].input
                )));
            }
        }
        for spec in specs {
            if !(spec.keep_prob > 0.0 && spec.keep_prob <= 1.0) {
                return Err(Error::config(format!("keep probability {} out of (0, 1]", spec.keep_prob)));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = specs.len() - 1;
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let gain = if i == last { head_gain } else { hidden_gain };
                Dense {
                    spec: *spec,
                    weight: orthogonal(spec.input, spec.output, gain, &mut rng),
                    bias: Array1::zeros(spec.output),
                }
            })
            .collect();
        let dropout_seed = rng.random();
        Ok(Self {
            layers,
            rng: ChaCha8Rng::seed_from_u64(dropout_seed),
            cache: None,
        })
    }

    /// Multi-layer perceptron: hidden layers share `activation`, the head is linear.
    pub fn mlp(
        input: usize,
        hidden: &[usize],
        output: usize,
        activation: Activation,
        head_gain: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut specs = Vec::with_capacity(hidden.len() + 1);
        let mut width = input;
        for &h in hidden {
            specs.push(LayerSpec::new(width, h, activation));
            width = h;
        }
        specs.push(LayerSpec::new(width, output, Activation::Identity));
        Self::new(&specs, 1.0, head_gain, seed)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.input
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.output
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_input(&self, input: &ArrayView2<f64>) -> Result<()> {
        if input.ncols() != self.input_dim() {
            return Err(Error::contract(format!(
                "input width {} does not match network input {}",
                input.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Evaluation-mode forward pass; touches neither the cache nor the dropout RNG.
    pub fn predict(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&input)?;
        let mut x = input.to_owned();
        for layer in &self.layers {
            let mut z = x.dot(&layer.weight);
            z += &layer.bias;
            let act = layer.spec.activation;
            z.mapv_inplace(|v| act.apply(v));
            x = z;
        }
        Ok(x)
    }

    pub fn predict_one(&self, input: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::contract(e.to_string()))?;
        Ok(self.predict(view)?.into_raw_vec_and_offset().0)
    }

    /// Forward pass that caches activations for a following [`Net::backward`].
    /// In training mode, dropout masks are drawn from the network's own RNG.
    pub fn forward(&mut self, input: ArrayView2<f64>, mode: Mode) -> Result<Array2<f64>> {
        self.check_input(&input)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.to_owned();
        for layer in &self.layers {
            let mut pre = x.dot(&layer.weight);
            pre += &layer.bias;
            let act = layer.spec.activation;
            let mut out = pre.mapv(|v| act.apply(v));
            let mask = if mode == Mode::Train && layer.spec.keep_prob < 1.0 {
                let keep = layer.spec.keep_prob;
                let rng = &mut self.rng;
                let mask = Array2::from_shape_simple_fn(out.raw_dim(), || {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                out *= &mask;
                Some(mask)
            } else {
                None
            };
            caches.push(LayerCache {
                input: x,
                pre,
                mask,
            });
            x = out;
        }
        self.cache = Some(caches);
        Ok(x)
    }

    /// Gradient of `sum(output ⊙ upstream)` with respect to every parameter,
    /// for the batch seen by the most recent [`Net::forward`].
    pub fn backward(&self, upstream: ArrayView2<f64>) -> Result<Gradients> {
        Ok(self.backward_with_input_grad(upstream)?.0)
    }

    /// Like [`Net::backward`] but also returns the gradient with respect to the input batch.
    pub fn backward_with_input_grad(&self, upstream: ArrayView2<f64>) -> Result<(Gradients, Array2<f64>)> {
        let caches = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::contract("backward called without a cached forward pass"))?;
        let batch = caches[0].input.nrows();
        if upstream.dim() != (batch, self.output_dim()) {
            return Err(Error::contract(format!(
                "upstream gradient shape {:?} does not match cached output ({}, {})",
                upstream.dim(),
                batch,
                self.output_dim()
            )));
        }
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        let mut grad = upstream.to_owned();
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            if let Some(mask) = &cache.mask {
                grad *= mask;
            }
            let act = layer.spec.activation;
            // Derivative from the pre-activation; the cached output may carry the dropout scale.
            ndarray::Zip::from(&mut grad)
                .and(&cache.pre)
                .for_each(|g, &z| *g *= act.derivative(z, act.apply(z)));
            weights.push(cache.input.t().dot(&grad).as_standard_layout().into_owned());
            biases.push(grad.sum_axis(Axis(0)));
            grad = grad.dot(&layer.weight.t());
        }
        weights.reverse();
        biases.reverse();
        Ok((Gradients { weights, biases }, grad))
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            out.extend(layer.weight.iter().copied());
            out.extend(layer.bias.iter().copied());
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::contract(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for w in layer.weight.iter_mut() {
                *w = params[offset];
                offset += 1;
            }
            for b in layer.bias.iter_mut() {
                *b = params[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().all(|x| x.is_finite()) && l.bias.iter().all(|x| x.is_finite()))
    }

    /// Parameter tensors paired with whether ℓ2 applies to each.
    fn tensors_mut(&mut self) -> Vec<(&mut [f64], bool)> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for layer in &mut self.layers {
            let l2 = layer.spec.l2;
            out.push((layer.weight.as_slice_mut().expect("standard layout"), l2));
            out.push((layer.bias.as_slice_mut().expect("standard layout"), false));
        }
        out
    }
}

/// Orthogonal matrix of shape `rows × cols` scaled by `gain`.
fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let mut q = Array2::<f64>::from_shape_simple_fn((tall, short), || rng.sample(StandardNormal));
    // Modified Gram-Schmidt over columns.
    for j in 0..short {
        for i in 0..j {
            let dot = q.column(i).dot(&q.column(j));
            let prev = q.column(i).to_owned();
            q.column_mut(j).scaled_add(-dot, &prev);
        }
        let norm = q.column(j).dot(&q.column(j)).sqrt().max(1e-12);
        q.column_mut(j).mapv_inplace(|v| v / norm);
    }
    let q = if rows >= cols { q } else { q.t().to_owned() };
    let mut out = Array2::zeros((rows, cols));
    out.assign(&q.slice(s![..rows, ..cols]));
    out * gain
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam optimiser state for a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One Adam step. `l2_coeff · w` is added to the gradient of every tensor
    /// flagged for decay before the moment updates.
    pub fn step_tensors(&mut self, params: Vec<(&mut [f64], bool)>, grads: &[&[f64]], l2_coeff: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::contract("parameter and gradient tensor counts differ"));
        }
        for ((p, _), g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(Error::contract("parameter and gradient shapes differ"));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::training("non-finite gradient entry"));
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        } else if self.m.len() != grads.len() {
            return Err(Error::contract("optimizer state does not match parameter list"));
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bias1 = 1.0 - beta1.powi(self.t as i32);
        let bias2 = 1.0 - beta2.powi(self.t as i32);
        let step_size = lr * bias2.sqrt() / bias1;
        for (((p, decay), g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let decay = if decay { l2_coeff } else { 0.0 };
            for i in 0..p.len() {
                let grad = g[i] + decay * p[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * grad;
                v[i] = beta2 * v[i] + (1.0 - beta2) * grad * grad;
                p[i] -= step_size * m[i] / (v[i].sqrt() + eps * bias2.sqrt());
            }
        }
        Ok(())
    }

    pub fn step(&mut self, net: &mut Net, grads: &Gradients, l2_coeff: f64) -> Result<()> {
        self.step_with_extra(net, grads, None, l2_coeff)
    }

    /// Steps a network together with one extra free parameter vector (never decayed).
    pub fn step_with_extra(
        &mut self,
        net: &mut Net,
        grads: &Gradients,
        extra: Option<(&mut [f64], &[f64])>,
        l2_coeff: f64,
    ) -> Result<()> {
        if grads.weights.len() != net.layers.len() {
            return Err(Error::contract("gradient bundle does not match network depth"));
        }
        let mut params = net.tensors_mut();
        let mut grad_slices = grads.tensors();
        if let Some((p, g)) = extra {
            params.push((p, false));
            grad_slices.push(g);
        }
        self.step_tensors(params, &grad_slices, l2_coeff)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    layers: Vec<LayerSpec>,
    extra: usize,
}

const CHECKPOINT_FORMAT: &str = "prefrl-net/1";

/// Writes a JSON header line followed by every parameter as a little-endian f64:
/// per layer the weights row-major then the bias, then `extra`.
pub fn write_checkpoint<W: Write>(mut out: W, net: &Net, extra: &[f64]) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        layers: net.specs(),
        extra: extra.len(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for v in net.params_flat().iter().chain(extra) {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(Net, Vec<f64>)> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::integrity("checkpoint header missing"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..newline])?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::integrity(format!("unknown checkpoint format {}", header.format)));
    }
    let body = &bytes[newline + 1..];
    if body.len() % 8 != 0 {
        return Err(Error::integrity("checkpoint body is not a whole number of f64 values"));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let mut net = Net::new(&header.layers, 1.0, 1.0, 0)?;
    let n = net.num_params();
    if values.len() != n + header.extra {
        return Err(Error::integrity(format!(
            "checkpoint holds {} values, header describes {}",
            values.len(),
            n + header.extra
        )));
    }
    net.set_params_flat(&values[..n])?;
    Ok((net, values[n..].to_vec()))
}

pub fn save_checkpoint(path: &Path, net: &Net, extra: &[f64]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut writer = std::io::BufWriter::new(file);
    write_checkpoint(&mut writer, net, extra)?;
    writer.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Net, Vec<f64>)> {
    read_checkpoint(std::fs::File::open(path)?)
}
