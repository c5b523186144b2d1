//! Q-function approximator: a small convolutional network over the
//! coverage bitmap with hand-written forward and backward passes, the
//! importance-weighted squared TD loss, Adam updates with gradient-norm
//! clipping, and binary parameter checkpoints.
//!
//! Everything runs in double precision so the finite-difference gradient
//! checks can be tight.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::replay::Reader;
use crate::scenario::CoverageBitmap;

/// One layer of the fixed layer vocabulary. Convolutions are 2D with
/// stride 1 and no padding; `Dense` flattens whatever precedes it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { out_channels: usize, kernel: usize },
    Relu,
    Dense { units: usize },
}

/// Architecture descriptor: input bitmap shape plus the layer stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_side: usize,
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Default architecture for a K-by-K bitmap and `n_actions` outputs:
    /// conv 3x3x8, conv 3x3x16, dense 128, dense `n_actions`, with ReLU
    /// between trainable layers.
    pub fn default_for(grid_k: usize, n_actions: usize) -> Self {
        Self {
            input_side: grid_k,
            input_channels: 1,
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 8,
                    kernel: 3,
                },
                LayerSpec::Relu,
                LayerSpec::Conv {
                    out_channels: 16,
                    kernel: 3,
                },
                LayerSpec::Relu,
                LayerSpec::Dense { units: 128 },
                LayerSpec::Relu,
                LayerSpec::Dense { units: n_actions },
            ],
        }
    }

    /// A lighter stack for small instances and quick experiments.
    pub fn compact_for(grid_k: usize, n_actions: usize) -> Self {
        Self {
            input_side: grid_k,
            input_channels: 1,
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 4,
                    kernel: 3,
                },
                LayerSpec::Relu,
                LayerSpec::Conv {
                    out_channels: 8,
                    kernel: 3,
                },
                LayerSpec::Relu,
                LayerSpec::Dense { units: 64 },
                LayerSpec::Relu,
                LayerSpec::Dense { units: n_actions },
            ],
        }
    }

    /// A plain MLP over the flattened bitmap.
    pub fn mlp_for(grid_k: usize, hidden: &[usize], n_actions: usize) -> Self {
        let mut layers = Vec::new();
        for &units in hidden {
            layers.push(LayerSpec::Dense { units });
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Dense { units: n_actions });
        Self {
            input_side: grid_k,
            input_channels: 1,
            layers,
        }
    }

    pub fn n_outputs(&self) -> Result<usize> {
        Ok(self.shapes()?.last().unwrap().len())
    }

    /// Walks the stack and returns each layer's output shape, validating
    /// the wiring as it goes.
    fn shapes(&self) -> Result<Vec<Shape>> {
        if self.input_side == 0 || self.input_channels == 0 {
            return Err(Error::InvalidNetwork("empty input shape".into()));
        }
        let mut shape = Shape::Spatial {
            c: self.input_channels,
            h: self.input_side,
            w: self.input_side,
        };
        let mut out = Vec::with_capacity(self.layers.len());
        if self.layers.is_empty() {
            return Err(Error::InvalidNetwork("no layers".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match (*layer, shape) {
                (LayerSpec::Conv { out_channels, kernel }, Shape::Spatial { c: _, h, w }) => {
                    if kernel == 0 || out_channels == 0 {
                        return Err(Error::InvalidNetwork(format!(
                            "layer {i}: conv with zero size"
                        )));
                    }
                    if kernel > h || kernel > w {
                        return Err(Error::InvalidNetwork(format!(
                            "layer {i}: kernel {kernel} exceeds input {h}x{w}"
                        )));
                    }
                    Shape::Spatial {
                        c: out_channels,
                        h: h - kernel + 1,
                        w: w - kernel + 1,
                    }
                }
                (LayerSpec::Conv { .. }, Shape::Flat(_)) => {
                    return Err(Error::InvalidNetwork(format!(
                        "layer {i}: conv after dense is not supported"
                    )));
                }
                (LayerSpec::Relu, s) => s,
                (LayerSpec::Dense { units }, s) => {
                    if units == 0 {
                        return Err(Error::InvalidNetwork(format!("layer {i}: dense(0)")));
                    }
                    let _ = s.len();
                    Shape::Flat(units)
                }
            };
            out.push(shape);
        }
        match out.last().unwrap() {
            Shape::Flat(_) => Ok(out),
            Shape::Spatial { .. } => Err(Error::InvalidNetwork(
                "network must end in a dense layer".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl Shape {
    fn len(&self) -> usize {
        match *self {
            Shape::Spatial { c, h, w } => c * h * w,
            Shape::Flat(n) => n,
        }
    }
}

/// A concrete layer with its parameters. Activations are flat vectors
/// in channel-major order (`c * h * w + y * w + x`).
#[derive(Debug, Clone)]
enum Layer {
    Conv {
        in_c: usize,
        in_h: usize,
        in_w: usize,
        out_c: usize,
        k: usize,
        weights: Vec<f64>,
        biases: Vec<f64>,
    },
    Relu,
    Dense {
        in_len: usize,
        out_len: usize,
        weights: Vec<f64>,
        biases: Vec<f64>,
    },
}

/// The Q-network: parameters plus the architecture that shapes them.
#[derive(Debug, Clone)]
pub struct QNetwork {
    spec: NetworkSpec,
    layers: Vec<Layer>,
}

/// Parameter-shaped gradient accumulator: one flat vector per trainable
/// tensor, in network order (conv w, conv b, ..., dense w, dense b).
#[derive(Debug, Clone)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    fn zeros_like(net: &QNetwork) -> Self {
        Gradients(net.tensors().iter().map(|t| vec![0.0; t.len()]).collect())
    }
}

impl QNetwork {
    /// He-uniform initialization, deterministic for a fixed seed.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        net.randomize(seed);
        Ok(net)
    }

    /// All-zero parameters; handy for tests.
    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        spec.shapes()?;
        let mut shape = Shape::Spatial {
            c: spec.input_channels,
            h: spec.input_side,
            w: spec.input_side,
        };
        let mut layers = Vec::with_capacity(spec.layers.len());
        for layer in &spec.layers {
            let built = match (*layer, shape) {
                (LayerSpec::Conv { out_channels, kernel }, Shape::Spatial { c, h, w }) => {
                    shape = Shape::Spatial {
                        c: out_channels,
                        h: h - kernel + 1,
                        w: w - kernel + 1,
                    };
                    Layer::Conv {
                        in_c: c,
                        in_h: h,
                        in_w: w,
                        out_c: out_channels,
                        k: kernel,
                        weights: vec![0.0; out_channels * c * kernel * kernel],
                        biases: vec![0.0; out_channels],
                    }
                }
                (LayerSpec::Relu, _) => Layer::Relu,
                (LayerSpec::Dense { units }, s) => {
                    let in_len = s.len();
                    shape = Shape::Flat(units);
                    Layer::Dense {
                        in_len,
                        out_len: units,
                        weights: vec![0.0; units * in_len],
                        biases: vec![0.0; units],
                    }
                }
                _ => unreachable!("spec validated above"),
            };
            layers.push(built);
        }
        Ok(Self { spec, layers })
    }

    /// He-uniform weights, zero biases.
    fn randomize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(12);
        for layer in &mut self.layers {
            let (fan_in, weights) = match layer {
                Layer::Conv {
                    in_c, k, weights, ..
                } => (*in_c * *k * *k, weights),
                Layer::Dense {
                    in_len, weights, ..
                } => (*in_len, weights),
                Layer::Relu => continue,
            };
            let limit = (6.0 / fan_in as f64).sqrt();
            for w in weights.iter_mut() {
                *w = rng.gen_range(-limit..limit);
            }
        }
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn input_len(&self) -> usize {
        self.spec.input_side * self.spec.input_side * self.spec.input_channels
    }

    pub fn n_outputs(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Dense { out_len, .. }) => *out_len,
            _ => unreachable!("spec validation requires a trailing dense layer"),
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv {
                    weights, biases, ..
                }
                | Layer::Dense {
                    weights, biases, ..
                } => {
                    out.push(weights);
                    out.push(biases);
                }
                Layer::Relu => {}
            }
        }
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv {
                    weights, biases, ..
                }
                | Layer::Dense {
                    weights, biases, ..
                } => {
                    out.push(weights);
                    out.push(biases);
                }
                Layer::Relu => {}
            }
        }
        out
    }

    /// Q-values for one input state (flat, already normalized).
    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        assert_eq!(input.len(), self.input_len(), "input shape mismatch");
        let mut acts = self.forward_cached(input);
        acts.pop().unwrap()
    }

    /// Runs the stack keeping every intermediate activation (index 0 is
    /// the input), for use by the backward pass.
    fn forward_cached(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.to_vec());
        for layer in &self.layers {
            let x = acts.last().unwrap();
            let y = match layer {
                Layer::Conv {
                    in_c,
                    in_h,
                    in_w,
                    out_c,
                    k,
                    weights,
                    biases,
                } => conv_forward(x, *in_c, *in_h, *in_w, *out_c, *k, weights, biases),
                Layer::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
                Layer::Dense {
                    in_len,
                    out_len,
                    weights,
                    biases,
                } => dense_forward(x, *in_len, *out_len, weights, biases),
            };
            acts.push(y);
        }
        acts
    }

    /// Backpropagates `grad_out` (gradient w.r.t. the network output)
    /// through cached activations, accumulating parameter gradients.
    fn backward(&self, acts: &[Vec<f64>], grad_out: Vec<f64>, grads: &mut Gradients) {
        let mut grad = grad_out;
        let mut tensor_idx = grads.0.len();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let input = &acts[li];
            match layer {
                Layer::Relu => {
                    for (g, &x) in grad.iter_mut().zip(input) {
                        if x <= 0.0 {
                            *g = 0.0;
                        }
                    }
                }
                Layer::Dense {
                    in_len,
                    out_len,
                    weights,
                    ..
                } => {
                    tensor_idx -= 2;
                    let (dw, db) = {
                        let (a, b) = grads.0.split_at_mut(tensor_idx + 1);
                        (&mut a[tensor_idx], &mut b[0])
                    };
                    let mut grad_in = vec![0.0; *in_len];
                    for o in 0..*out_len {
                        let g = grad[o];
                        db[o] += g;
                        let row = &weights[o * in_len..(o + 1) * in_len];
                        let drow = &mut dw[o * in_len..(o + 1) * in_len];
                        for i in 0..*in_len {
                            drow[i] += g * input[i];
                            grad_in[i] += g * row[i];
                        }
                    }
                    grad = grad_in;
                }
                Layer::Conv {
                    in_c,
                    in_h,
                    in_w,
                    out_c,
                    k,
                    weights,
                    ..
                } => {
                    tensor_idx -= 2;
                    let (dw, db) = {
                        let (a, b) = grads.0.split_at_mut(tensor_idx + 1);
                        (&mut a[tensor_idx], &mut b[0])
                    };
                    grad = conv_backward(
                        input, &grad, *in_c, *in_h, *in_w, *out_c, *k, weights, dw, db,
                    );
                }
            }
        }
        debug_assert_eq!(tensor_idx, 0);
    }

    /// Importance-weighted squared-TD loss over a batch:
    /// `L = (1/l) * sum_j w_j * (y_j - Q(s_j, a_j))^2`.
    ///
    /// Returns the loss, the gradient w.r.t. every parameter, and the
    /// per-sample TD errors `y_j - Q(s_j, a_j)` for priority updates.
    pub fn loss_and_grad(&self, batch: &[TrainSample]) -> (f64, Gradients, Vec<f64>) {
        assert!(!batch.is_empty());
        let l = batch.len() as f64;
        let mut grads = Gradients::zeros_like(self);
        let mut loss = 0.0;
        let mut deltas = Vec::with_capacity(batch.len());
        for sample in batch {
            let acts = self.forward_cached(sample.input);
            let q = &acts[acts.len() - 1];
            let delta = sample.target - q[sample.action];
            loss += sample.weight * delta * delta / l;
            let mut grad_out = vec![0.0; q.len()];
            grad_out[sample.action] = -2.0 * sample.weight * delta / l;
            self.backward(&acts, grad_out, &mut grads);
            deltas.push(delta);
        }
        (loss, grads, deltas)
    }

    /// One Adam update from the given gradients; the gradient is first
    /// clipped to `cfg.clip_norm` in global L2 norm.
    pub fn optimizer_step(
        &mut self,
        mut grads: Gradients,
        state: &mut AdamState,
        cfg: &AdamConfig,
    ) {
        clip_gradient_norm(&mut grads, cfg.clip_norm);
        state.t += 1;
        let t = state.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for ((tensor, grad), (m, v)) in self
            .tensors_mut()
            .into_iter()
            .zip(&grads.0)
            .zip(state.m.iter_mut().zip(state.v.iter_mut()))
        {
            for i in 0..tensor.len() {
                let g = grad[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                tensor[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
    }

    /// Serializes architecture and parameters (versioned, little-endian
    /// 64-bit floats).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"ABSQCKPT");
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.spec.input_side as u32).to_le_bytes());
        out.extend_from_slice(&(self.spec.input_channels as u32).to_le_bytes());
        out.extend_from_slice(&(self.spec.layers.len() as u32).to_le_bytes());
        for layer in &self.spec.layers {
            match *layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                } => {
                    out.push(0);
                    out.extend_from_slice(&(out_channels as u32).to_le_bytes());
                    out.extend_from_slice(&(kernel as u32).to_le_bytes());
                }
                LayerSpec::Relu => out.push(1),
                LayerSpec::Dense { units } => {
                    out.push(2);
                    out.extend_from_slice(&(units as u32).to_le_bytes());
                }
            }
        }
        for tensor in self.tensors() {
            out.extend_from_slice(&(tensor.len() as u64).to_le_bytes());
            for &v in tensor.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "network checkpoint");
        if r.take(8)? != b"ABSQCKPT" {
            return Err(Error::MalformedFile {
                what: "network checkpoint",
                detail: "bad magic".into(),
            });
        }
        let version = r.u32()?;
        if version != 1 {
            return Err(Error::MalformedFile {
                what: "network checkpoint",
                detail: format!("unsupported version {version}"),
            });
        }
        let input_side = r.u32()? as usize;
        let input_channels = r.u32()? as usize;
        let n_layers = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let layer = match r.u8()? {
                0 => LayerSpec::Conv {
                    out_channels: r.u32()? as usize,
                    kernel: r.u32()? as usize,
                },
                1 => LayerSpec::Relu,
                2 => LayerSpec::Dense {
                    units: r.u32()? as usize,
                },
                tag => {
                    return Err(Error::MalformedFile {
                        what: "network checkpoint",
                        detail: format!("unknown layer tag {tag}"),
                    })
                }
            };
            layers.push(layer);
        }
        let spec = NetworkSpec {
            input_side,
            input_channels,
            layers,
        };
        let mut net = QNetwork::zeros(spec)?;
        for tensor in net.tensors_mut() {
            let len = r.u64()? as usize;
            if len != tensor.len() {
                return Err(Error::MalformedFile {
                    what: "network checkpoint",
                    detail: format!("tensor length {len} does not match architecture"),
                });
            }
            for v in tensor.iter_mut() {
                *v = r.f64()?;
            }
        }
        Ok(net)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// One element of a training batch.
#[derive(Debug, Clone, Copy)]
pub struct TrainSample<'a> {
    pub input: &'a [f64],
    pub action: usize,
    pub target: f64,
    pub weight: f64,
}

/// Adam accumulators, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new_for(net: &QNetwork) -> Self {
        let zeros: Vec<Vec<f64>> = net.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 10.0,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

pub fn gradient_norm(grads: &Gradients) -> f64 {
    grads
        .0
        .iter()
        .flat_map(|t| t.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Scales the gradient down to `max_norm` when it exceeds it; returns
/// the pre-clip norm.
pub fn clip_gradient_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = gradient_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for t in &mut grads.0 {
            for g in t.iter_mut() {
                *g *= scale;
            }
        }
    }
    norm
}

/// Normalizes bitmap counts into [0, 1] network inputs by dividing by
/// the scenario's per-cell GU cap.
pub fn encode_bitmap(bitmap: &CoverageBitmap, cell_cap: u32) -> Vec<f64> {
    let cap = cell_cap.max(1) as f64;
    bitmap.as_slice().iter().map(|&c| c as f64 / cap).collect()
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    x: &[f64],
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    k: usize,
    weights: &[f64],
    biases: &[f64],
) -> Vec<f64> {
    let out_h = in_h - k + 1;
    let out_w = in_w - k + 1;
    let mut y = vec![0.0; out_c * out_h * out_w];
    for oc in 0..out_c {
        let w_base = oc * in_c * k * k;
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = biases[oc];
                for ic in 0..in_c {
                    let x_base = ic * in_h * in_w;
                    let w_ic = w_base + ic * k * k;
                    for ky in 0..k {
                        let x_row = x_base + (oy + ky) * in_w + ox;
                        let w_row = w_ic + ky * k;
                        for kx in 0..k {
                            acc += weights[w_row + kx] * x[x_row + kx];
                        }
                    }
                }
                y[oc * out_h * out_w + oy * out_w + ox] = acc;
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    grad_out: &[f64],
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    k: usize,
    weights: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let out_h = in_h - k + 1;
    let out_w = in_w - k + 1;
    let mut grad_in = vec![0.0; in_c * in_h * in_w];
    for oc in 0..out_c {
        let w_base = oc * in_c * k * k;
        for oy in 0..out_h {
            for ox in 0..out_w {
                let g = grad_out[oc * out_h * out_w + oy * out_w + ox];
                if g == 0.0 {
                    continue;
                }
                db[oc] += g;
                for ic in 0..in_c {
                    let x_base = ic * in_h * in_w;
                    let w_ic = w_base + ic * k * k;
                    for ky in 0..k {
                        let x_row = x_base + (oy + ky) * in_w + ox;
                        let w_row = w_ic + ky * k;
                        for kx in 0..k {
                            dw[w_row + kx] += g * x[x_row + kx];
                            grad_in[x_row + kx] += g * weights[w_row + kx];
                        }
                    }
                }
            }
        }
    }
    grad_in
}

fn dense_forward(
    x: &[f64],
    in_len: usize,
    out_len: usize,
    weights: &[f64],
    biases: &[f64],
) -> Vec<f64> {
    let mut y = Vec::with_capacity(out_len);
    for o in 0..out_len {
        let row = &weights[o * in_len..(o + 1) * in_len];
        let acc: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum();
        y.push(acc + biases[o]);
    }
    y
}
