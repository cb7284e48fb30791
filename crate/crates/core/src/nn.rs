//! Small feed-forward network engine: dense, batch-norm, LeakyReLU and
//! sigmoid layers with exact reverse-mode gradients, binary cross-entropy
//! and Adam.

use std::fs;
use std::io;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use thiserror::Error;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_EPSILON: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.99;
/// Predictions are clamped to `[P_CLAMP, 1 - P_CLAMP]` inside the loss.
pub const P_CLAMP: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("layer {layer}: expected width {expected}, got {got}")]
    Dimension {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("batch norm in training mode needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),
    #[error("backward called without a cached forward pass")]
    NoForward,
    #[error("network must end with a sigmoid for a logit gradient")]
    NoSigmoid,
    #[error("loss inputs differ in length ({0} vs {1})")]
    LossShape(usize, usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

#[derive(Debug, Clone)]
pub struct Dense {
    /// `out × in`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub grad_weights: Array2<f64>,
    pub grad_bias: Array1<f64>,
    input: Option<Array2<f64>>,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = Array2::from_shape_simple_fn((outputs, inputs), || rng.gen_range(-limit..=limit));
        Self::from_parts(weights, Array1::zeros(outputs))
    }

    pub fn from_parts(weights: Array2<f64>, bias: Array1<f64>) -> Self {
        assert_eq!(weights.nrows(), bias.len(), "bias length must equal output width");
        let (o, i) = weights.dim();
        Self {
            grad_weights: Array2::zeros((o, i)),
            grad_bias: Array1::zeros(o),
            weights,
            bias,
            input: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub epsilon: f64,
    pub momentum: f64,
    pub grad_gamma: Array1<f64>,
    pub grad_beta: Array1<f64>,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
    batch_stats: bool,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Array1::ones(features),
            beta: Array1::zeros(features),
            running_mean: Array1::zeros(features),
            running_var: Array1::ones(features),
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
            grad_gamma: Array1::zeros(features),
            grad_beta: Array1::zeros(features),
            cache: None,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Dense(Dense),
    BatchNorm(BatchNorm),
    LeakyRelu { slope: f64, input: Option<Array2<f64>> },
    Sigmoid { output: Option<Array2<f64>> },
}

impl Layer {
    pub fn dense(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Layer::Dense(Dense::new(inputs, outputs, rng))
    }

    pub fn batch_norm(features: usize) -> Self {
        Layer::BatchNorm(BatchNorm::new(features))
    }

    pub fn leaky_relu() -> Self {
        Layer::LeakyRelu {
            slope: LEAKY_SLOPE,
            input: None,
        }
    }

    pub fn sigmoid() -> Self {
        Layer::Sigmoid { output: None }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "Dense",
            Layer::BatchNorm(_) => "BatchNorm",
            Layer::LeakyRelu { .. } => "LeakyReLU",
            Layer::Sigmoid { .. } => "Sigmoid",
        }
    }

    /// Input and output widths; `None` for width-preserving activations.
    fn widths(&self) -> Option<(usize, usize)> {
        match self {
            Layer::Dense(d) => Some((d.inputs(), d.outputs())),
            Layer::BatchNorm(b) => Some((b.features(), b.features())),
            _ => None,
        }
    }

    /// `(trainable, total)`; batch norm's running statistics count towards
    /// the total only.
    pub fn parameter_count(&self) -> (usize, usize) {
        match self {
            Layer::Dense(d) => (d.parameter_count(), d.parameter_count()),
            Layer::BatchNorm(b) => (2 * b.features(), 4 * b.features()),
            _ => (0, 0),
        }
    }

    fn forward(&mut self, x: &Array2<f64>, mode: Mode) -> Result<Array2<f64>, NnError> {
        Ok(match self {
            Layer::Dense(d) => {
                let y = x.dot(&d.weights.t()) + &d.bias;
                d.input = Some(x.clone());
                y
            }
            Layer::BatchNorm(bn) => {
                let rows = x.nrows();
                let (mean, var, batch_stats) = match mode {
                    Mode::Train => {
                        if rows < 2 {
                            return Err(NnError::BatchTooSmall(rows));
                        }
                        let mean = x.mean_axis(Axis(0)).expect("rows > 0");
                        let var = (x - &mean).mapv(|v| v * v).mean_axis(Axis(0)).expect("rows > 0");
                        let m = bn.momentum;
                        bn.running_mean = &bn.running_mean * m + &mean * (1.0 - m);
                        bn.running_var = &bn.running_var * m + &var * (1.0 - m);
                        (mean, var, true)
                    }
                    Mode::Inference => (bn.running_mean.clone(), bn.running_var.clone(), false),
                };
                let inv_std = var.mapv(|v| 1.0 / (v + bn.epsilon).sqrt());
                let normalized = (x - &mean) * &inv_std;
                let y = &normalized * &bn.gamma + &bn.beta;
                bn.cache = Some(BnCache {
                    normalized,
                    inv_std,
                    batch_stats,
                });
                y
            }
            Layer::LeakyRelu { slope, input } => {
                let s = *slope;
                *input = Some(x.clone());
                x.mapv(|v| if v >= 0.0 { v } else { s * v })
            }
            Layer::Sigmoid { output } => {
                let y = x.mapv(sigmoid);
                *output = Some(y.clone());
                y
            }
        })
    }

    /// Stores parameter gradients and returns the gradient for the input.
    fn backward(&mut self, g: &Array2<f64>) -> Result<Array2<f64>, NnError> {
        Ok(match self {
            Layer::Dense(d) => {
                let x = d.input.as_ref().ok_or(NnError::NoForward)?;
                d.grad_weights = g.t().dot(x);
                d.grad_bias = g.sum_axis(Axis(0));
                g.dot(&d.weights)
            }
            Layer::BatchNorm(bn) => {
                let c = bn.cache.as_ref().ok_or(NnError::NoForward)?;
                bn.grad_gamma = (g * &c.normalized).sum_axis(Axis(0));
                bn.grad_beta = g.sum_axis(Axis(0));
                let gx = g * &bn.gamma;
                if c.batch_stats {
                    let b = g.nrows() as f64;
                    let sum = gx.sum_axis(Axis(0));
                    let dot = (&gx * &c.normalized).sum_axis(Axis(0));
                    ((&gx * b) - &sum - &(&c.normalized * &dot)) * &(&c.inv_std / b)
                } else {
                    gx * &c.inv_std
                }
            }
            Layer::LeakyRelu { slope, input } => {
                let x = input.as_ref().ok_or(NnError::NoForward)?;
                let s = *slope;
                let mut out = g.clone();
                out.zip_mut_with(x, |o, &v| {
                    if v < 0.0 {
                        *o *= s
                    }
                });
                out
            }
            Layer::Sigmoid { output } => {
                let y = output.as_ref().ok_or(NnError::NoForward)?;
                g * &y.mapv(|p| p * (1.0 - p))
            }
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    mode: Mode,
    input_width: usize,
    output_width: usize,
}

impl Network {
    /// Checks that adjacent layer widths chain.
    pub fn new(layers: Vec<Layer>) -> Result<Self, NnError> {
        let mut width: Option<usize> = None;
        let mut input_width = None;
        for (i, layer) in layers.iter().enumerate() {
            if let Some((inp, out)) = layer.widths() {
                if let Some(w) = width {
                    if w != inp {
                        return Err(NnError::Dimension {
                            layer: i,
                            expected: w,
                            got: inp,
                        });
                    }
                }
                input_width.get_or_insert(inp);
                width = Some(out);
            }
        }
        let (Some(input_width), Some(output_width)) = (input_width, width) else {
            return Err(NnError::Checkpoint("network has no sized layer".into()));
        };
        Ok(Self {
            layers,
            mode: Mode::Train,
            input_width,
            output_width,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn output_width(&self) -> usize {
        self.output_width
    }

    /// `(trainable, total)` summed over layers.
    pub fn parameter_count(&self) -> (usize, usize) {
        self.layers
            .iter()
            .map(Layer::parameter_count)
            .fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1))
    }

    pub fn forward(&mut self, batch: &Array2<f64>) -> Result<Array2<f64>, NnError> {
        if batch.ncols() != self.input_width {
            return Err(NnError::Dimension {
                layer: 0,
                expected: self.input_width,
                got: batch.ncols(),
            });
        }
        let mode = self.mode;
        let mut x = batch.clone();
        for layer in &mut self.layers {
            x = layer.forward(&x, mode)?;
        }
        Ok(x)
    }

    /// Back-propagates `grad` (w.r.t. the network output), storing every
    /// parameter gradient, and returns the gradient w.r.t. the input.
    pub fn backward(&mut self, grad: &Array2<f64>) -> Result<Array2<f64>, NnError> {
        self.backward_from(self.layers.len(), grad)
    }

    /// Like `backward`, with `grad` taken w.r.t. the input of the final
    /// sigmoid (the fused cross-entropy gradient).
    pub fn backward_logits(&mut self, grad: &Array2<f64>) -> Result<Array2<f64>, NnError> {
        match self.layers.last() {
            Some(Layer::Sigmoid { output: Some(_) }) => {}
            Some(Layer::Sigmoid { output: None }) => return Err(NnError::NoForward),
            _ => return Err(NnError::NoSigmoid),
        }
        self.backward_from(self.layers.len() - 1, grad)
    }

    fn backward_from(&mut self, end: usize, grad: &Array2<f64>) -> Result<Array2<f64>, NnError> {
        let mut g = grad.clone();
        for layer in self.layers[..end].iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    /// Trainable parameters paired with their gradients, in a fixed order.
    pub fn params_and_grads(&mut self) -> Vec<(&mut [f64], &[f64])> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) => {
                    out.push((
                        d.weights.as_slice_mut().expect("standard layout"),
                        d.grad_weights.as_slice().expect("standard layout"),
                    ));
                    out.push((
                        d.bias.as_slice_mut().expect("contiguous"),
                        d.grad_bias.as_slice().expect("contiguous"),
                    ));
                }
                Layer::BatchNorm(b) => {
                    out.push((
                        b.gamma.as_slice_mut().expect("contiguous"),
                        b.grad_gamma.as_slice().expect("contiguous"),
                    ));
                    out.push((
                        b.beta.as_slice_mut().expect("contiguous"),
                        b.grad_beta.as_slice().expect("contiguous"),
                    ));
                }
                _ => {}
            }
        }
        out
    }

    /// All parameter values (trainable and running statistics), in file
    /// order.
    fn blocks(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => {
                    out.push(d.weights.as_slice().expect("standard layout"));
                    out.push(d.bias.as_slice().expect("contiguous"));
                }
                Layer::BatchNorm(b) => {
                    for a in [&b.gamma, &b.beta, &b.running_mean, &b.running_var] {
                        out.push(a.as_slice().expect("contiguous"));
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Binary checkpoint: magic `AGNN`, format version, layer count, one
    /// descriptor per layer, then every parameter block as row-major
    /// little-endian `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            let (kind, a, b, extra): (u8, usize, usize, [f32; 2]) = match layer {
                Layer::Dense(d) => (0, d.inputs(), d.outputs(), [0.0; 2]),
                Layer::BatchNorm(bn) => (
                    1,
                    bn.features(),
                    bn.features(),
                    [bn.epsilon as f32, bn.momentum as f32],
                ),
                Layer::LeakyRelu { slope, .. } => (2, 0, 0, [*slope as f32, 0.0]),
                Layer::Sigmoid { .. } => (3, 0, 0, [0.0; 2]),
            };
            out.push(kind);
            out.extend_from_slice(&(a as u32).to_le_bytes());
            out.extend_from_slice(&(b as u32).to_le_bytes());
            for e in extra {
                out.extend_from_slice(&e.to_le_bytes());
            }
        }
        for block in self.blocks() {
            for &v in block {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let bad = |m: &str| NnError::Checkpoint(m.to_string());
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok_or_else(|| bad("truncated header"))? != CHECKPOINT_MAGIC {
            return Err(bad("not a network checkpoint"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated header"))?;
        if version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let kind = r.take(1).ok_or_else(|| bad("truncated descriptor"))?[0];
            let a = r.u32().ok_or_else(|| bad("truncated descriptor"))? as usize;
            let b = r.u32().ok_or_else(|| bad("truncated descriptor"))? as usize;
            let e0 = r.f32().ok_or_else(|| bad("truncated descriptor"))? as f64;
            let e1 = r.f32().ok_or_else(|| bad("truncated descriptor"))? as f64;
            layers.push(match kind {
                0 => Layer::Dense(Dense::from_parts(Array2::zeros((b, a)), Array1::zeros(b))),
                1 => {
                    let mut bn = BatchNorm::new(a);
                    bn.epsilon = e0;
                    bn.momentum = e1;
                    Layer::BatchNorm(bn)
                }
                2 => Layer::LeakyRelu {
                    slope: e0,
                    input: None,
                },
                3 => Layer::sigmoid(),
                k => return Err(NnError::Checkpoint(format!("unknown layer kind {k}"))),
            });
        }
        let mut net = Network::new(layers)?;
        for layer in &mut net.layers {
            let blocks: Vec<&mut [f64]> = match layer {
                Layer::Dense(d) => vec![
                    d.weights.as_slice_mut().expect("standard layout"),
                    d.bias.as_slice_mut().expect("contiguous"),
                ],
                Layer::BatchNorm(bn) => vec![
                    bn.gamma.as_slice_mut().expect("contiguous"),
                    bn.beta.as_slice_mut().expect("contiguous"),
                    bn.running_mean.as_slice_mut().expect("contiguous"),
                    bn.running_var.as_slice_mut().expect("contiguous"),
                ],
                _ => vec![],
            };
            for block in blocks {
                for v in block {
                    *v = r.f32().ok_or_else(|| bad("truncated parameters"))? as f64;
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NnError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NnError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"AGNN";
const CHECKPOINT_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32(&mut self) -> Option<f32> {
        self.take(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Mean binary cross-entropy of sigmoid outputs and its gradient w.r.t. the
/// pre-sigmoid logits, `(p - t) / B`.
pub fn bce_loss(predictions: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>), NnError> {
    if predictions.len() != targets.len() {
        return Err(NnError::LossShape(predictions.len(), targets.len()));
    }
    let n = predictions.len() as f64;
    let mut loss = 0.0;
    let grad = predictions
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            let p = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
            loss -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
            (p - t) / n
        })
        .collect();
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) {
    if state.m.len() != params.len() {
        *state = AdamState::new(params.len());
    }
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Adam over every trainable tensor of a network.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            states: Vec::new(),
        }
    }

    /// Applies the gradients stored by the last `backward`.
    pub fn step(&mut self, net: &mut Network) {
        let pairs = net.params_and_grads();
        if self.states.len() != pairs.len() {
            self.states = pairs.iter().map(|(p, _)| AdamState::new(p.len())).collect();
        }
        for ((p, g), s) in pairs.into_iter().zip(&mut self.states) {
            adam_step(p, g, s, &self.config);
        }
    }
}
