//! Feed-forward networks with hand-written reverse mode, the Adam optimizer,
//! a central-difference gradient checker and a binary checkpoint format.
//!
//! Everything runs in `f64`. Batches are row-major: one sample per row.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch for {what}: expected {expected}, found {found}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Mish,
    Identity,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// `x * tanh(softplus(x))`
pub fn mish(x: f64) -> f64 {
    x * softplus(x).tanh()
}

pub fn mish_derivative(x: f64) -> f64 {
    let t = softplus(x).tanh();
    let sigmoid = 1.0 / (1.0 + (-x).exp());
    t + x * (1.0 - t * t) * sigmoid
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Mish => mish(x),
            Activation::Identity => x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Mish => mish_derivative(x),
            Activation::Identity => 1.0,
        }
    }
}

/// Affine layer followed by an elementwise activation. `weight` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    /// Uniform fan-in initialization in `±sqrt(1 / fan_in)`.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        let bound = (1.0 / input.max(1) as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((output, input), || rng.random_range(-bound..=bound));
        let bias = Array1::from_shape_simple_fn(output, || rng.random_range(-bound..=bound));
        Self {
            weight,
            bias,
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Per-layer activations recorded by [`MlpNet::forward_cached`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

/// Parameter gradients, shaped like the network they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &MlpNet) -> Self {
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

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn global_norm(&self) -> f64 {
        let sq: f64 = self.weights.iter().map(|w| w.iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
            + self.biases.iter().map(|b| b.iter().map(|v| v * v).sum::<f64>()).sum::<f64>();
        sq.sqrt()
    }

    /// Rescales in place so the global norm is at most `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
    }

    /// Flattened in the same order as [`MlpNet::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpNet {
    layers: Vec<Dense>,
}

impl MlpNet {
    /// Builds a network with the given layer widths. Hidden layers use Mish,
    /// the output layer is affine.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Mish
                };
                Dense::init(widths[i], widths[i + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(NnError::ShapeMismatch {
                    what: "layer chain",
                    expected: pair[0].output_dim(),
                    found: pair[1].input_dim(),
                });
            }
        }
        for layer in &layers {
            if layer.bias.len() != layer.output_dim() {
                return Err(NnError::ShapeMismatch {
                    what: "bias",
                    expected: layer.output_dim(),
                    found: layer.bias.len(),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Dense::output_dim).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(NnError::ShapeMismatch {
                what: "network input",
                expected: self.input_dim(),
                found: x.ncols(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut h = x.to_owned();
        for layer in &self.layers {
            let mut z = h.dot(&layer.weight.t());
            z += &layer.bias;
            if layer.activation != Activation::Identity {
                z.mapv_inplace(|v| layer.activation.apply(v));
            }
            h = z;
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for layer in &self.layers {
            let mut z = h.dot(&layer.weight.t());
            z += &layer.bias;
            let out = if layer.activation == Activation::Identity {
                z.clone()
            } else {
                z.mapv(|v| layer.activation.apply(v))
            };
            inputs.push(h);
            pre_activations.push(z);
            h = out;
        }
        Ok((
            h,
            ForwardCache {
                inputs,
                pre_activations,
            },
        ))
    }

    /// Reverse-mode pass. Returns parameter gradients and the gradient with
    /// respect to the network input, for an upstream gradient `output_grad`.
    pub fn backward(&self, cache: &ForwardCache, output_grad: ArrayView2<f64>) -> Result<(Gradients, Array2<f64>)> {
        let batch = cache.inputs.first().map(|x| x.nrows()).unwrap_or(0);
        if output_grad.ncols() != self.output_dim() || output_grad.nrows() != batch {
            return Err(NnError::ShapeMismatch {
                what: "output gradient",
                expected: batch * self.output_dim(),
                found: output_grad.len(),
            });
        }
        let n = self.layers.len();
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        let mut upstream = output_grad.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let mut dz = upstream;
            if layer.activation != Activation::Identity {
                Zip::from(&mut dz)
                    .and(&cache.pre_activations[i])
                    .for_each(|g, &z| *g *= layer.activation.derivative(z));
            }
            weights.push(dz.t().dot(&cache.inputs[i]));
            biases.push(dz.sum_axis(Axis(0)));
            upstream = dz.dot(&layer.weight);
        }
        weights.reverse();
        biases.reverse();
        Ok((Gradients { weights, biases }, upstream))
    }

    /// Gradient of `sum_rows(weights_row . f(x_row))` with respect to the input
    /// only, for callers that never need parameter gradients.
    pub fn input_gradient(&self, x: ArrayView2<f64>, output_grad: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let (out, cache) = self.forward_cached(x)?;
        let (_, dx) = self.backward(&cache, output_grad)?;
        Ok((out, dx))
    }

    /// Parameters flattened layer by layer, weight (row-major) then bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend(layer.weight.iter().copied());
            out.extend(layer.bias.iter().copied());
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(NnError::ShapeMismatch {
                what: "flat parameters",
                expected: self.param_count(),
                found: params.len(),
            });
        }
        let mut it = params.iter().copied();
        for layer in &mut self.layers {
            layer.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            layer.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        Ok(())
    }

    /// `self <- (1 - rate) * self + rate * online`, elementwise.
    pub fn polyak_update(&mut self, online: &MlpNet, rate: f64) {
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            Zip::from(&mut t.weight)
                .and(&o.weight)
                .for_each(|t, &o| *t = (1.0 - rate) * *t + rate * o);
            Zip::from(&mut t.bias)
                .and(&o.bias)
                .for_each(|t, &o| *t = (1.0 - rate) * *t + rate * o);
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(net: &MlpNet, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, net: &mut MlpNet, grads: &Gradients) -> Result<()> {
        if grads.weights.len() != net.layers.len() {
            return Err(NnError::ShapeMismatch {
                what: "gradient layers",
                expected: net.layers.len(),
                found: grads.weights.len(),
            });
        }
        if !grads.is_finite() {
            return Err(NnError::NonFiniteGradient);
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (lr, eps) = (self.lr, self.eps);
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for (i, layer) in net.layers.iter_mut().enumerate() {
            Zip::from(&mut layer.weight)
                .and(&mut self.m.weights[i])
                .and(&mut self.v.weights[i])
                .and(&grads.weights[i])
                .for_each(|p, m, v, &g| update(p, m, v, g));
            Zip::from(&mut layer.bias)
                .and(&mut self.m.biases[i])
                .and(&mut self.v.biases[i])
                .and(&grads.biases[i])
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Entries whose analytic and numeric magnitudes are both below this are
/// compared absolutely; relative error is meaningless at round-off scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares `analytic` against central differences of `loss` around `params`.
///
/// Relative error per entry is `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn grad_check<F>(params: &[f64], analytic: &[f64], mut loss: F, step: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "analytic gradient length");
    let mut probe = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        checked: params.len(),
    };
    for i in 0..params.len() {
        probe[i] = params[i] + step;
        let up = loss(&probe);
        probe[i] = params[i] - step;
        let down = loss(&probe);
        probe[i] = params[i];
        let numeric = (up - down) / (2.0 * step);
        let abs = (analytic[i] - numeric).abs();
        let rel = abs / analytic[i].abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        if rel > report.max_rel_error || rel.is_nan() {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.max_abs_error = report.max_abs_error.max(abs);
    }
    report
}

/// Gradient check of a scalar loss over a single network's parameters.
pub fn grad_check_net<F>(net: &MlpNet, mut loss: F, step: f64) -> GradCheckReport
where
    F: FnMut(&MlpNet) -> (f64, Gradients),
{
    let (_, grads) = loss(net);
    let params = net.flat_params();
    let mut probe = net.clone();
    grad_check(
        &params,
        &grads.flatten(),
        |p| {
            probe.set_flat_params(p).expect("same shape");
            loss(&probe).0
        },
        step,
    )
}

#[derive(Serialize, Deserialize)]
struct LayerHeader {
    input: usize,
    output: usize,
    activation: Activation,
}

#[derive(Serialize, Deserialize)]
struct NetHeader {
    name: String,
    layers: Vec<LayerHeader>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    kind: String,
    meta: serde_json::Value,
    nets: Vec<NetHeader>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// A set of named networks plus free-form JSON metadata.
///
/// On disk: one JSON header line, then every network's parameters as
/// little-endian `f64` in header order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub nets: Vec<(String, MlpNet)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            nets: Vec::new(),
        }
    }

    pub fn with_net(mut self, name: impl Into<String>, net: &MlpNet) -> Self {
        self.nets.push((name.into(), net.clone()));
        self
    }

    pub fn net(&self, name: &str) -> Result<&MlpNet> {
        self.nets
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, net)| net)
            .ok_or_else(|| NnError::Checkpoint(format!("missing network `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            nets: self
                .nets
                .iter()
                .map(|(name, net)| NetHeader {
                    name: name.clone(),
                    layers: net
                        .layers
                        .iter()
                        .map(|l| LayerHeader {
                            input: l.input_dim(),
                            output: l.output_dim(),
                            activation: l.activation,
                        })
                        .collect(),
                })
                .collect(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for (_, net) in &self.nets {
            for p in net.flat_params() {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| NnError::Checkpoint("missing header line".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[..newline]).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        let mut payload = bytes[newline + 1..].chunks_exact(8);
        if payload.remainder().len() != 0 {
            return Err(NnError::Checkpoint("payload is not a whole number of f64 values".into()));
        }
        let mut nets = Vec::with_capacity(header.nets.len());
        for net in header.nets {
            let mut layers = Vec::with_capacity(net.layers.len());
            for l in net.layers {
                let mut take = |n: usize| -> Result<Vec<f64>> {
                    (0..n)
                        .map(|_| {
                            payload
                                .next()
                                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                                .ok_or_else(|| NnError::Checkpoint("truncated payload".into()))
                        })
                        .collect()
                };
                let weight = Array2::from_shape_vec((l.output, l.input), take(l.output * l.input)?)
                    .map_err(|e| NnError::Checkpoint(e.to_string()))?;
                let bias = Array1::from_vec(take(l.output)?);
                layers.push(Dense {
                    weight,
                    bias,
                    activation: l.activation,
                });
            }
            nets.push((net.name, MlpNet::from_layers(layers)?));
        }
        if payload.next().is_some() {
            return Err(NnError::Checkpoint("trailing payload bytes".into()));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            nets,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
