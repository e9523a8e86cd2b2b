//! MLP construction, seeded initialization, Adam, and learning-rate
//! schedules.
//!
//! All trainable arrays live in a [`ParamStore`]; a training step binds
//! the store onto a fresh tape, runs forward/backward, then feeds the
//! collected gradients to [`AdamState::step`]. The store's entry order is
//! the canonical parameter order used by checkpoints.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::math;
use crate::rng::CounterRng;
use crate::tensor::{Tape, TensorError, TensorId};

#[derive(Debug, Clone, PartialEq)]
pub enum NetsError {
    BadSpec(String),
    NonFiniteGrad { name: String },
    GradShape { name: String, expected: usize, got: usize },
    Tensor(TensorError),
}

impl fmt::Display for NetsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NetsError::BadSpec(msg) => write!(f, "invalid network spec: {msg}"),
            NetsError::NonFiniteGrad { name } => {
                write!(f, "non-finite gradient for parameter '{name}'")
            }
            NetsError::GradShape { name, expected, got } => {
                write!(f, "gradient for '{name}' has length {got}, parameter has {expected}")
            }
            NetsError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for NetsError {}

impl From<TensorError> for NetsError {
    fn from(e: TensorError) -> Self {
        NetsError::Tensor(e)
    }
}

// ── parameter store ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Flat, ordered collection of trainable arrays.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: String, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry { name, shape, data });
        id
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].data
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// All parameter values concatenated in entry order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_values());
        for e in &self.entries {
            out.extend_from_slice(&e.data);
        }
        out
    }

    /// Inverse of [`ParamStore::flatten`]; the layout must match.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<(), NetsError> {
        if flat.len() != self.total_values() {
            return Err(NetsError::BadSpec(format!(
                "flat parameter blob has {} values, store expects {}",
                flat.len(),
                self.total_values()
            )));
        }
        let mut offset = 0;
        for e in self.entries.iter_mut() {
            let len = e.data.len();
            e.data.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    /// Insert every entry onto the tape as a gradient-carrying leaf.
    pub fn bind(&self, tape: &mut Tape) -> TapeBinding {
        let ids = self
            .entries
            .iter()
            .map(|e| {
                tape.leaf(e.data.clone(), e.shape.clone(), true)
                    .expect("stored shapes are valid")
            })
            .collect();
        TapeBinding { ids }
    }

    /// Gradients for every entry after a backward pass, zeros where a
    /// parameter was unused.
    pub fn collect_grads(&self, tape: &Tape, binding: &TapeBinding) -> Vec<Vec<f64>> {
        self.entries
            .iter()
            .zip(&binding.ids)
            .map(|(e, id)| match tape.grad(*id) {
                Some(g) => g.to_vec(),
                None => vec![0.0; e.data.len()],
            })
            .collect()
    }
}

/// Tape leaves for one binding of a [`ParamStore`].
pub struct TapeBinding {
    ids: Vec<TensorId>,
}

impl TapeBinding {
    pub fn id(&self, p: ParamId) -> TensorId {
        self.ids[p.0]
    }
}

// ── MLP ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Activation {
    LeakyRelu { slope: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum OutputActivation {
    Identity,
    Softplus,
    Sigmoid,
}

/// Architecture of a multi-layer perceptron: `num_layers` affine maps
/// with the activation between them. The experiments keep `hidden_dim`
/// in [10, 200] and `num_layers` in {3..6}.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MlpSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub activation: Activation,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, output_dim: usize, hidden_dim: usize, num_layers: usize) -> Self {
        MlpSpec {
            input_dim,
            output_dim,
            hidden_dim,
            num_layers,
            activation: Activation::LeakyRelu { slope: 0.01 },
            output_activation: OutputActivation::Identity,
        }
    }

    pub fn with_output(mut self, act: OutputActivation) -> Self {
        self.output_activation = act;
        self
    }

    pub fn validate(&self) -> Result<(), NetsError> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dim == 0 {
            return Err(NetsError::BadSpec(String::from("all dimensions must be at least 1")));
        }
        if self.num_layers == 0 {
            return Err(NetsError::BadSpec(String::from("num_layers must be at least 1")));
        }
        Ok(())
    }

    /// Widths of the affine layers: input, hidden repeated, output.
    fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.num_layers + 1);
        dims.push(self.input_dim);
        for _ in 1..self.num_layers {
            dims.push(self.hidden_dim);
        }
        dims.push(self.output_dim);
        dims
    }
}

/// An MLP whose weights live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Mlp {
    pub spec: MlpSpec,
    weights: Vec<ParamId>,
    biases: Vec<ParamId>,
}

impl Mlp {
    /// Initialize a fresh MLP: weights uniform on [-a, a] with
    /// a = sqrt(6 / (fan_in + fan_out)), biases zero, deterministic for a
    /// fixed seed.
    pub fn init(store: &mut ParamStore, spec: MlpSpec, seed: u64, prefix: &str) -> Result<Mlp, NetsError> {
        spec.validate()?;
        let mut rng = CounterRng::new(seed);
        let dims = spec.layer_dims();
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..spec.num_layers {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let a = math::sqrt(6.0 / (fan_in + fan_out) as f64);
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.uniform_in(-a, a)).collect();
            weights.push(store.add(format!("{prefix}.w{l}"), vec![fan_in, fan_out], w));
            biases.push(store.add(format!("{prefix}.b{l}"), vec![fan_out], vec![0.0; fan_out]));
        }
        Ok(Mlp { spec, weights, biases })
    }

    /// Differentiable forward pass on the tape. `x` is `[batch, input_dim]`.
    pub fn forward(&self, tape: &mut Tape, binding: &TapeBinding, x: TensorId) -> Result<TensorId, NetsError> {
        let got = tape.shape(x).to_vec();
        if got.len() != 2 || got[1] != self.spec.input_dim {
            return Err(NetsError::Tensor(TensorError::ShapeMismatch {
                op: "mlp_forward",
                lhs: got,
                rhs: vec![0, self.spec.input_dim],
            }));
        }
        let mut h = x;
        for l in 0..self.spec.num_layers {
            let hw = tape.matmul(h, binding.id(self.weights[l]))?;
            h = tape.add(hw, binding.id(self.biases[l]))?;
            if l + 1 < self.spec.num_layers {
                let Activation::LeakyRelu { slope } = self.spec.activation;
                h = tape.leaky_relu(h, slope)?;
            }
        }
        match self.spec.output_activation {
            OutputActivation::Identity => Ok(h),
            OutputActivation::Softplus => Ok(tape.softplus(h)?),
            OutputActivation::Sigmoid => Ok(tape.sigmoid(h)?),
        }
    }

    /// Tape-free forward pass over plain buffers, for inference on large
    /// datasets. `x` is `rows x input_dim` row-major.
    pub fn forward_values(&self, store: &ParamStore, x: &[f64], rows: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), rows * self.spec.input_dim);
        let mut h = x.to_vec();
        let mut width = self.spec.input_dim;
        for l in 0..self.spec.num_layers {
            let w = store.entry(self.weights[l]);
            let b = store.data(self.biases[l]);
            let out_w = w.shape[1];
            let mut out = crate::linalg::matmul(&h, &w.data, rows, width, out_w);
            for r in 0..rows {
                for c in 0..out_w {
                    out[r * out_w + c] += b[c];
                }
            }
            if l + 1 < self.spec.num_layers {
                let Activation::LeakyRelu { slope } = self.spec.activation;
                for v in out.iter_mut() {
                    if *v < 0.0 {
                        *v *= slope;
                    }
                }
            }
            h = out;
            width = out_w;
        }
        match self.spec.output_activation {
            OutputActivation::Identity => {}
            OutputActivation::Softplus => {
                for v in h.iter_mut() {
                    *v = math::softplus(*v);
                }
            }
            OutputActivation::Sigmoid => {
                for v in h.iter_mut() {
                    *v = math::sigmoid(*v);
                }
            }
        }
        h
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.weights.iter().chain(self.biases.iter()).copied()
    }
}

// ── Adam ────────────────────────────────────────────────────────────

/// Adam with bias correction; moment accumulators are shaped like their
/// parameters and created lazily on the first step.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// One Adam update over every entry of the store. `grads` must be
    /// aligned with the store's entries.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) -> Result<(), NetsError> {
        if self.m.is_empty() {
            self.m = store.entries().iter().map(|e| vec![0.0; e.data.len()]).collect();
            self.v = self.m.clone();
        }
        for (idx, e) in store.entries.iter().enumerate() {
            let g = &grads[idx];
            if g.len() != e.data.len() {
                return Err(NetsError::GradShape {
                    name: e.name.clone(),
                    expected: e.data.len(),
                    got: g.len(),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(NetsError::NonFiniteGrad { name: e.name.clone() });
            }
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - math::powf(self.beta1, t);
        let bc2 = 1.0 - math::powf(self.beta2, t);
        for (idx, e) in store.entries.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for ((p, g), (mi, vi)) in e
                .data
                .iter_mut()
                .zip(&grads[idx])
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= self.lr * m_hat / (math::sqrt(v_hat) + self.eps);
            }
        }
        Ok(())
    }
}

// ── learning-rate schedule ──────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum LrSchedule {
    Constant,
    /// lr(epoch) = max(floor, base * factor^epoch), factor in (0, 1].
    Decay { factor: f64, floor: f64 },
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize, base_lr: f64) -> f64 {
        match *self {
            LrSchedule::Constant => base_lr,
            LrSchedule::Decay { factor, floor } => {
                (base_lr * math::powf(factor, epoch as f64)).max(floor)
            }
        }
    }

    pub fn validate(&self) -> Result<(), NetsError> {
        if let LrSchedule::Decay { factor, floor } = *self {
            if !(factor > 0.0 && factor <= 1.0) {
                return Err(NetsError::BadSpec(format!("decay factor {factor} outside (0, 1]")));
            }
            if floor < 0.0 {
                return Err(NetsError::BadSpec(format!("lr floor {floor} is negative")));
            }
        }
        Ok(())
    }
}
