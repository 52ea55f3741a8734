//! Attention-pooled multiple-instance network with one two-class head per task.
//!
//! ```text
//! h_k   = relu(W_e x_k + b_e)
//! s_k   = w · tanh(V h_k)                         (plain)
//! s_k   = w · (tanh(V h_k) ⊙ sigmoid(U h_k))      (gated)
//! a     = softmax(s)
//! z     = Σ_k a_k h_k
//! p_t   = softmax(W_t z + b_t)
//! ```
//!
//! Parameters live in one flat `f64` vector in the checkpoint order
//! `W_e, b_e, V, w, [U], W_0, b_0, …, W_{T-1}, b_{T-1}` (matrices row-major).

mod adam;
mod backward;
mod checkpoint;
mod forward;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use backward::{backward, batch_loss, grad_check, BagExample};
pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{forward, multitask_loss, weights_from_prevalence, ClassWeights, ForwardOutput, PROB_CLAMP};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Tile feature width.
    pub dim: usize,
    /// Encoder width.
    pub hidden: usize,
    /// Attention width.
    pub attn: usize,
    pub tasks: usize,
}

/// Offsets of each parameter block in the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Layout {
    pub enc_w: usize,
    pub enc_b: usize,
    pub att_v: usize,
    pub att_w: usize,
    pub gate_u: Option<usize>,
    pub heads_w: usize,
    pub heads_b: usize,
    pub len: usize,
}

impl Layout {
    fn new(d: ModelDims, gated: bool) -> Self {
        let enc_w = 0;
        let enc_b = enc_w + d.hidden * d.dim;
        let att_v = enc_b + d.hidden;
        let att_w = att_v + d.attn * d.hidden;
        let mut next = att_w + d.attn;
        let gate_u = gated.then(|| {
            let at = next;
            next += d.attn * d.hidden;
            at
        });
        // per task: W_t (2×h) then b_t (2), interleaved
        let heads_w = next;
        let heads_b = heads_w + 2 * d.hidden;
        let len = next + d.tasks * (2 * d.hidden + 2);
        Layout { enc_w, enc_b, att_v, att_w, gate_u, heads_w, heads_b, len }
    }
}

/// Network weights (and, with the same shape, their gradients).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    dims: ModelDims,
    gated: bool,
    layout: Layout,
    data: Vec<f64>,
}

macro_rules! block {
    ($get:ident, $get_mut:ident, $start:expr, $len:expr) => {
        pub fn $get(&self) -> &[f64] {
            let (s, n) = ($start(&self.layout), $len(&self.dims));
            &self.data[s..s + n]
        }
        pub fn $get_mut(&mut self) -> &mut [f64] {
            let (s, n) = ($start(&self.layout), $len(&self.dims));
            &mut self.data[s..s + n]
        }
    };
}

impl ModelParams {
    pub fn zeros(dims: ModelDims, gated: bool) -> Result<Self> {
        if dims.dim == 0 || dims.hidden == 0 || dims.attn == 0 || dims.tasks == 0 {
            return Err(Error::Shape(format!("all model dims must be >= 1, got {dims:?}")));
        }
        let layout = Layout::new(dims, gated);
        Ok(ModelParams { dims, gated, layout, data: vec![0.0; layout.len] })
    }

    /// Wraps a flat parameter vector in checkpoint order.
    pub fn from_flat(dims: ModelDims, gated: bool, data: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(dims, gated)?;
        if data.len() != p.data.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                p.data.len(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        p.data = data;
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams { data: vec![0.0; self.data.len()], ..self.clone() }
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn gated(&self) -> bool {
        self.gated
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    block!(enc_w, enc_w_mut, |l: &Layout| l.enc_w, |d: &ModelDims| d.hidden * d.dim);
    block!(enc_b, enc_b_mut, |l: &Layout| l.enc_b, |d: &ModelDims| d.hidden);
    block!(att_v, att_v_mut, |l: &Layout| l.att_v, |d: &ModelDims| d.attn * d.hidden);
    block!(att_w, att_w_mut, |l: &Layout| l.att_w, |d: &ModelDims| d.attn);

    pub fn gate_u(&self) -> Option<&[f64]> {
        let n = self.dims.attn * self.dims.hidden;
        self.layout.gate_u.map(|s| &self.data[s..s + n])
    }

    pub fn gate_u_mut(&mut self) -> Option<&mut [f64]> {
        let n = self.dims.attn * self.dims.hidden;
        self.layout.gate_u.map(move |s| &mut self.data[s..s + n])
    }

    fn head_offset(&self, t: usize) -> usize {
        self.layout.heads_w + t * (2 * self.dims.hidden + 2)
    }

    /// `W_t`, 2×hidden row-major.
    pub fn head_w(&self, t: usize) -> &[f64] {
        let s = self.head_offset(t);
        &self.data[s..s + 2 * self.dims.hidden]
    }

    pub fn head_w_mut(&mut self, t: usize) -> &mut [f64] {
        let s = self.head_offset(t);
        let n = 2 * self.dims.hidden;
        &mut self.data[s..s + n]
    }

    pub fn head_b(&self, t: usize) -> &[f64] {
        let s = self.head_offset(t) + 2 * self.dims.hidden;
        &self.data[s..s + 2]
    }

    pub fn head_b_mut(&mut self, t: usize) -> &mut [f64] {
        let s = self.head_offset(t) + 2 * self.dims.hidden;
        &mut self.data[s..s + 2]
    }

    /// Offsets of every bias entry; used to keep biases at zero on init.
    fn bias_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let h = self.dims.hidden;
        let mut r = vec![self.layout.enc_b..self.layout.enc_b + h];
        for t in 0..self.dims.tasks {
            let s = self.head_offset(t) + 2 * h;
            r.push(s..s + 2);
        }
        debug_assert!(self.layout.heads_b == self.layout.heads_w + 2 * h);
        r
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rounds every parameter through `f32`, the checkpoint precision.
    pub fn quantized(&self) -> Self {
        ModelParams {
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
            ..self.clone()
        }
    }

    pub(crate) fn add_assign(&mut self, other: &ModelParams) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }
}

fn glorot(slice: &mut [f64], fan_in: usize, fan_out: usize, rng: &mut rng::StreamRng) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in slice.iter_mut() {
        *v = rng.random_range(-limit..limit);
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(dims: ModelDims, gated: bool, seed: u64) -> Result<ModelParams> {
    let mut p = ModelParams::zeros(dims, gated)?;
    let ModelDims { dim, hidden, attn, tasks } = dims;
    glorot(p.enc_w_mut(), dim, hidden, &mut rng::stream(seed, "init/enc_w", 0));
    glorot(p.att_v_mut(), hidden, attn, &mut rng::stream(seed, "init/att_v", 0));
    glorot(p.att_w_mut(), attn, 1, &mut rng::stream(seed, "init/att_w", 0));
    if let Some(u) = p.gate_u_mut() {
        glorot(u, hidden, attn, &mut rng::stream(seed, "init/gate_u", 0));
    }
    for t in 0..tasks {
        glorot(p.head_w_mut(t), hidden, 2, &mut rng::stream(seed, "init/head_w", t as u64));
    }
    for r in p.bias_ranges() {
        p.data[r].iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(p)
}

/// Optimization and sampling settings for training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub train_bag_size: usize,
    pub infer_bag_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub gated_attention: bool,
    pub hidden: usize,
    pub attn: usize,
    pub seed: u64,
}

/// Learning rate used on real slide features; the synthetic default is larger.
pub const REAL_FEATURES_LEARNING_RATE: f64 = 1e-5;

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            batch_size: 16,
            train_bag_size: 100,
            infer_bag_size: 1000,
            max_epochs: 30,
            patience: 5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            gated_attention: false,
            hidden: 128,
            attn: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Hyperparameters as used for the slide-level models on real features.
    pub fn real_features() -> Self {
        TrainConfig { learning_rate: REAL_FEATURES_LEARNING_RATE, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        if self.batch_size == 0 || self.train_bag_size == 0 || self.infer_bag_size == 0 {
            return bad("batch_size, train_bag_size and infer_bag_size must be >= 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1");
        }
        if self.hidden == 0 || self.attn == 0 {
            return bad("hidden and attn must be >= 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0,1) and eps > 0");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn dims(&self, dim: usize, tasks: usize) -> ModelDims {
        ModelDims { dim, hidden: self.hidden, attn: self.attn, tasks }
    }
}
