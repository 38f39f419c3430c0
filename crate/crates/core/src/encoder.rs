//! Prompt bank, frozen encoder backends and prompt-enhanced essay encoding.
//!
//! An essay is presented to the backend as
//! `[CLS, shared prompt (n rows), topic prompt (m rows), tokens, SEP]` and its
//! representation is the backend output at position 0. Gradients reach the
//! prompt rows through [`EncoderBackend::cls_vjp`]; the backend's own
//! parameters are never written.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{normal_matrix, Linear};
use crate::rng::{self, streams};

/// Standard deviation of the prompt initialization.
pub const PROMPT_INIT_STD: f64 = 0.02;

/// Learnable soft prompts: one shared matrix and one matrix per topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBank {
    pub shared: Array2<f64>,
    pub specific: Vec<Array2<f64>>,
    /// Topic id owning each `specific` slot.
    pub topic_ids: Vec<u32>,
}

impl PromptBank {
    pub fn shared_len(&self) -> usize {
        self.shared.nrows()
    }

    pub fn specific_len(&self) -> usize {
        self.specific.first().map_or(0, |m| m.nrows())
    }

    pub fn width(&self) -> usize {
        self.shared.ncols()
    }

    pub fn slot(&self, topic_id: u32) -> Result<usize> {
        self.topic_ids
            .iter()
            .position(|&t| t == topic_id)
            .ok_or_else(|| Error::Registry(format!("no topic-specific prompt for topic {topic_id}")))
    }

    pub fn zeros_like(&self) -> Self {
        PromptBank {
            shared: Array2::zeros(self.shared.raw_dim()),
            specific: self.specific.iter().map(|m| Array2::zeros(m.raw_dim())).collect(),
            topic_ids: self.topic_ids.clone(),
        }
    }
}

/// Draws a prompt bank from `N(0, 0.02^2)`. `m = 0` gives an empty
/// topic-specific prompt per topic.
pub fn init_prompt_bank(
    n: usize,
    m: usize,
    topic_ids: &[u32],
    d: usize,
    seed: u64,
) -> Result<PromptBank> {
    if n == 0 {
        return Err(Error::Config("shared prompt length must be at least 1".into()));
    }
    if d == 0 {
        return Err(Error::Config("prompt width must be positive".into()));
    }
    if topic_ids.is_empty() {
        return Err(Error::Config("prompt bank needs at least one topic".into()));
    }
    let mut rng = rng::stream(seed, streams::PROMPT_INIT, 0);
    let shared = normal_matrix(n, d, PROMPT_INIT_STD, &mut rng);
    let specific = topic_ids
        .iter()
        .map(|_| normal_matrix(m, d, PROMPT_INIT_STD, &mut rng))
        .collect();
    Ok(PromptBank {
        shared,
        specific,
        topic_ids: topic_ids.to_vec(),
    })
}

/// A frozen text encoder.
pub trait EncoderBackend: Send + Sync {
    fn width(&self) -> usize;

    /// Longest input sequence the backend accepts, boundary tokens included.
    fn max_length(&self) -> usize;

    fn embed(&self, tokens: &[String]) -> Array2<f64>;

    fn cls_embedding(&self) -> Array1<f64>;

    fn sep_embedding(&self) -> Array1<f64>;

    /// Full output sequence for an input embedding sequence.
    fn forward(&self, inputs: ArrayView2<f64>) -> Array2<f64>;

    /// Output at position 0.
    fn forward_cls(&self, inputs: ArrayView2<f64>) -> Array1<f64> {
        self.forward(inputs).row(0).to_owned()
    }

    /// Gradient of `<grad_cls, forward_cls(inputs)>` with respect to `inputs`.
    fn cls_vjp(&self, inputs: ArrayView2<f64>, grad_cls: ArrayView1<f64>) -> Array2<f64>;

    /// Digest of every backend parameter.
    fn fingerprint(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ToyActivation {
    #[default]
    Identity,
    Tanh,
    Relu,
}

/// Settings that rebuild a backend bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendSpec {
    /// `"toy"` is the only backend bundled with this crate.
    pub kind: String,
    pub width: usize,
    pub seed: u64,
    pub vocab_size: usize,
    pub max_length: usize,
    pub activation: ToyActivation,
}

fn default_vocab() -> usize {
    4096
}

fn default_max_length() -> usize {
    512
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec::toy(32, 0)
    }
}

impl BackendSpec {
    pub fn toy(width: usize, seed: u64) -> Self {
        BackendSpec {
            kind: "toy".into(),
            width,
            seed,
            vocab_size: default_vocab(),
            max_length: default_max_length(),
            activation: ToyActivation::Identity,
        }
    }

    pub fn build(&self) -> Result<Arc<dyn EncoderBackend>> {
        match self.kind.as_str() {
            "toy" => Ok(Arc::new(ToyBackend::from_spec(self)?)),
            other => Err(Error::Config(format!(
                "backend {other:?} is not available in this build (supported: \"toy\")"
            ))),
        }
    }
}

/// Desk-scale stand-in for a pretrained encoder: a fixed random embedding
/// table, a position-wise affine map and mean pooling into position 0,
/// optionally followed by an elementwise activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBackend {
    table: Array2<f64>,
    cls: Array1<f64>,
    sep: Array1<f64>,
    weight: Array2<f64>,
    bias: Array1<f64>,
    activation: ToyActivation,
    max_length: usize,
}

/// FNV-1a over the lowercased token.
fn token_hash(token: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in token.to_lowercase().bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl ToyBackend {
    /// Toy backend of width `d` with identity output activation.
    pub fn new(d: usize, seed: u64) -> Result<Self> {
        Self::from_spec(&BackendSpec::toy(d, seed))
    }

    pub fn from_spec(spec: &BackendSpec) -> Result<Self> {
        let d = spec.width;
        if d < 2 {
            return Err(Error::Config(format!("toy backend width must be >= 2, got {d}")));
        }
        if spec.vocab_size == 0 || spec.max_length < 3 {
            return Err(Error::Config("toy backend needs vocab_size >= 1 and max_length >= 3".into()));
        }
        let mut rng = rng::stream(spec.seed, streams::BACKEND, 0);
        let table = normal_matrix(spec.vocab_size, d, 1.0, &mut rng);
        let cls = normal_matrix(1, d, 1.0, &mut rng).row(0).to_owned();
        let sep = normal_matrix(1, d, 1.0, &mut rng).row(0).to_owned();
        let weight = normal_matrix(d, d, 1.0 / (d as f64).sqrt(), &mut rng);
        let bias = normal_matrix(1, d, 0.1, &mut rng).row(0).to_owned();
        Ok(ToyBackend {
            table,
            cls,
            sep,
            weight,
            bias,
            activation: spec.activation,
            max_length: spec.max_length,
        })
    }

    /// Backend from explicit parameters; `table` rows are indexed by token
    /// hash modulo the row count.
    pub fn from_parts(
        table: Array2<f64>,
        cls: Array1<f64>,
        sep: Array1<f64>,
        weight: Array2<f64>,
        bias: Array1<f64>,
        activation: ToyActivation,
        max_length: usize,
    ) -> Result<Self> {
        let d = weight.nrows();
        if weight.ncols() != d || table.ncols() != d || cls.len() != d || sep.len() != d || bias.len() != d {
            return Err(Error::Contract("toy backend parameter shapes disagree".into()));
        }
        Ok(ToyBackend {
            table,
            cls,
            sep,
            weight,
            bias,
            activation,
            max_length,
        })
    }

    pub fn token_row(&self, token: &str) -> usize {
        (token_hash(token) % self.table.nrows() as u64) as usize
    }

    fn pre_activation(&self, inputs: ArrayView2<f64>) -> Array1<f64> {
        let pooled = inputs.mean_axis(Axis(0)).expect("non-empty input sequence");
        self.weight.dot(&pooled) + &self.bias
    }

    fn activate(&self, z: f64) -> f64 {
        match self.activation {
            ToyActivation::Identity => z,
            ToyActivation::Tanh => z.tanh(),
            ToyActivation::Relu => z.max(0.0),
        }
    }

    fn activation_slope(&self, z: f64) -> f64 {
        match self.activation {
            ToyActivation::Identity => 1.0,
            ToyActivation::Tanh => 1.0 - z.tanh().powi(2),
            ToyActivation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl EncoderBackend for ToyBackend {
    fn width(&self) -> usize {
        self.weight.nrows()
    }

    fn max_length(&self) -> usize {
        self.max_length
    }

    fn embed(&self, tokens: &[String]) -> Array2<f64> {
        let mut out = Array2::zeros((tokens.len(), self.width()));
        for (mut row, t) in out.rows_mut().into_iter().zip(tokens) {
            row.assign(&self.table.row(self.token_row(t)));
        }
        out
    }

    fn cls_embedding(&self) -> Array1<f64> {
        self.cls.clone()
    }

    fn sep_embedding(&self) -> Array1<f64> {
        self.sep.clone()
    }

    fn forward(&self, inputs: ArrayView2<f64>) -> Array2<f64> {
        let mut out = inputs.dot(&self.weight.t()) + &self.bias;
        let pooled = self.forward_cls(inputs);
        out.row_mut(0).assign(&pooled);
        out
    }

    fn forward_cls(&self, inputs: ArrayView2<f64>) -> Array1<f64> {
        self.pre_activation(inputs).mapv(|z| self.activate(z))
    }

    fn cls_vjp(&self, inputs: ArrayView2<f64>, grad_cls: ArrayView1<f64>) -> Array2<f64> {
        let z = self.pre_activation(inputs);
        let gz: Array1<f64> = grad_cls
            .iter()
            .zip(z.iter())
            .map(|(&g, &z)| g * self.activation_slope(z))
            .collect();
        let per_row = self.weight.t().dot(&gz) / inputs.nrows() as f64;
        let mut out = Array2::zeros(inputs.raw_dim());
        for mut row in out.rows_mut() {
            row.assign(&per_row);
        }
        out
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for arr in [self.table.view(), self.weight.view()] {
            for v in arr.iter() {
                h.update(v.to_le_bytes());
            }
        }
        for arr in [&self.cls, &self.sep, &self.bias] {
            for v in arr.iter() {
                h.update(v.to_le_bytes());
            }
        }
        h.update([self.activation as u8]);
        h.update((self.max_length as u64).to_le_bytes());
        hex::encode(h.finalize())
    }
}

/// The backend input for one essay plus bookkeeping for the backward pass.
#[derive(Debug, Clone)]
pub struct EncodedEssay {
    pub inputs: Array2<f64>,
    pub h_cls: Array1<f64>,
    pub slot: usize,
    pub shared_len: usize,
    pub specific_len: usize,
}

impl EncodedEssay {
    pub fn sequence_len(&self) -> usize {
        self.inputs.nrows()
    }
}

/// Number of essay tokens that fit next to the prompts and boundary tokens.
pub fn token_budget(bank: &PromptBank, backend: &dyn EncoderBackend) -> Result<usize> {
    let reserved = bank.shared_len() + bank.specific_len() + 2;
    backend.max_length().checked_sub(reserved).ok_or_else(|| {
        Error::Config(format!(
            "backend max_length {} cannot hold {reserved} prompt and boundary positions",
            backend.max_length()
        ))
    })
}

/// Encodes `tokens` under `topic_id`'s prompts. Tokens past the backend
/// budget are dropped from the tail; prompt rows are never truncated.
pub fn encode(
    tokens: &[String],
    topic_id: u32,
    bank: &PromptBank,
    backend: &dyn EncoderBackend,
) -> Result<EncodedEssay> {
    let slot = bank.slot(topic_id)?;
    encode_slot(tokens, slot, bank, backend)
}

pub fn encode_slot(
    tokens: &[String],
    slot: usize,
    bank: &PromptBank,
    backend: &dyn EncoderBackend,
) -> Result<EncodedEssay> {
    let d = backend.width();
    if bank.width() != d {
        return Err(Error::Contract(format!(
            "prompt width {} differs from backend width {d}",
            bank.width()
        )));
    }
    let specific = bank
        .specific
        .get(slot)
        .ok_or_else(|| Error::Registry(format!("no topic-specific prompt slot {slot}")))?;
    let budget = token_budget(bank, backend)?;
    let tokens = &tokens[..tokens.len().min(budget)];
    let (n, m) = (bank.shared_len(), bank.specific_len());
    let len = 1 + n + m + tokens.len() + 1;
    let mut inputs = Array2::zeros((len, d));
    inputs.row_mut(0).assign(&backend.cls_embedding());
    inputs.slice_mut(s![1..1 + n, ..]).assign(&bank.shared);
    inputs.slice_mut(s![1 + n..1 + n + m, ..]).assign(specific);
    inputs
        .slice_mut(s![1 + n + m..len - 1, ..])
        .assign(&backend.embed(tokens));
    inputs.row_mut(len - 1).assign(&backend.sep_embedding());
    let h_cls = backend.forward_cls(inputs.view());
    Ok(EncodedEssay {
        inputs,
        h_cls,
        slot,
        shared_len: n,
        specific_len: m,
    })
}

/// Routes `dL/dh_cls` back to the prompt rows of `grads`.
pub fn backward_prompts(
    encoded: &EncodedEssay,
    grad_cls: ArrayView1<f64>,
    backend: &dyn EncoderBackend,
    grads: &mut PromptBank,
) {
    let g = backend.cls_vjp(encoded.inputs.view(), grad_cls);
    let (n, m) = (encoded.shared_len, encoded.specific_len);
    grads.shared += &g.slice(s![1..1 + n, ..]);
    grads.specific[encoded.slot] += &g.slice(s![1 + n..1 + n + m, ..]);
}

/// `[projection(h_cls); features]`.
pub fn project_and_concat(
    h_cls: ArrayView1<f64>,
    features: ArrayView1<f64>,
    projection: &Linear,
) -> Result<Array1<f64>> {
    if h_cls.len() != projection.in_dim() {
        return Err(Error::Contract(format!(
            "projection expects width {}, got {}",
            projection.in_dim(),
            h_cls.len()
        )));
    }
    let p = projection.forward(h_cls);
    let mut h = Array1::zeros(p.len() + features.len());
    h.slice_mut(s![..p.len()]).assign(&p);
    h.slice_mut(s![p.len()..]).assign(&features);
    Ok(h)
}
