//! Desk-scale transformer encoder-decoder with exact gradients.
//!
//! Layout: pre-norm residual blocks, GeLU feed-forward, learned positional
//! embeddings, and one token embedding table shared by the encoder input,
//! the decoder input and the output projection. All math is `f64`.

mod decode;
mod linalg;
mod transformer;

use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::seeding;

pub use decode::{beam_search_decode, greedy_decode, DecodeConfig, Hypothesis};
pub use transformer::{
    encode, evaluate, forward, loss_and_grad, loss_and_grad_with_dropout, BatchStats, Encoded,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },
    #[error("sequence of length {len} exceeds max_positions {max}")]
    LengthOverflow { len: usize, max: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("empty batch")]
    EmptyBatch,
    #[error("loss is not finite")]
    NaNLoss,
    #[error("parameter tensor {0:?} has the wrong shape")]
    ShapeMismatch(String),
}

impl ModelError {
    pub fn is_numerical(&self) -> bool {
        matches!(self, ModelError::NaNLoss)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    /// Off by default.
    pub label_smoothing: f64,
}

impl ModelConfig {
    /// 2+2 layers, dimension 64, 4 heads, feed-forward 256.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            model_dim: 64,
            heads: 4,
            ffn_dim: 256,
            max_positions: 64,
            dropout: 0.1,
            vocab_size,
            label_smoothing: 0.0,
        }
    }

    /// The full-size layout: 6+6 layers, dimension 1024 on 16 heads.
    pub fn large(vocab_size: usize) -> Self {
        ModelConfig {
            enc_layers: 6,
            dec_layers: 6,
            model_dim: 1024,
            heads: 16,
            ffn_dim: 4096,
            max_positions: 256,
            dropout: 0.1,
            vocab_size,
            label_smoothing: 0.0,
        }
    }

    /// One layer each side, dimension 8: the gradient-check size.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            enc_layers: 1,
            dec_layers: 1,
            model_dim: 8,
            heads: 2,
            ffn_dim: 16,
            max_positions: 16,
            dropout: 0.0,
            vocab_size,
            label_smoothing: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return bad("model_dim must be a positive multiple of heads");
        }
        if self.vocab_size == 0 || self.max_positions == 0 || self.ffn_dim == 0 {
            return bad("vocab_size, max_positions and ffn_dim must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must be in [0, 1)");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

/// A tensor's place in the flat parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn of<'a>(&self, data: &'a [f64]) -> &'a [f64] {
        &data[self.offset..self.offset + self.len()]
    }

    pub fn of_mut<'a>(&self, data: &'a mut [f64]) -> &'a mut [f64] {
        &mut data[self.offset..self.offset + self.len()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Uniform,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub g: Slot,
    pub b: Slot,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Attention {
    pub wq: Slot,
    pub bq: Slot,
    pub wk: Slot,
    pub bk: Slot,
    pub wv: Slot,
    pub bv: Slot,
    pub wo: Slot,
    pub bo: Slot,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FeedForward {
    pub w1: Slot,
    pub b1: Slot,
    pub w2: Slot,
    pub b2: Slot,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncoderLayer {
    pub ln1: Norm,
    pub attn: Attention,
    pub ln2: Norm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecoderLayer {
    pub ln1: Norm,
    pub self_attn: Attention,
    pub ln2: Norm,
    pub cross_attn: Attention,
    pub ln3: Norm,
    pub ffn: FeedForward,
}

/// Named tensor layout of the parameter buffer.
#[derive(Debug, Clone)]
pub struct Layout {
    pub(crate) embed: Slot,
    pub(crate) enc_pos: Slot,
    pub(crate) dec_pos: Slot,
    pub(crate) enc: Vec<EncoderLayer>,
    pub(crate) enc_ln: Norm,
    pub(crate) dec: Vec<DecoderLayer>,
    pub(crate) dec_ln: Norm,
    tensors: Vec<(String, Slot, Init)>,
    total: usize,
}

struct LayoutBuilder {
    tensors: Vec<(String, Slot, Init)>,
    total: usize,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> Slot {
        let slot = Slot {
            offset: self.total,
            rows,
            cols,
        };
        self.total += rows * cols;
        self.tensors.push((name, slot, init));
        slot
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            g: self.add(format!("{prefix}.g"), 1, d, Init::Ones),
            b: self.add(format!("{prefix}.b"), 1, d, Init::Zeros),
        }
    }

    fn attention(&mut self, prefix: &str, d: usize) -> Attention {
        let mut w = |n: &str| self.add(format!("{prefix}.{n}"), d, d, Init::Uniform);
        let (wq, wk, wv, wo) = (w("wq"), w("wk"), w("wv"), w("wo"));
        let mut b = |n: &str| self.add(format!("{prefix}.{n}"), 1, d, Init::Zeros);
        let (bq, bk, bv, bo) = (b("bq"), b("bk"), b("bv"), b("bo"));
        Attention {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> FeedForward {
        FeedForward {
            w1: self.add(format!("{prefix}.w1"), d, f, Init::Uniform),
            b1: self.add(format!("{prefix}.b1"), 1, f, Init::Zeros),
            w2: self.add(format!("{prefix}.w2"), f, d, Init::Uniform),
            b2: self.add(format!("{prefix}.b2"), 1, d, Init::Zeros),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Layout {
        let (d, f) = (cfg.model_dim, cfg.ffn_dim);
        let mut b = LayoutBuilder {
            tensors: Vec::new(),
            total: 0,
        };
        let embed = b.add("embed".into(), cfg.vocab_size, d, Init::Uniform);
        let enc_pos = b.add("enc.pos".into(), cfg.max_positions, d, Init::Uniform);
        let dec_pos = b.add("dec.pos".into(), cfg.max_positions, d, Init::Uniform);
        let enc = (0..cfg.enc_layers)
            .map(|l| {
                let p = format!("enc.{l}");
                EncoderLayer {
                    ln1: b.norm(&format!("{p}.ln1"), d),
                    attn: b.attention(&format!("{p}.attn"), d),
                    ln2: b.norm(&format!("{p}.ln2"), d),
                    ffn: b.ffn(&format!("{p}.ffn"), d, f),
                }
            })
            .collect();
        let enc_ln = b.norm("enc.ln", d);
        let dec = (0..cfg.dec_layers)
            .map(|l| {
                let p = format!("dec.{l}");
                DecoderLayer {
                    ln1: b.norm(&format!("{p}.ln1"), d),
                    self_attn: b.attention(&format!("{p}.self"), d),
                    ln2: b.norm(&format!("{p}.ln2"), d),
                    cross_attn: b.attention(&format!("{p}.cross"), d),
                    ln3: b.norm(&format!("{p}.ln3"), d),
                    ffn: b.ffn(&format!("{p}.ffn"), d, f),
                }
            })
            .collect();
        let dec_ln = b.norm("dec.ln", d);
        Layout {
            embed,
            enc_pos,
            dec_pos,
            enc,
            enc_ln,
            dec,
            dec_ln,
            tensors: b.tensors,
            total: b.total,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Tensors in storage order.
    pub fn tensors(&self) -> impl Iterator<Item = (&str, Slot)> {
        self.tensors.iter().map(|(n, s, _)| (n.as_str(), *s))
    }

    pub fn slot(&self, name: &str) -> Option<Slot> {
        self.tensors.iter().find(|(n, _, _)| n == name).map(|t| t.1)
    }

    pub fn embedding(&self) -> Slot {
        self.embed
    }
}

/// Model weights (or a same-shaped gradient) in one flat buffer.
#[derive(Debug, Clone)]
pub struct ModelParameters {
    pub config: ModelConfig,
    layout: Arc<Layout>,
    pub data: Vec<f64>,
}

impl PartialEq for ModelParameters {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.data == other.data
    }
}

impl ModelParameters {
    pub fn zeros(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Arc::new(Layout::new(config));
        Ok(ModelParameters {
            config: config.clone(),
            data: vec![0.0; layout.total()],
            layout,
        })
    }

    pub fn zeros_like(&self) -> Self {
        ModelParameters {
            config: self.config.clone(),
            layout: Arc::clone(&self.layout),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.slot(name).map(|s| s.of(&self.data))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let slot = self.layout.slot(name)?;
        Some(slot.of_mut(&mut self.data))
    }

    /// Row `id` of the shared token embedding table.
    pub fn embedding_row(&self, id: u32) -> &[f64] {
        let d = self.config.model_dim;
        let e = self.layout.embed.of(&self.data);
        &e[id as usize * d..(id as usize + 1) * d]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Replaces a tensor's contents, checking the element count.
    pub fn set_tensor(&mut self, name: &str, values: &[f64]) -> Result<(), ModelError> {
        let slot = self
            .layout
            .slot(name)
            .ok_or_else(|| ModelError::ShapeMismatch(name.to_string()))?;
        if slot.len() != values.len() {
            return Err(ModelError::ShapeMismatch(name.to_string()));
        }
        slot.of_mut(&mut self.data).copy_from_slice(values);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InitOptions {
    /// Zero the output projection. With tied embeddings this zeroes the
    /// token table, so every output distribution starts uniform.
    pub zero_output: bool,
}

/// Scaled-uniform init, `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`;
/// biases zero and norm gains one.
pub fn init_parameters(
    cfg: &ModelConfig,
    seed: u64,
    opts: InitOptions,
) -> Result<ModelParameters, ModelError> {
    let mut params = ModelParameters::zeros(cfg)?;
    let layout = Arc::clone(&params.layout);
    for (i, (name, slot, init)) in layout.tensors.iter().enumerate() {
        let values = slot.of_mut(&mut params.data);
        match init {
            Init::Zeros => values.fill(0.0),
            Init::Ones => values.fill(1.0),
            Init::Uniform if opts.zero_output && name == "embed" => values.fill(0.0),
            Init::Uniform => {
                let a = (6.0 / (slot.rows + slot.cols) as f64).sqrt();
                let mut rng = seeding::rng(seed, seeding::stream::INIT, i as u64);
                values.iter_mut().for_each(|v| *v = rng.gen_range(-a..a));
            }
        }
    }
    Ok(params)
}

/// Exact Gaussian error linear unit, `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// One training example.
///
/// `src` is the full source (`<src_lang> ... </s>`); `tgt` is the full
/// target (`<tgt_lang> ... </s>`). The decoder reads `tgt[..n-1]` and is
/// scored on predicting `tgt[1..]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

impl Example {
    pub fn new(src: Vec<u32>, tgt: Vec<u32>) -> Self {
        Example { src, tgt }
    }

    pub fn target_tokens(&self) -> usize {
        self.tgt.len().saturating_sub(1)
    }
}
