//! Autoregressive model contract.
//!
//! A [`StepModel`] maps a [`TokenSequence`] to a [`StepOutput`]: next-token
//! logits plus the causal self-attention of every layer and head. Two
//! drivers implement it: the seeded [`toy::ToyTransformer`] and the
//! [`trace::TraceReplay`] player for recorded or synthetic streams.

pub mod toy;
pub mod trace;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use toy::{ToyModelConfig, ToyTransformer};
pub use trace::{RecordingModel, TraceFile, TraceReplay};

/// Vocabulary id.
pub type TokenId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("sequence of length {len} exceeds the maximum context of {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("token {token} is outside the vocabulary of size {vocab}")]
    TokenOutOfRange { token: TokenId, vocab: usize },
    #[error("invalid sequence layout: {0}")]
    InvalidSequence(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("no recorded step for a sequence of length {len}")]
    MissingStep { len: usize },
    #[error("softmax of an empty vector")]
    EmptyLogits,
}

/// Token ids segmented into image tokens, prompt tokens and generated answer
/// tokens, in that order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<TokenId>,
    n_image: usize,
    n_prompt: usize,
}

impl TokenSequence {
    /// Builds a sequence with no generated tokens yet. At least one prompt
    /// token is required.
    pub fn new(image: &[TokenId], prompt: &[TokenId]) -> Result<Self, ModelError> {
        if prompt.is_empty() {
            return Err(ModelError::InvalidSequence(
                "at least one prompt token is required".into(),
            ));
        }
        let mut tokens = Vec::with_capacity(image.len() + prompt.len());
        tokens.extend_from_slice(image);
        tokens.extend_from_slice(prompt);
        Ok(Self {
            tokens,
            n_image: image.len(),
            n_prompt: prompt.len(),
        })
    }

    /// A text-only sequence (`N = 0`).
    pub fn from_prompt(prompt: &[TokenId]) -> Result<Self, ModelError> {
        Self::new(&[], prompt)
    }

    /// Rebuilds a sequence from a flat token list and its segment sizes.
    pub fn from_parts(
        tokens: Vec<TokenId>,
        n_image: usize,
        n_prompt: usize,
    ) -> Result<Self, ModelError> {
        if n_prompt == 0 {
            return Err(ModelError::InvalidSequence(
                "at least one prompt token is required".into(),
            ));
        }
        if tokens.len() < n_image + n_prompt {
            return Err(ModelError::InvalidSequence(format!(
                "{} tokens cannot hold {n_image} image and {n_prompt} prompt tokens",
                tokens.len()
            )));
        }
        Ok(Self {
            tokens,
            n_image,
            n_prompt,
        })
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn n_image(&self) -> usize {
        self.n_image
    }

    pub fn n_prompt(&self) -> usize {
        self.n_prompt
    }

    /// `N + M`: the position of the first answer token.
    pub fn prefix_len(&self) -> usize {
        self.n_image + self.n_prompt
    }

    pub fn generated(&self) -> &[TokenId] {
        &self.tokens[self.prefix_len()..]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn push(&mut self, token: TokenId) {
        self.tokens.push(token);
    }

    /// Keeps the first `n_generated` answer tokens.
    pub fn truncate_generated(&mut self, n_generated: usize) {
        self.tokens.truncate(self.prefix_len() + n_generated);
    }

    /// A copy extended by one answer token.
    pub fn with_token(&self, token: TokenId) -> Self {
        let mut next = self.clone();
        next.push(token);
        next
    }
}

/// Attention rows produced by one query position: `weights[layer_slot][head]`
/// holds the distribution over keys `0..=query`.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryAttention {
    pub query: usize,
    pub weights: Vec<Vec<Vec<f64>>>,
}

/// Lower-triangular attention tensor `[layer][head][query][key]` for one
/// forward step.
///
/// Rows are shared through `Arc` so incremental drivers can hand out the
/// full tensor without copying it. Drivers that only keep part of the tensor
/// (trace replay) store a subset of layers and a trailing range of queries;
/// lookups outside that subset return `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    n_layers: usize,
    n_heads: usize,
    seq_len: usize,
    layers: Vec<usize>,
    rows: Vec<Arc<QueryAttention>>,
}

impl AttentionMap {
    /// `layers` lists the model layers present in each row (sorted);
    /// `rows` must cover a contiguous query range ending at `seq_len - 1`.
    pub fn new(
        n_layers: usize,
        n_heads: usize,
        seq_len: usize,
        layers: Vec<usize>,
        rows: Vec<Arc<QueryAttention>>,
    ) -> Result<Self, ModelError> {
        if rows.len() > seq_len {
            return Err(ModelError::InvalidSequence(format!(
                "{} attention rows for a sequence of length {seq_len}",
                rows.len()
            )));
        }
        if layers.windows(2).any(|w| w[0] >= w[1]) || layers.iter().any(|&l| l >= n_layers) {
            return Err(ModelError::InvalidConfig(format!(
                "stored layers {layers:?} invalid for a {n_layers}-layer model"
            )));
        }
        let first = seq_len - rows.len();
        for (offset, row) in rows.iter().enumerate() {
            let query = first + offset;
            if row.query != query || row.weights.len() != layers.len() {
                return Err(ModelError::InvalidSequence(format!(
                    "attention row for query {} found where query {query} was expected",
                    row.query
                )));
            }
            for heads in &row.weights {
                if heads.len() != n_heads || heads.iter().any(|h| h.len() != query + 1) {
                    return Err(ModelError::InvalidSequence(format!(
                        "attention row for query {query} has the wrong shape"
                    )));
                }
            }
        }
        Ok(Self {
            n_layers,
            n_heads,
            seq_len,
            layers,
            rows,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Layers carried by this map.
    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    /// First query position with stored rows.
    pub fn first_query(&self) -> usize {
        self.seq_len - self.rows.len()
    }

    pub fn rows(&self) -> &[Arc<QueryAttention>] {
        &self.rows
    }

    /// Weights of `query` over keys `0..=query`.
    pub fn row(&self, layer: usize, head: usize, query: usize) -> Option<&[f64]> {
        let slot = self.layers.binary_search(&layer).ok()?;
        if head >= self.n_heads || query >= self.seq_len || query < self.first_query() {
            return None;
        }
        let row = &self.rows[query - self.first_query()];
        Some(&row.weights[slot][head])
    }

    /// Single entry with the causal mask applied (`0` for `key > query`).
    pub fn weight(&self, layer: usize, head: usize, query: usize, key: usize) -> Option<f64> {
        let row = self.row(layer, head, query)?;
        Some(row.get(key).copied().unwrap_or(0.0))
    }
}

/// Everything the decoder needs from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Pre-softmax scores over the vocabulary.
    pub logits: Vec<f64>,
    pub attention: AttentionMap,
}

/// Layer count, head count and vocabulary size of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
}

/// Anything that produces logits and attention for a token sequence.
pub trait StepModel {
    fn shape(&self) -> ModelShape;

    fn forward_step(&self, seq: &TokenSequence) -> Result<StepOutput, ModelError>;

    /// Number of real logits per step when only a top-K subset is available
    /// (the rest read as `-inf`). `None` means the full vocabulary.
    fn logit_coverage(&self) -> Option<usize> {
        None
    }
}

impl<M: StepModel + ?Sized> StepModel for &M {
    fn shape(&self) -> ModelShape {
        (**self).shape()
    }

    fn forward_step(&self, seq: &TokenSequence) -> Result<StepOutput, ModelError> {
        (**self).forward_step(seq)
    }

    fn logit_coverage(&self) -> Option<usize> {
        (**self).logit_coverage()
    }
}

/// Numerically stable softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>, ModelError> {
    let max = max_finite(v)?;
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// `ln softmax(v)`, computed as `v - logsumexp(v)`.
pub fn log_softmax(v: &[f64]) -> Result<Vec<f64>, ModelError> {
    let lse = logsumexp(v)?;
    Ok(v.iter().map(|&x| x - lse).collect())
}

pub fn logsumexp(v: &[f64]) -> Result<f64, ModelError> {
    let max = max_finite(v)?;
    let sum: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

fn max_finite(v: &[f64]) -> Result<f64, ModelError> {
    if v.is_empty() {
        return Err(ModelError::EmptyLogits);
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // all -inf (fully masked top-K storage) degenerates to uniform
    Ok(if max.is_finite() { max } else { 0.0 })
}
