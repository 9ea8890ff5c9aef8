//! Deterministic toy causal transformer.
//!
//! Pre-norm decoder stack with parameter-free RMSNorm, multi-head causal
//! self-attention, a GELU MLP and a linear vocabulary head. Weights are drawn
//! from a seeded ChaCha stream; there is no training.
//!
//! Forward passes are incremental. Each token position becomes a cache node
//! holding its per-layer keys, values and attention rows, linked to the node
//! of its prefix. Beams that share a prefix share nodes, so a decode step
//! only computes the one new position per beam.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    AttentionMap, ModelError, ModelShape, QueryAttention, StepModel, StepOutput, TokenId,
    TokenSequence,
};

const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub model_dim: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub seed: u64,
    /// Multiplier on the query/key projections. Values above 1 sharpen the
    /// attention distributions.
    pub qk_gain: f64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 16,
            n_heads: 4,
            model_dim: 32,
            vocab_size: 256,
            max_context: 512,
            seed: 0,
            qk_gain: 1.0,
        }
    }
}

impl ToyModelConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("model_dim", self.model_dim),
            ("vocab_size", self.vocab_size),
            ("max_context", self.max_context),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!(
                "{name} must be at least 1"
            )));
        }
        if !self.model_dim.is_multiple_of(self.n_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "model_dim {} is not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if !(self.qk_gain.is_finite() && self.qk_gain > 0.0) {
            return Err(ModelError::InvalidConfig("qk_gain must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.model_dim
    }
}

/// Projection matrices of one block, stored `[out][in]`.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub wq: Vec<Vec<f64>>,
    pub wk: Vec<Vec<f64>>,
    pub wv: Vec<Vec<f64>>,
    pub wo: Vec<Vec<f64>>,
    pub w_up: Vec<Vec<f64>>,
    pub w_down: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ToyParams {
    /// `[vocab][model_dim]`
    pub token_embedding: Vec<Vec<f64>>,
    pub layers: Vec<LayerParams>,
    /// `[vocab][model_dim]`
    pub unembedding: Vec<Vec<f64>>,
}

impl ToyParams {
    fn generate(cfg: &ToyModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.model_dim;
        let hidden = cfg.mlp_dim();
        let mut matrix = |rows: usize, cols: usize, std: f64| -> Vec<Vec<f64>> {
            let normal = Normal::new(0.0, std).expect("finite std");
            (0..rows)
                .map(|_| (0..cols).map(|_| normal.sample(&mut rng)).collect())
                .collect()
        };
        let token_embedding = matrix(cfg.vocab_size, d, 1.0);
        let proj = 1.0 / (d as f64).sqrt();
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                wq: matrix(d, d, proj * cfg.qk_gain),
                wk: matrix(d, d, proj * cfg.qk_gain),
                wv: matrix(d, d, proj),
                wo: matrix(d, d, proj),
                w_up: matrix(hidden, d, proj),
                w_down: matrix(d, hidden, 1.0 / (hidden as f64).sqrt()),
            })
            .collect();
        let unembedding = matrix(cfg.vocab_size, d, proj);
        Self {
            token_embedding,
            layers,
            unembedding,
        }
    }
}

/// Sinusoidal position encoding.
pub fn position_encoding(position: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let pair = (i / 2) as f64;
            let angle = position as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

pub fn rms_norm(x: &[f64]) -> Vec<f64> {
    let mean_sq = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let scale = 1.0 / (mean_sq + RMS_EPS).sqrt();
    x.iter().map(|v| v * scale).collect()
}

pub fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

fn matvec(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    w.iter().map(|row| dot(row, x)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Node {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    attention: Arc<QueryAttention>,
    logits: Vec<f64>,
    parent: Option<Arc<Node>>,
}

impl Node {
    /// Nodes from the root up to and including `self`.
    fn chain(self: &Arc<Self>) -> Vec<Arc<Node>> {
        let mut chain = Vec::new();
        let mut cursor = Some(self.clone());
        while let Some(node) = cursor {
            cursor = node.parent.clone();
            chain.push(node);
        }
        chain.reverse();
        chain
    }
}

/// Seeded toy transformer implementing [`StepModel`].
pub struct ToyTransformer {
    cfg: ToyModelConfig,
    params: ToyParams,
    cache: Mutex<HashMap<Vec<TokenId>, Arc<Node>>>,
}

impl fmt::Debug for ToyTransformer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ToyTransformer")
            .field("cfg", &self.cfg)
            .field("cached_positions", &self.cached_positions())
            .finish()
    }
}

impl ToyTransformer {
    pub fn new(cfg: ToyModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let params = ToyParams::generate(&cfg);
        Ok(Self {
            cfg,
            params,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ToyParams {
        &self.params
    }

    pub fn cached_positions(&self) -> usize {
        self.cache.lock().map(|c| c.len()).unwrap_or(0)
    }

    pub fn clear_cache(&self) {
        if let Ok(mut cache) = self.cache.lock() {
            cache.clear();
        }
    }

    fn check(&self, seq: &TokenSequence) -> Result<(), ModelError> {
        if seq.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if seq.len() > self.cfg.max_context {
            return Err(ModelError::ContextOverflow {
                len: seq.len(),
                max: self.cfg.max_context,
            });
        }
        if let Some(&token) = seq
            .tokens()
            .iter()
            .find(|&&t| t as usize >= self.cfg.vocab_size)
        {
            return Err(ModelError::TokenOutOfRange {
                token,
                vocab: self.cfg.vocab_size,
            });
        }
        Ok(())
    }

    fn lookup(&self, tokens: &[TokenId]) -> Option<Arc<Node>> {
        self.cache.lock().ok()?.get(tokens).cloned()
    }

    fn node_for(&self, tokens: &[TokenId]) -> Arc<Node> {
        if let Some(node) = self.lookup(tokens) {
            return node;
        }
        let mut cached = tokens.len();
        let mut parent = None;
        while cached > 0 {
            cached -= 1;
            if cached == 0 {
                break;
            }
            if let Some(node) = self.lookup(&tokens[..cached]) {
                parent = Some(node);
                break;
            }
        }
        let mut chain = parent.as_ref().map(Node::chain).unwrap_or_default();
        for position in chain.len()..tokens.len() {
            let node = Arc::new(self.compute_node(tokens[position], position, &chain));
            if let Ok(mut cache) = self.cache.lock() {
                cache.insert(tokens[..=position].to_vec(), node.clone());
            }
            chain.push(node);
        }
        chain.pop().expect("non-empty sequence")
    }

    fn compute_node(&self, token: TokenId, position: usize, prefix: &[Arc<Node>]) -> Node {
        let cfg = &self.cfg;
        let head_dim = cfg.head_dim();
        let scale = 1.0 / (head_dim as f64).sqrt();

        let mut x: Vec<f64> = self.params.token_embedding[token as usize]
            .iter()
            .zip(position_encoding(position, cfg.model_dim))
            .map(|(e, p)| e + p)
            .collect();

        let mut keys = Vec::with_capacity(cfg.n_layers);
        let mut values = Vec::with_capacity(cfg.n_layers);
        let mut attention = Vec::with_capacity(cfg.n_layers);

        for (layer, lp) in self.params.layers.iter().enumerate() {
            let h = rms_norm(&x);
            let q = matvec(&lp.wq, &h);
            let k = matvec(&lp.wk, &h);
            let v = matvec(&lp.wv, &h);

            let mut context = vec![0.0; cfg.model_dim];
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let span = head * head_dim..(head + 1) * head_dim;
                let key_at = |j: usize| -> &[f64] {
                    if j == position {
                        &k[span.clone()]
                    } else {
                        &prefix[j].keys[layer][span.clone()]
                    }
                };
                let scores: Vec<f64> = (0..=position)
                    .map(|j| dot(&q[span.clone()], key_at(j)) * scale)
                    .collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                let row: Vec<f64> = exps.iter().map(|e| e / total).collect();

                for (j, weight) in row.iter().enumerate() {
                    let value = if j == position {
                        &v[span.clone()]
                    } else {
                        &prefix[j].values[layer][span.clone()]
                    };
                    for (c, val) in context[span.clone()].iter_mut().zip(value) {
                        *c += weight * val;
                    }
                }
                heads.push(row);
            }
            attention.push(heads);

            for (xi, o) in x.iter_mut().zip(matvec(&lp.wo, &context)) {
                *xi += o;
            }
            let h = rms_norm(&x);
            let up: Vec<f64> = matvec(&lp.w_up, &h).into_iter().map(gelu).collect();
            for (xi, o) in x.iter_mut().zip(matvec(&lp.w_down, &up)) {
                *xi += o;
            }

            keys.push(k);
            values.push(v);
        }

        let logits = matvec(&self.params.unembedding, &rms_norm(&x));
        Node {
            keys,
            values,
            attention: Arc::new(QueryAttention {
                query: position,
                weights: attention,
            }),
            logits,
            parent: prefix.last().cloned(),
        }
    }
}

impl StepModel for ToyTransformer {
    fn shape(&self) -> ModelShape {
        ModelShape {
            n_layers: self.cfg.n_layers,
            n_heads: self.cfg.n_heads,
            vocab_size: self.cfg.vocab_size,
        }
    }

    fn forward_step(&self, seq: &TokenSequence) -> Result<StepOutput, ModelError> {
        self.check(seq)?;
        let node = self.node_for(seq.tokens());
        let rows = node.chain().iter().map(|n| n.attention.clone()).collect();
        let attention = AttentionMap::new(
            self.cfg.n_layers,
            self.cfg.n_heads,
            seq.len(),
            (0..self.cfg.n_layers).collect(),
            rows,
        )?;
        Ok(StepOutput {
            logits: node.logits.clone(),
            attention,
        })
    }
}
