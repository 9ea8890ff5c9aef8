//! Binary trace recording and replay.
//!
//! A trace stores the per-step logits and the attention rows needed for
//! window extraction, so a decode can be re-run without the model. Layout
//! (all integers little-endian, reals as IEEE-754 `f64`):
//!
//! ```text
//! "DPRT"  u16 version  u16 flags
//! u32 vocab_size  u32 n_layers  u32 n_heads  u32 n_image  u32 n_prompt
//! u32 attn_layer  u32 window_rows (0 = all)  u32 logits_top_k (0 = full)
//! (n_image + n_prompt) x u32 prompt tokens
//! repeated until EOF:
//!   u32 payload_len, then payload:
//!     u32 seq_len  u32 n_generated  n_generated x u32
//!     logits: vocab_size x f64  |  top_k x (u32 id, f64 logit)
//!     u32 first_query
//!     for query in first_query..seq_len, layer, head: (query + 1) x f64
//! ```
//!
//! Flag bit 0 selects full-tensor mode (every layer stored); bit 1 marks a
//! position-indexed stream whose records are looked up by answer length
//! rather than by the exact token prefix.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};

use thiserror::Error;

use super::{
    AttentionMap, ModelError, ModelShape, QueryAttention, StepModel, StepOutput, TokenId,
    TokenSequence,
};

pub const TRACE_MAGIC: &[u8; 4] = b"DPRT";
pub const TRACE_VERSION: u16 = 1;
/// Vocabularies up to this size always store full logits.
pub const FULL_LOGITS_MAX_VOCAB: usize = 4096;

const FLAG_FULL_TENSOR: u16 = 1;
const FLAG_POSITION_INDEXED: u16 = 1 << 1;
const HEADER_LEN: usize = 40;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("malformed trace at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("trace has {len} steps, step {step} requested")]
    StepOutOfRange { step: usize, len: usize },
    #[error("trace does not match this request: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("trace i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// How replay finds the record for a query sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceIndexing {
    /// Exact match on the generated tokens (recorded model runs).
    ByPrefix,
    /// Match on the number of generated tokens only (synthetic streams).
    ByPosition,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceHeader {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_image: usize,
    pub n_prompt: usize,
    /// Layer stored when `full_tensor` is false.
    pub attn_layer: usize,
    /// Trailing query rows kept per step; `0` keeps every row.
    pub window_rows: usize,
    pub logits_top_k: Option<usize>,
    pub full_tensor: bool,
    pub indexing: TraceIndexing,
}

impl TraceHeader {
    pub fn shape(&self) -> ModelShape {
        ModelShape {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            vocab_size: self.vocab_size,
        }
    }

    /// Layers present in each stored attention row.
    pub fn stored_layers(&self) -> Vec<usize> {
        if self.full_tensor {
            (0..self.n_layers).collect()
        } else {
            vec![self.attn_layer]
        }
    }

    fn validate(&self) -> Result<(), String> {
        if self.vocab_size == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err("vocab, layer and head counts must be nonzero".into());
        }
        if self.n_prompt == 0 {
            return Err("at least one prompt token is required".into());
        }
        if !self.full_tensor && self.attn_layer >= self.n_layers {
            return Err(format!(
                "attention layer {} outside a {}-layer model",
                self.attn_layer, self.n_layers
            ));
        }
        if self
            .logits_top_k
            .is_some_and(|k| k == 0 || k > self.vocab_size)
        {
            return Err("top-K logit count outside 1..=vocab_size".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StoredLogits {
    Full(Vec<f64>),
    TopK(Vec<(TokenId, f64)>),
}

impl StoredLogits {
    /// Dense logits; entries missing from a top-K record read as `-inf`.
    pub fn to_dense(&self, vocab_size: usize) -> Vec<f64> {
        match self {
            StoredLogits::Full(v) => v.clone(),
            StoredLogits::TopK(entries) => {
                let mut dense = vec![f64::NEG_INFINITY; vocab_size];
                for &(id, logit) in entries {
                    dense[id as usize] = logit;
                }
                dense
            }
        }
    }
}

/// One forward step as stored in a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub seq_len: usize,
    pub generated: Vec<TokenId>,
    pub logits: StoredLogits,
    /// Query rows `first_query..seq_len`, carrying only the stored layers.
    pub rows: Vec<Arc<QueryAttention>>,
}

impl StepRecord {
    pub fn first_query(&self) -> usize {
        self.seq_len - self.rows.len()
    }

    /// Snapshot of a live step under the header's storage policy.
    pub fn capture(
        header: &TraceHeader,
        seq: &TokenSequence,
        out: &StepOutput,
    ) -> Result<Self, TraceError> {
        if out.logits.len() != header.vocab_size {
            return Err(TraceError::Incompatible(format!(
                "{} logits for a vocabulary of {}",
                out.logits.len(),
                header.vocab_size
            )));
        }
        let logits = match header.logits_top_k {
            None => StoredLogits::Full(out.logits.clone()),
            Some(k) => StoredLogits::TopK(top_k_logits(&out.logits, k)),
        };
        let seq_len = seq.len();
        let mut first = out.attention.first_query();
        if header.window_rows > 0 {
            first = first.max(seq_len.saturating_sub(header.window_rows));
        }
        let layers = header.stored_layers();
        let mut rows = Vec::with_capacity(seq_len - first);
        for query in first..seq_len {
            let mut weights = Vec::with_capacity(layers.len());
            for &layer in &layers {
                let heads = (0..header.n_heads)
                    .map(|head| {
                        out.attention
                            .row(layer, head, query)
                            .map(<[f64]>::to_vec)
                            .ok_or_else(|| {
                                TraceError::Incompatible(format!(
                                    "step output lacks layer {layer} row {query}"
                                ))
                            })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                weights.push(heads);
            }
            rows.push(Arc::new(QueryAttention { query, weights }));
        }
        Ok(Self {
            seq_len,
            generated: seq.generated().to_vec(),
            logits,
            rows,
        })
    }
}

/// Indices of the `k` largest logits, ties toward the lower id.
fn top_k_logits(logits: &[f64], k: usize) -> Vec<(TokenId, f64)> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(k)
        .map(|i| (i as TokenId, logits[i]))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub header: TraceHeader,
    pub prompt: Vec<TokenId>,
    pub steps: Vec<StepRecord>,
}

impl TraceFile {
    pub fn new(header: TraceHeader, prompt: Vec<TokenId>) -> Result<Self, TraceError> {
        header.validate().map_err(|m| TraceError::Format {
            offset: 0,
            message: m,
        })?;
        if prompt.len() != header.n_image + header.n_prompt {
            return Err(TraceError::Incompatible(format!(
                "prompt has {} tokens, header declares {}",
                prompt.len(),
                header.n_image + header.n_prompt
            )));
        }
        Ok(Self {
            header,
            prompt,
            steps: Vec::new(),
        })
    }

    pub fn prompt_sequence(&self) -> Result<TokenSequence, ModelError> {
        TokenSequence::from_parts(
            self.prompt.clone(),
            self.header.n_image,
            self.header.n_prompt,
        )
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Reconstructs the step output stored at `step`.
    pub fn replay_step(&self, step: usize) -> Result<StepOutput, TraceError> {
        let record = self.steps.get(step).ok_or(TraceError::StepOutOfRange {
            step,
            len: self.steps.len(),
        })?;
        Ok(self.output_for(record)?)
    }

    fn output_for(&self, record: &StepRecord) -> Result<StepOutput, ModelError> {
        let attention = AttentionMap::new(
            self.header.n_layers,
            self.header.n_heads,
            record.seq_len,
            self.header.stored_layers(),
            record.rows.clone(),
        )?;
        Ok(StepOutput {
            logits: record.logits.to_dense(self.header.vocab_size),
            attention,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::new();
        out.extend_from_slice(TRACE_MAGIC);
        out.extend_from_slice(&TRACE_VERSION.to_le_bytes());
        let mut flags = 0u16;
        if h.full_tensor {
            flags |= FLAG_FULL_TENSOR;
        }
        if h.indexing == TraceIndexing::ByPosition {
            flags |= FLAG_POSITION_INDEXED;
        }
        out.extend_from_slice(&flags.to_le_bytes());
        for v in [
            h.vocab_size,
            h.n_layers,
            h.n_heads,
            h.n_image,
            h.n_prompt,
            h.attn_layer,
            h.window_rows,
            h.logits_top_k.unwrap_or(0),
        ] {
            put_u32(&mut out, v);
        }
        for &t in &self.prompt {
            out.extend_from_slice(&t.to_le_bytes());
        }
        for record in &self.steps {
            let payload = encode_record(record);
            put_u32(&mut out, payload.len());
            out.extend_from_slice(&payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TraceError> {
        let mut r = Reader::new(bytes, 0);
        if r.take(4)? != TRACE_MAGIC {
            return Err(TraceError::Format {
                offset: 0,
                message: "bad magic, expected DPRT".into(),
            });
        }
        let version = r.u16()?;
        if version != TRACE_VERSION {
            return Err(r.error_at(4, format!("unsupported version {version}")));
        }
        let flags = r.u16()?;
        if flags & !(FLAG_FULL_TENSOR | FLAG_POSITION_INDEXED) != 0 {
            return Err(r.error_at(6, format!("unknown flags {flags:#06x}")));
        }
        let vocab_size = r.usize()?;
        let n_layers = r.usize()?;
        let n_heads = r.usize()?;
        let n_image = r.usize()?;
        let n_prompt = r.usize()?;
        let attn_layer = r.usize()?;
        let window_rows = r.usize()?;
        let top_k = r.usize()?;
        let header = TraceHeader {
            vocab_size,
            n_layers,
            n_heads,
            n_image,
            n_prompt,
            attn_layer,
            window_rows,
            logits_top_k: (top_k > 0).then_some(top_k),
            full_tensor: flags & FLAG_FULL_TENSOR != 0,
            indexing: if flags & FLAG_POSITION_INDEXED != 0 {
                TraceIndexing::ByPosition
            } else {
                TraceIndexing::ByPrefix
            },
        };
        debug_assert_eq!(r.offset, HEADER_LEN);
        header.validate().map_err(|m| r.error_at(8, m))?;
        let prompt = (0..n_image + n_prompt)
            .map(|_| r.u32())
            .collect::<Result<Vec<_>, _>>()?;

        let mut steps = Vec::new();
        while !r.is_empty() {
            let len = r.usize()?;
            let start = r.offset;
            let payload = r.take(len).map_err(|_| {
                r.error_at(
                    start,
                    format!(
                        "truncated record {}: {len} bytes declared, {} available",
                        steps.len(),
                        bytes.len() - start
                    ),
                )
            })?;
            steps.push(decode_record(&header, payload, start)?);
        }
        Ok(Self {
            header,
            prompt,
            steps,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), TraceError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, TraceError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("trace field exceeds u32");
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn encode_record(record: &StepRecord) -> Vec<u8> {
    let mut out = Vec::new();
    put_u32(&mut out, record.seq_len);
    put_u32(&mut out, record.generated.len());
    for &t in &record.generated {
        out.extend_from_slice(&t.to_le_bytes());
    }
    match &record.logits {
        StoredLogits::Full(v) => v.iter().for_each(|&x| put_f64(&mut out, x)),
        StoredLogits::TopK(entries) => {
            for &(id, logit) in entries {
                out.extend_from_slice(&id.to_le_bytes());
                put_f64(&mut out, logit);
            }
        }
    }
    put_u32(&mut out, record.first_query());
    for row in &record.rows {
        for heads in &row.weights {
            for head in heads {
                head.iter().for_each(|&x| put_f64(&mut out, x));
            }
        }
    }
    out
}

fn decode_record(
    header: &TraceHeader,
    payload: &[u8],
    base: usize,
) -> Result<StepRecord, TraceError> {
    let mut r = Reader::new(payload, base);
    let seq_len = r.usize()?;
    let n_generated = r.usize()?;
    if seq_len != header.n_image + header.n_prompt + n_generated {
        return Err(r.error_at(
            base,
            format!("sequence length {seq_len} disagrees with {n_generated} generated tokens"),
        ));
    }
    let generated = (0..n_generated)
        .map(|_| r.u32())
        .collect::<Result<Vec<_>, _>>()?;
    let logits = match header.logits_top_k {
        None => StoredLogits::Full(
            (0..header.vocab_size)
                .map(|_| r.f64())
                .collect::<Result<_, _>>()?,
        ),
        Some(k) => {
            let mut entries = Vec::with_capacity(k);
            for _ in 0..k {
                let at = r.offset;
                let id = r.u32()?;
                if id as usize >= header.vocab_size {
                    return Err(r.error_at(at, format!("logit id {id} outside vocabulary")));
                }
                entries.push((id, r.f64()?));
            }
            StoredLogits::TopK(entries)
        }
    };
    let at = r.offset;
    let first_query = r.usize()?;
    if first_query > seq_len {
        return Err(r.error_at(
            at,
            format!("first query {first_query} beyond length {seq_len}"),
        ));
    }
    let n_layers = header.stored_layers().len();
    let mut rows = Vec::with_capacity(seq_len - first_query);
    for query in first_query..seq_len {
        let mut weights = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let heads = (0..header.n_heads)
                .map(|_| (0..=query).map(|_| r.f64()).collect::<Result<Vec<_>, _>>())
                .collect::<Result<Vec<_>, _>>()?;
            weights.push(heads);
        }
        rows.push(Arc::new(QueryAttention { query, weights }));
    }
    if !r.is_empty() {
        return Err(r.error_at(r.offset, "trailing bytes in record".into()));
    }
    Ok(StepRecord {
        seq_len,
        generated,
        logits,
        rows,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: usize,
    offset: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], base: usize) -> Self {
        Self {
            bytes,
            pos: 0,
            base,
            offset: base,
        }
    }

    fn is_empty(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    fn error_at(&self, offset: usize, message: String) -> TraceError {
        TraceError::Format { offset, message }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], TraceError> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error_at(
                self.base + self.pos,
                format!("unexpected end of data, needed {n} bytes"),
            ));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        self.offset = self.base + self.pos;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16, TraceError> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32, TraceError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn usize(&mut self) -> Result<usize, TraceError> {
        self.u32().map(|v| v as usize)
    }

    fn f64(&mut self) -> Result<f64, TraceError> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Plays a [`TraceFile`] back through the [`StepModel`] interface.
#[derive(Debug, Clone)]
pub struct TraceReplay {
    trace: Arc<TraceFile>,
    by_prefix: HashMap<Vec<TokenId>, usize>,
    by_position: HashMap<usize, usize>,
}

impl TraceReplay {
    pub fn new(trace: TraceFile) -> Self {
        let mut by_prefix = HashMap::new();
        let mut by_position = HashMap::new();
        for (i, record) in trace.steps.iter().enumerate() {
            by_prefix.entry(record.generated.clone()).or_insert(i);
            by_position.entry(record.generated.len()).or_insert(i);
        }
        Self {
            trace: Arc::new(trace),
            by_prefix,
            by_position,
        }
    }

    pub fn trace(&self) -> &TraceFile {
        &self.trace
    }

    pub fn prompt(&self) -> Result<TokenSequence, ModelError> {
        self.trace.prompt_sequence()
    }
}

impl StepModel for TraceReplay {
    fn shape(&self) -> ModelShape {
        self.trace.header.shape()
    }

    fn forward_step(&self, seq: &TokenSequence) -> Result<StepOutput, ModelError> {
        let h = &self.trace.header;
        if seq.n_image() != h.n_image
            || seq.n_prompt() != h.n_prompt
            || seq.tokens()[..seq.prefix_len()] != self.trace.prompt[..]
        {
            return Err(ModelError::InvalidSequence(
                "sequence prompt differs from the trace prompt".into(),
            ));
        }
        let index = match h.indexing {
            TraceIndexing::ByPrefix => self.by_prefix.get(seq.generated()),
            TraceIndexing::ByPosition => self.by_position.get(&seq.generated().len()),
        };
        let record = index
            .map(|&i| &self.trace.steps[i])
            .ok_or(ModelError::MissingStep { len: seq.len() })?;
        self.trace.output_for(record)
    }

    fn logit_coverage(&self) -> Option<usize> {
        self.trace.header.logits_top_k
    }
}

/// Storage policy for [`RecordingModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct TraceOptions {
    pub attn_layer: usize,
    pub window_rows: usize,
    pub full_tensor: bool,
    /// Used only when the vocabulary exceeds [`FULL_LOGITS_MAX_VOCAB`].
    pub top_k: usize,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self {
            attn_layer: 12,
            window_rows: 16,
            full_tensor: false,
            top_k: 64,
        }
    }
}

/// Wraps a live model and records every distinct forward step.
pub struct RecordingModel<M> {
    inner: M,
    header: TraceHeader,
    prompt: Vec<TokenId>,
    state: Mutex<(Vec<StepRecord>, HashSet<Vec<TokenId>>)>,
}

impl<M: StepModel> RecordingModel<M> {
    pub fn new(
        inner: M,
        prompt: &TokenSequence,
        options: TraceOptions,
    ) -> Result<Self, TraceError> {
        let shape = inner.shape();
        let header = TraceHeader {
            vocab_size: shape.vocab_size,
            n_layers: shape.n_layers,
            n_heads: shape.n_heads,
            n_image: prompt.n_image(),
            n_prompt: prompt.n_prompt(),
            attn_layer: options.attn_layer,
            window_rows: if options.full_tensor {
                0
            } else {
                options.window_rows
            },
            logits_top_k: (shape.vocab_size > FULL_LOGITS_MAX_VOCAB)
                .then_some(options.top_k.min(shape.vocab_size)),
            full_tensor: options.full_tensor,
            indexing: TraceIndexing::ByPrefix,
        };
        header.validate().map_err(TraceError::Incompatible)?;
        Ok(Self {
            inner,
            header,
            prompt: prompt.tokens()[..prompt.prefix_len()].to_vec(),
            state: Mutex::new((Vec::new(), HashSet::new())),
        })
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }

    pub fn into_trace(self) -> TraceFile {
        let (steps, _) = self.state.into_inner().unwrap_or_else(|e| e.into_inner());
        TraceFile {
            header: self.header,
            prompt: self.prompt,
            steps,
        }
    }
}

impl<M: StepModel> StepModel for RecordingModel<M> {
    fn shape(&self) -> ModelShape {
        self.inner.shape()
    }

    fn forward_step(&self, seq: &TokenSequence) -> Result<StepOutput, ModelError> {
        let out = self.inner.forward_step(seq)?;
        let mut state = self.state.lock().unwrap_or_else(|e| e.into_inner());
        if !state.1.contains(seq.generated()) {
            let record = StepRecord::capture(&self.header, seq, &out)
                .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
            state.1.insert(seq.generated().to_vec());
            state.0.push(record);
        }
        Ok(out)
    }

    fn logit_coverage(&self) -> Option<usize> {
        self.inner.logit_coverage()
    }
}
