//! Over-accumulation pattern detector.
//!
//! At the penalized layer, the last `k` answer tokens form a `k x k` window
//! of attention. Heads are collapsed by an element-wise max, each window row
//! is renormalized over the window columns, the upper triangle is masked and
//! the rest scaled by `sigma`. The product down each column scores how much
//! later tokens keep leaning on that token; the largest product `phi` and
//! its absolute position `c` describe the pattern.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{StepOutput, TokenSequence};

/// Windows wider than this are scored in log space.
pub const LOG_SPACE_MIN_WINDOW: usize = 13;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PenaltyError {
    #[error("penalized layer {layer} is outside a {n_layers}-layer model")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("attention for layer {layer}, query {query} is not available")]
    MissingAttention { layer: usize, query: usize },
    #[error("step output covers {got} positions but the sequence has {expected}")]
    LengthMismatch { got: usize, expected: usize },
}

/// Head-maxed, row-renormalized attention among the most recent answer
/// tokens. `values[i][j]` is the weight of token `start + i` on token
/// `start + j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWindow {
    pub layer: usize,
    pub start: usize,
    pub values: Vec<Vec<f64>>,
}

impl AttentionWindow {
    pub fn new(layer: usize, start: usize, values: Vec<Vec<f64>>) -> Self {
        Self {
            layer,
            start,
            values,
        }
    }

    pub fn size(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Pattern strength `phi` and the absolute position `c` of the column that
/// produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternDescriptor {
    pub phi: f64,
    pub c: usize,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    Direct,
    LogSpace,
}

/// Element-wise max over heads followed by renormalization to unit sum.
/// An all-zero row stays zero.
pub fn head_max_renormalize(heads: &[&[f64]]) -> Vec<f64> {
    let width = heads.iter().map(|h| h.len()).max().unwrap_or(0);
    let mut row = vec![0.0f64; width];
    for head in heads {
        for (slot, &w) in row.iter_mut().zip(head.iter()) {
            *slot = slot.max(w);
        }
    }
    let total: f64 = row.iter().sum();
    if total > 0.0 {
        row.iter_mut().for_each(|v| *v /= total);
    }
    row
}

/// Cuts the window of the last `min(k, generated)` answer tokens out of the
/// layer-`layer` attention. Rows are stored with their masked upper
/// triangle as explicit zeros.
pub fn extract_window(
    out: &StepOutput,
    seq: &TokenSequence,
    k: usize,
    layer: usize,
) -> Result<AttentionWindow, PenaltyError> {
    let attention = &out.attention;
    if layer >= attention.n_layers() {
        return Err(PenaltyError::LayerOutOfRange {
            layer,
            n_layers: attention.n_layers(),
        });
    }
    if attention.seq_len() != seq.len() {
        return Err(PenaltyError::LengthMismatch {
            got: attention.seq_len(),
            expected: seq.len(),
        });
    }
    let size = k.min(seq.generated().len());
    let start = seq.len() - size;
    let mut values = Vec::with_capacity(size);
    for i in 0..size {
        let query = start + i;
        let heads = (0..attention.n_heads())
            .map(|h| {
                attention
                    .row(layer, h, query)
                    .map(|row| &row[start..=query])
                    .ok_or(PenaltyError::MissingAttention { layer, query })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut row = head_max_renormalize(&heads);
        row.resize(size, 0.0);
        values.push(row);
    }
    Ok(AttentionWindow::new(layer, start, values))
}

/// Zeroes the strict upper triangle and multiplies the rest by `sigma`.
pub fn scale_and_mask(w: &AttentionWindow, sigma: f64) -> AttentionWindow {
    let values = w
        .values
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(j, &v)| if j <= i { sigma * v } else { 0.0 })
                .collect()
        })
        .collect();
    AttentionWindow::new(w.layer, w.start, values)
}

/// `scores[j]` is the product of `w[i][j]` for `i = j..k`, diagonal
/// included. Wide windows go through log space.
pub fn column_scores(w: &AttentionWindow) -> Vec<f64> {
    let mode = if w.size() >= LOG_SPACE_MIN_WINDOW {
        ScoreMode::LogSpace
    } else {
        ScoreMode::Direct
    };
    column_scores_with(w, mode)
}

pub fn column_scores_with(w: &AttentionWindow, mode: ScoreMode) -> Vec<f64> {
    let k = w.size();
    (0..k)
        .map(|j| {
            let column = (j..k).map(|i| w.values[i][j]);
            match mode {
                ScoreMode::Direct => column.product(),
                ScoreMode::LogSpace => {
                    // ln(0) = -inf, so a zero factor still yields exp(-inf) = 0
                    column.map(f64::ln).sum::<f64>().exp()
                }
            }
        })
        .collect()
}

/// Maximum column score and its absolute position; ties go to the more
/// recent column. `None` for an empty score vector.
pub fn pattern_descriptor(scores: &[f64], window_start: usize) -> Option<PatternDescriptor> {
    let (index, phi) =
        scores
            .iter()
            .copied()
            .enumerate()
            .fold(None, |best: Option<(usize, f64)>, (j, s)| match best {
                Some((_, b)) if s < b => best,
                _ => Some((j, s)),
            })?;
    Some(PatternDescriptor {
        phi,
        c: window_start + index,
        scores: scores.to_vec(),
    })
}

/// Detector settings shared by the decoder and the `inspect` tooling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detector {
    pub layer: usize,
    pub k: usize,
    pub sigma: f64,
}

/// Everything the detector saw for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inspection {
    pub window: AttentionWindow,
    pub scaled: AttentionWindow,
    pub descriptor: PatternDescriptor,
}

impl Detector {
    /// Full pipeline. `None` until the sequence holds at least `k` answer
    /// tokens.
    pub fn inspect(
        &self,
        out: &StepOutput,
        seq: &TokenSequence,
    ) -> Result<Option<Inspection>, PenaltyError> {
        if self.k == 0 || seq.generated().len() < self.k {
            // still validate the layer so misconfiguration surfaces early
            if self.layer >= out.attention.n_layers() {
                return Err(PenaltyError::LayerOutOfRange {
                    layer: self.layer,
                    n_layers: out.attention.n_layers(),
                });
            }
            return Ok(None);
        }
        let window = extract_window(out, seq, self.k, self.layer)?;
        let scaled = scale_and_mask(&window, self.sigma);
        let scores = column_scores(&scaled);
        let descriptor = pattern_descriptor(&scores, window.start).expect("k >= 1");
        Ok(Some(Inspection {
            window,
            scaled,
            descriptor,
        }))
    }

    pub fn describe(
        &self,
        out: &StepOutput,
        seq: &TokenSequence,
    ) -> Result<Option<PatternDescriptor>, PenaltyError> {
        Ok(self.inspect(out, seq)?.map(|i| i.descriptor))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttentionMap, QueryAttention};
    use std::sync::Arc;

    fn window(values: Vec<Vec<f64>>) -> AttentionWindow {
        AttentionWindow::new(12, 0, values)
    }

    /// Step output whose single layer carries `heads[h][query]` rows.
    fn step_output(heads: &[Vec<Vec<f64>>], seq_len: usize) -> StepOutput {
        let rows = (0..seq_len)
            .map(|q| {
                Arc::new(QueryAttention {
                    query: q,
                    weights: vec![heads.iter().map(|h| h[q].clone()).collect()],
                })
            })
            .collect();
        StepOutput {
            logits: vec![0.0; 4],
            attention: AttentionMap::new(1, heads.len(), seq_len, vec![0], rows).unwrap(),
        }
    }

    #[test]
    fn head_max_then_renormalize() {
        let row = head_max_renormalize(&[&[0.6, 0.4], &[0.1, 0.9]]);
        assert!((row[0] - 0.4).abs() < 1e-15);
        assert!((row[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn extract_window_two_heads() {
        // prompt of one token, two answer tokens
        let seq = TokenSequence::from_parts(vec![0, 1, 2], 0, 1).unwrap();
        let head_a = vec![vec![1.0], vec![0.5, 0.5], vec![0.2, 0.48, 0.32]];
        let head_b = vec![vec![1.0], vec![0.5, 0.5], vec![0.5, 0.08, 0.42]];
        let out = step_output(&[head_a, head_b], 3);
        let w = extract_window(&out, &seq, 2, 0).unwrap();
        assert_eq!(w.start, 1);
        assert_eq!(w.values[0], vec![1.0, 0.0]);
        // maxes over window columns: [0.48, 0.42] -> renormalized
        assert!((w.values[1][0] - 0.48 / 0.9).abs() < 1e-15);
        assert!((w.values[1][1] - 0.42 / 0.9).abs() < 1e-15);
    }

    #[test]
    fn extract_window_single_head_and_truncation() {
        let seq = TokenSequence::from_parts(vec![0, 1, 2], 0, 1).unwrap();
        let head = vec![vec![1.0], vec![0.25, 0.75], vec![0.2, 0.3, 0.5]];
        let out = step_output(&[head], 3);
        let w = extract_window(&out, &seq, 8, 0).unwrap();
        assert_eq!(w.size(), 2);
        assert_eq!(w.values[1], vec![0.3 / 0.8, 0.5 / 0.8]);
    }

    #[test]
    fn extract_window_empty_when_nothing_generated() {
        let seq = TokenSequence::from_prompt(&[0, 1]).unwrap();
        let head = vec![vec![1.0], vec![0.5, 0.5]];
        let out = step_output(&[head], 2);
        assert!(extract_window(&out, &seq, 4, 0).unwrap().is_empty());
        let d = Detector {
            layer: 0,
            k: 4,
            sigma: 50.0,
        };
        assert_eq!(d.describe(&out, &seq).unwrap(), None);
    }

    #[test]
    fn extract_window_rejects_layer() {
        let seq = TokenSequence::from_parts(vec![0, 1], 0, 1).unwrap();
        let out = step_output(&[vec![vec![1.0], vec![0.5, 0.5]]], 2);
        assert_eq!(
            extract_window(&out, &seq, 1, 1),
            Err(PenaltyError::LayerOutOfRange {
                layer: 1,
                n_layers: 1
            })
        );
        let d = Detector {
            layer: 3,
            k: 16,
            sigma: 50.0,
        };
        assert!(d.describe(&out, &seq).is_err());
    }

    #[test]
    fn scale_diagonal_identity() {
        let id = window(
            (0..3)
                .map(|i| (0..3).map(|j| f64::from(u8::from(i == j))).collect())
                .collect(),
        );
        let s = scale_and_mask(&id, 50.0);
        for i in 0..3 {
            assert_eq!(s.values[i][i], 50.0);
        }
    }

    #[test]
    fn scale_uniform_causal_rows() {
        let k = 4;
        let rows = (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| if j <= i { 1.0 / (i + 1) as f64 } else { 0.7 })
                    .collect()
            })
            .collect();
        let s = scale_and_mask(&window(rows), 50.0);
        for i in 0..k {
            for j in 0..k {
                let expected = if j <= i { 50.0 / (i + 1) as f64 } else { 0.0 };
                assert!((s.values[i][j] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masking_is_idempotent_at_unit_scale() {
        let w = window(vec![vec![0.3, 0.9], vec![0.2, 0.8]]);
        let once = scale_and_mask(&w, 1.0);
        assert_eq!(scale_and_mask(&once, 1.0), once);
        assert_eq!(once.values[0][1], 0.0);
    }

    #[test]
    fn column_scores_identity_and_zero() {
        let ones = window(vec![vec![1.0, 0.0], vec![1.0, 1.0]]);
        assert_eq!(column_scores(&ones), vec![1.0, 1.0]);
        let zero = window(vec![vec![2.0, 0.0], vec![0.0, 3.0]]);
        assert_eq!(column_scores(&zero), vec![0.0, 3.0]);
    }

    #[test]
    fn column_scores_three_by_three() {
        let w = window(vec![
            vec![2.0, 0.0, 0.0],
            vec![3.0, 0.5, 0.0],
            vec![4.0, 0.1, 0.2],
        ]);
        let scores = column_scores(&w);
        let expected = [24.0, 0.05, 0.2];
        for (s, e) in scores.iter().zip(expected) {
            assert!((s - e).abs() < 1e-12);
        }
    }

    #[test]
    fn log_space_handles_zero_factors() {
        let w = window(vec![vec![5.0, 0.0], vec![0.0, 2.0]]);
        assert_eq!(column_scores_with(&w, ScoreMode::LogSpace)[0], 0.0);
    }

    #[test]
    fn descriptor_tie_break_and_offset() {
        let d = pattern_descriptor(&[0.0, 0.0, 5.0], 40).unwrap();
        assert_eq!((d.phi, d.c), (5.0, 42));
        let d = pattern_descriptor(&[1.5, 1.5, 1.5], 7).unwrap();
        assert_eq!(d.c, 9);
        assert!(pattern_descriptor(&[], 0).is_none());
    }
}
