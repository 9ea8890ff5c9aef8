//! Candidate set construction and the per-beam logit penalty.

use serde::{Deserialize, Serialize};

use super::{BeamHypothesis, DecodeError};
use crate::model::{logsumexp, ModelError, StepOutput, TokenId};

/// Penalized log-probabilities for one beam: `ln softmax(logits) - alpha * phi`.
///
/// The penalty is a per-beam scalar, so the ranking of a beam's own tokens is
/// unchanged. What moves is the beam's cumulative score, which is how a
/// pattern-heavy beam loses out against its siblings.
pub fn apply_penalty(logits: &[f64], phi: f64, alpha: f64) -> Result<Vec<f64>, ModelError> {
    let lse = logsumexp(logits)?;
    let shift = alpha * phi;
    Ok(logits
        .iter()
        .map(|&x| {
            let lp = x - lse;
            if shift == 0.0 {
                lp
            } else {
                lp - shift
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub beam: usize,
    pub token: TokenId,
    pub logit: f64,
    /// Penalized log-probability of this token under its beam.
    pub log_prob: f64,
    /// Excluded at this position by an earlier rollback.
    pub banned: bool,
}

/// The union of every beam's top-`n_can` tokens.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CandidateSet {
    pub entries: Vec<Candidate>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn for_beam(&self, beam: usize) -> impl Iterator<Item = &Candidate> {
        self.entries.iter().filter(move |c| c.beam == beam)
    }
}

/// Token ids of the `n` largest logits, ties toward the lower id.
pub fn top_tokens(logits: &[f64], n: usize) -> Vec<TokenId> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(n);
    order.into_iter().map(|i| i as TokenId).collect()
}

/// Builds the candidate set for one step. `phis[b]` is beam `b`'s pattern
/// strength (zero while its window is not full); `banned` holds the tokens
/// excluded at the position being decoded.
pub fn build_candidate_set(
    beams: &[BeamHypothesis],
    outputs: &[StepOutput],
    phis: &[f64],
    n_can: usize,
    alpha: f64,
    banned: &dyn Fn(TokenId) -> bool,
) -> Result<CandidateSet, DecodeError> {
    debug_assert_eq!(beams.len(), outputs.len());
    debug_assert_eq!(beams.len(), phis.len());
    let mut entries = Vec::with_capacity(n_can * beams.len());
    for (beam, (out, &phi)) in outputs.iter().zip(phis).enumerate() {
        if out.logits.len() < n_can {
            return Err(DecodeError::Config(format!(
                "vocabulary of {} is smaller than n_can = {n_can}",
                out.logits.len()
            )));
        }
        let log_probs = apply_penalty(&out.logits, phi, alpha)?;
        for token in top_tokens(&out.logits, n_can) {
            entries.push(Candidate {
                beam,
                token,
                logit: out.logits[token as usize],
                log_prob: log_probs[token as usize],
                banned: banned(token),
            });
        }
    }
    Ok(CandidateSet { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::softmax;

    #[test]
    fn zero_alpha_or_phi_is_plain_log_softmax() {
        let logits = [0.3, -1.2, 2.5, 0.0];
        let plain: Vec<f64> = softmax(&logits).unwrap().iter().map(|p| p.ln()).collect();
        for lp in [
            apply_penalty(&logits, 7.0, 0.0),
            apply_penalty(&logits, 0.0, 1.0),
        ] {
            for (a, b) in lp.unwrap().iter().zip(&plain) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn penalty_separates_equal_beams_by_alpha_phi() {
        let logits = [1.0, 2.0, 0.5];
        let a = apply_penalty(&logits, 0.0, 1.0).unwrap();
        let b = apply_penalty(&logits, 4.0, 1.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x - y, 4.0);
        }
    }

    #[test]
    fn ranking_within_beam_unchanged() {
        let logits = [0.2, 3.0, -1.0, 3.0, 1.5];
        let lp = apply_penalty(&logits, 2.5, 1.0).unwrap();
        let by_logit = top_tokens(&logits, 5);
        let by_lp = top_tokens(&lp, 5);
        assert_eq!(by_logit, by_lp);
        assert_eq!(by_logit, vec![1, 3, 4, 0, 2]);
    }
}
