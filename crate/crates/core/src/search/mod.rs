//! Decoding strategies: greedy, length-normalized beam search, and beam
//! search with the over-accumulation penalty and rollback.

pub mod candidates;
pub mod rollback;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use candidates::{apply_penalty, build_candidate_set, top_tokens, Candidate, CandidateSet};
pub use rollback::{
    coordinate_set, maybe_rollback, overlap_count, AbandonReason, RollbackDecision, RollbackEvent,
    RollbackLedger,
};

use crate::model::{log_softmax, ModelError, StepModel, StepOutput, TokenId, TokenSequence};
use crate::penalty::{Detector, PatternDescriptor, PenaltyError};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid decode configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Penalty(#[from] PenaltyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Beam,
    Dopra,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Greedy => "greedy",
            Strategy::Beam => "beam",
            Strategy::Dopra => "dopra",
        })
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "greedy" => Ok(Strategy::Greedy),
            "beam" => Ok(Strategy::Beam),
            "dopra" => Ok(Strategy::Dopra),
            other => Err(format!("unknown strategy `{other}` (greedy, beam, dopra)")),
        }
    }
}

/// Decoding hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    /// Penalty strength.
    pub alpha: f64,
    /// Maximum rollbacks per position.
    pub beta: usize,
    /// Coordinate overlap that triggers a rollback.
    pub r: usize,
    /// Master switch for rollback.
    pub rollback: bool,
    /// Attention window size.
    pub k: usize,
    /// Coordinate history length.
    pub l: usize,
    /// Window scale factor.
    pub sigma: f64,
    /// Candidates kept per beam.
    pub n_can: usize,
    pub n_beam: usize,
    /// Zero-based index of the penalized layer.
    pub layer: usize,
    pub max_new_tokens: usize,
    pub eos: Option<TokenId>,
    /// Exponent of the answer length dividing finished scores.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Dopra,
            alpha: 1.0,
            beta: 5,
            r: 15,
            rollback: true,
            k: 16,
            l: 16,
            sigma: 50.0,
            n_can: 5,
            n_beam: 5,
            layer: 12,
            max_new_tokens: 64,
            eos: None,
            length_penalty: 1.0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        self.validate_ranges()?;
        if self.l <= self.r {
            return Err(DecodeError::Config(format!(
                "coordinate history l = {} must exceed the overlap threshold r = {}",
                self.l, self.r
            )));
        }
        Ok(())
    }

    /// Every check except `l > r`.
    pub fn validate_ranges(&self) -> Result<(), DecodeError> {
        let positive = [
            ("n_can", self.n_can),
            ("n_beam", self.n_beam),
            ("k", self.k),
            ("l", self.l),
            ("r", self.r),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(DecodeError::Config(format!("{name} must be at least 1")));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(DecodeError::Config(
                "sigma must be positive and finite".into(),
            ));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(DecodeError::Config(
                "alpha must be nonnegative and finite".into(),
            ));
        }
        if !self.length_penalty.is_finite() {
            return Err(DecodeError::Config("length_penalty must be finite".into()));
        }
        Ok(())
    }

    /// Upper bound on decode steps.
    pub fn step_budget(&self) -> usize {
        self.max_new_tokens * (self.beta + 1) + self.max_new_tokens
    }

    pub fn detector(&self) -> Detector {
        Detector {
            layer: self.layer,
            k: self.k,
            sigma: self.sigma,
        }
    }
}

/// One partial answer.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    pub seq: TokenSequence,
    /// Sum of `token_scores`.
    pub score: f64,
    /// Penalized log-probability of each answer token.
    pub token_scores: Vec<f64>,
    /// `descriptors[g]` came from the step that produced answer token `g`;
    /// `None` while the window was not yet full.
    pub descriptors: Vec<Option<PatternDescriptor>>,
}

impl BeamHypothesis {
    pub fn root(prompt: TokenSequence) -> Self {
        Self {
            seq: prompt,
            score: 0.0,
            token_scores: Vec::new(),
            descriptors: Vec::new(),
        }
    }

    pub fn generated_len(&self) -> usize {
        self.seq.generated().len()
    }

    pub fn extend(
        &self,
        token: TokenId,
        log_prob: f64,
        descriptor: Option<PatternDescriptor>,
    ) -> Self {
        let mut next = self.clone();
        next.seq.push(token);
        next.score += log_prob;
        next.token_scores.push(log_prob);
        next.descriptors.push(descriptor);
        next
    }

    /// Keeps the first `n` answer tokens.
    pub fn truncate(&mut self, n: usize) {
        let base = self.generated_len() - self.token_scores.len();
        let keep = n.saturating_sub(base);
        self.seq.truncate_generated(n);
        self.token_scores.truncate(keep);
        self.descriptors.truncate(keep);
        // same left fold as the incremental updates, so scores stay bit-exact
        self.score = self.token_scores.iter().fold(0.0, |acc, s| acc + s);
    }

    pub fn normalized_score(&self, length_penalty: f64) -> f64 {
        let n = self.token_scores.len();
        if n == 0 {
            self.score
        } else {
            self.score / (n as f64).powf(length_penalty)
        }
    }
}

/// `{s, banned_token}` attached to the audit entry of the step that rolled
/// back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RollbackMark {
    pub s: usize,
    pub banned_token: TokenId,
}

/// One line of the decode audit log: a beam kept after a step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub step: usize,
    pub beam: usize,
    pub parent: usize,
    /// Absolute position of `chosen_token`.
    pub position: usize,
    pub chosen_token: TokenId,
    /// Cumulative penalized log-probability.
    pub score: f64,
    /// Pattern strength of the parent's window (`None` before it fills).
    pub phi: Option<f64>,
    pub c: Option<usize>,
    #[serde(rename = "C")]
    pub coords: Vec<usize>,
    pub n_overlap: usize,
    /// Size of the step's candidate set.
    pub candidates: usize,
    pub active_beams: usize,
    /// Rollback floor after this step.
    pub s_floor: usize,
    pub rollback: Option<RollbackMark>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalHypothesis {
    pub tokens: Vec<TokenId>,
    pub score: f64,
    pub normalized_score: f64,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub strategy: Strategy,
    pub prompt_len: usize,
    /// Answer tokens of the best hypothesis.
    pub tokens: Vec<TokenId>,
    pub score: f64,
    pub normalized_score: f64,
    /// Decode iterations, one forward pass per active beam each.
    pub steps: usize,
    pub forward_calls: usize,
    pub log: Vec<AuditEntry>,
    pub rollbacks: Vec<RollbackEvent>,
    pub hypotheses: Vec<FinalHypothesis>,
    pub ledger: RollbackLedger,
}

impl DecodeResult {
    /// `phi` per audit entry, in log order.
    pub fn phi_sequence(&self) -> Vec<Option<f64>> {
        self.log.iter().map(|e| e.phi).collect()
    }
}

/// Runs `cfg.strategy` from `prompt`.
pub fn decode<M: StepModel + ?Sized>(
    model: &M,
    prompt: &TokenSequence,
    cfg: &DecodeConfig,
) -> Result<DecodeResult, DecodeError> {
    cfg.validate()?;
    decode_unchecked(model, prompt, cfg)
}

/// Like [`decode`] but accepts `l <= r`, for sensitivity sweeps that probe
/// thresholds at the edge of the history.
pub fn decode_unchecked<M: StepModel + ?Sized>(
    model: &M,
    prompt: &TokenSequence,
    cfg: &DecodeConfig,
) -> Result<DecodeResult, DecodeError> {
    cfg.validate_ranges()?;
    let shape = model.shape();
    if cfg.strategy == Strategy::Dopra && cfg.layer >= shape.n_layers {
        return Err(DecodeError::Config(format!(
            "penalized layer {} is outside a {}-layer model",
            cfg.layer, shape.n_layers
        )));
    }
    if cfg.n_can > shape.vocab_size {
        return Err(DecodeError::Config(format!(
            "n_can = {} exceeds the vocabulary of {}",
            cfg.n_can, shape.vocab_size
        )));
    }
    if let Some(k) = model.logit_coverage() {
        if cfg.strategy != Strategy::Greedy && k < cfg.n_can * cfg.n_beam {
            return Err(DecodeError::Config(format!(
                "only {k} logits stored per step, n_can * n_beam = {} needed",
                cfg.n_can * cfg.n_beam
            )));
        }
    }
    match cfg.strategy {
        Strategy::Greedy => greedy(model, prompt, cfg),
        Strategy::Beam | Strategy::Dopra => BeamSearch::new(model, prompt, cfg).run(),
    }
}

fn argmax(logits: &[f64]) -> TokenId {
    top_tokens(logits, 1)[0]
}

fn greedy<M: StepModel + ?Sized>(
    model: &M,
    prompt: &TokenSequence,
    cfg: &DecodeConfig,
) -> Result<DecodeResult, DecodeError> {
    let mut beam = BeamHypothesis::root(prompt.clone());
    let mut log = Vec::new();
    let mut steps = 0;
    while beam.generated_len() < cfg.max_new_tokens {
        let out = model.forward_step(&beam.seq)?;
        let token = argmax(&out.logits);
        let lp = log_softmax(&out.logits)?[token as usize];
        let position = beam.seq.len();
        beam = beam.extend(token, lp, None);
        log.push(AuditEntry {
            step: steps,
            beam: 0,
            parent: 0,
            position,
            chosen_token: token,
            score: beam.score,
            phi: None,
            c: None,
            coords: Vec::new(),
            n_overlap: 0,
            candidates: 1,
            active_beams: 1,
            s_floor: 0,
            rollback: None,
        });
        steps += 1;
        if cfg.eos == Some(token) {
            break;
        }
    }
    let finished = cfg
        .eos
        .is_some_and(|e| beam.seq.generated().last() == Some(&e));
    let hyp = FinalHypothesis {
        tokens: beam.seq.generated().to_vec(),
        score: beam.score,
        normalized_score: beam.normalized_score(cfg.length_penalty),
        finished,
    };
    Ok(DecodeResult {
        strategy: Strategy::Greedy,
        prompt_len: prompt.len(),
        tokens: hyp.tokens.clone(),
        score: hyp.score,
        normalized_score: hyp.normalized_score,
        steps,
        forward_calls: steps,
        log,
        rollbacks: Vec::new(),
        hypotheses: vec![hyp],
        ledger: RollbackLedger::new(),
    })
}

struct BeamSearch<'a, M: ?Sized> {
    model: &'a M,
    prompt: &'a TokenSequence,
    cfg: &'a DecodeConfig,
    penalized: bool,
}

impl<'a, M: StepModel + ?Sized> BeamSearch<'a, M> {
    fn new(model: &'a M, prompt: &'a TokenSequence, cfg: &'a DecodeConfig) -> Self {
        Self {
            model,
            prompt,
            cfg,
            penalized: cfg.strategy == Strategy::Dopra,
        }
    }

    fn run(self) -> Result<DecodeResult, DecodeError> {
        let cfg = self.cfg;
        let detector = cfg.detector();
        let budget = cfg.step_budget();
        let mut beams = vec![BeamHypothesis::root(self.prompt.clone())];
        let mut finished: Vec<BeamHypothesis> = Vec::new();
        let mut ledger = RollbackLedger::new();
        let mut log = Vec::new();
        let mut rollbacks = Vec::new();
        let mut steps = 0;
        let mut forward_calls = 0;
        let mut early_stop = false;

        while !beams.is_empty() && beams[0].generated_len() < cfg.max_new_tokens && steps < budget {
            let step = steps;
            steps += 1;

            let outputs = beams
                .iter()
                .map(|b| self.model.forward_step(&b.seq))
                .collect::<Result<Vec<StepOutput>, _>>()?;
            forward_calls += outputs.len();

            let descriptors = if self.penalized {
                beams
                    .iter()
                    .zip(&outputs)
                    .map(|(b, out)| detector.describe(out, &b.seq))
                    .collect::<Result<Vec<_>, _>>()?
            } else {
                vec![None; beams.len()]
            };
            let phis: Vec<f64> = descriptors
                .iter()
                .map(|d| d.as_ref().map_or(0.0, |d| d.phi))
                .collect();
            let alpha = if self.penalized { cfg.alpha } else { 0.0 };

            let position = beams[0].seq.len();
            let is_banned = |t: TokenId| ledger.is_excluded(position, t);
            let set = build_candidate_set(&beams, &outputs, &phis, cfg.n_can, alpha, &is_banned)?;

            let mut ranked: Vec<(f64, &Candidate)> = set
                .entries
                .iter()
                .filter(|c| !c.banned)
                .map(|c| (beams[c.beam].score + c.log_prob, c))
                .collect();
            let fallback;
            if ranked.is_empty() {
                // every candidate banned: widen to the best unbanned token
                fallback = self.fallback_candidates(&beams, &outputs, &phis, alpha, &is_banned)?;
                ranked = fallback
                    .iter()
                    .map(|c| (beams[c.beam].score + c.log_prob, c))
                    .collect();
            }
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0));

            let mut next = Vec::with_capacity(cfg.n_beam);
            let mut parents = Vec::with_capacity(cfg.n_beam);
            for (rank, (_, cand)) in ranked.iter().enumerate() {
                if next.len() == cfg.n_beam {
                    break;
                }
                let parent = &beams[cand.beam];
                let child =
                    parent.extend(cand.token, cand.log_prob, descriptors[cand.beam].clone());
                if cfg.eos == Some(cand.token) {
                    if rank < cfg.n_beam {
                        finished.push(child);
                    }
                    continue;
                }
                next.push(child);
                parents.push(cand.beam);
            }

            let active_beams = beams.len();
            let mut entries: Vec<AuditEntry> = next
                .iter()
                .zip(&parents)
                .enumerate()
                .map(|(i, (child, &parent))| {
                    let coords = if self.penalized {
                        coordinate_set(child, cfg.l)
                    } else {
                        Vec::new()
                    };
                    let n_overlap = overlap_count(&coords).map_or(0, |(_, n)| n);
                    let descriptor = descriptors[parent].as_ref();
                    AuditEntry {
                        step,
                        beam: i,
                        parent,
                        position,
                        chosen_token: *child.seq.tokens().last().expect("extended"),
                        score: child.score,
                        phi: descriptor.map(|d| d.phi),
                        c: descriptor.map(|d| d.c),
                        coords,
                        n_overlap,
                        candidates: set.len(),
                        active_beams,
                        s_floor: ledger.s_floor,
                        rollback: None,
                    }
                })
                .collect();

            beams = next;
            if finished.len() >= cfg.n_beam {
                log.append(&mut entries);
                early_stop = true;
                break;
            }

            if self.penalized && cfg.rollback && !beams.is_empty() {
                let coords = &entries[0].coords;
                if let Some((s, n_overlap)) = overlap_count(coords) {
                    let decision = maybe_rollback(
                        &mut beams,
                        &mut ledger,
                        s,
                        n_overlap,
                        cfg,
                        step,
                        Some(budget - steps),
                    );
                    if let RollbackDecision::Rolled(event) = decision {
                        entries[0].rollback = Some(RollbackMark {
                            s: event.s,
                            banned_token: event.banned_token,
                        });
                        rollbacks.push(event);
                    }
                }
            }
            for e in &mut entries {
                e.s_floor = ledger.s_floor;
            }
            log.append(&mut entries);
        }

        let mut pool: Vec<(BeamHypothesis, bool)> =
            finished.into_iter().map(|b| (b, true)).collect();
        if !early_stop {
            pool.extend(beams.into_iter().map(|b| (b, false)));
        }
        let lp = cfg.length_penalty;
        let mut hypotheses: Vec<FinalHypothesis> = pool
            .iter()
            .map(|(b, done)| FinalHypothesis {
                tokens: b.seq.generated().to_vec(),
                score: b.score,
                normalized_score: b.normalized_score(lp),
                finished: *done,
            })
            .collect();
        // stable: earlier entries win ties
        hypotheses.sort_by(|a, b| b.normalized_score.total_cmp(&a.normalized_score));
        let best = hypotheses.first().cloned().unwrap_or(FinalHypothesis {
            tokens: Vec::new(),
            score: 0.0,
            normalized_score: 0.0,
            finished: false,
        });

        Ok(DecodeResult {
            strategy: cfg.strategy,
            prompt_len: self.prompt.len(),
            tokens: best.tokens,
            score: best.score,
            normalized_score: best.normalized_score,
            steps,
            forward_calls,
            log,
            rollbacks,
            hypotheses,
            ledger,
        })
    }

    fn fallback_candidates(
        &self,
        beams: &[BeamHypothesis],
        outputs: &[StepOutput],
        phis: &[f64],
        alpha: f64,
        is_banned: &dyn Fn(TokenId) -> bool,
    ) -> Result<Vec<Candidate>, DecodeError> {
        let mut out = Vec::new();
        for (beam, (step, &phi)) in outputs.iter().zip(phis).enumerate().take(beams.len()) {
            let log_probs = apply_penalty(&step.logits, phi, alpha)?;
            if let Some(token) = top_tokens(&step.logits, step.logits.len())
                .into_iter()
                .find(|&t| !is_banned(t))
            {
                out.push(Candidate {
                    beam,
                    token,
                    logit: step.logits[token as usize],
                    log_prob: log_probs[token as usize],
                    banned: false,
                });
            }
        }
        Ok(out)
    }
}
