//! Retrospective re-allocation.
//!
//! When the pattern coordinates of the recent steps keep pointing at the same
//! token `s`, decoding rewinds to `x_0..=x_s`, bans the token that followed
//! `s`, and re-selects from the remaining candidates. The ledger caps
//! rollbacks per position at `beta` and never lets the target move backwards.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{BeamHypothesis, DecodeConfig};
use crate::model::TokenId;

/// Rollback bookkeeping for one decode.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RollbackLedger {
    pub counts: BTreeMap<usize, usize>,
    pub excluded: BTreeMap<usize, BTreeSet<TokenId>>,
    pub s_floor: usize,
}

impl RollbackLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self, position: usize) -> usize {
        self.counts.get(&position).copied().unwrap_or(0)
    }

    pub fn is_excluded(&self, position: usize, token: TokenId) -> bool {
        self.excluded
            .get(&position)
            .is_some_and(|set| set.contains(&token))
    }

    pub fn excluded_count(&self, position: usize) -> usize {
        self.excluded.get(&position).map_or(0, BTreeSet::len)
    }

    pub fn total_rollbacks(&self) -> usize {
        self.counts.values().sum()
    }

    fn record(&mut self, target: usize, removed: TokenId) {
        *self.counts.entry(target).or_default() += 1;
        self.excluded.entry(target + 1).or_default().insert(removed);
        self.s_floor = self.s_floor.max(target);
    }
}

/// Coordinates `c` of the last `min(l, available)` pattern descriptors.
pub fn coordinate_set(beam: &BeamHypothesis, l: usize) -> Vec<usize> {
    let mut coords: Vec<usize> = beam
        .descriptors
        .iter()
        .rev()
        .flatten()
        .take(l)
        .map(|d| d.c)
        .collect();
    coords.reverse();
    coords
}

/// Mode of `coords` and its multiplicity; ties go to the larger position.
/// `None` for an empty set.
pub fn overlap_count(coords: &[usize]) -> Option<(usize, usize)> {
    let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
    for &c in coords {
        *histogram.entry(c).or_default() += 1;
    }
    // ascending keys + `>=` keeps the largest position among equal counts
    histogram
        .into_iter()
        .fold(None, |best, (pos, n)| match best {
            Some((_, m)) if n < m => best,
            _ => Some((pos, n)),
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RollbackEvent {
    pub step: usize,
    /// Position rewound to; the sequence now ends at `x_s`.
    pub s: usize,
    /// Mode of the coordinate set that triggered the rollback.
    pub trigger: usize,
    pub n_overlap: usize,
    pub banned_token: TokenId,
    /// Answer length before the rewind.
    pub rewound_from: usize,
    /// `counts[s]` after this rollback.
    pub count: usize,
    pub s_floor: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbandonReason {
    /// Every admissible target lies below the monotone floor.
    BelowFloor,
    /// Target and its fallback are capped or have no candidates left.
    Exhausted,
    /// The target would leave no answer token to replace.
    OutOfRange,
    /// Regenerating the rewound tokens would exceed the step budget.
    Budget,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RollbackDecision {
    BelowThreshold,
    Rolled(RollbackEvent),
    Abandoned(AbandonReason),
}

/// Applies the rollback rule to the best beam (`beams[0]`).
///
/// On success `beams` collapses to that beam truncated after `x_s`, the
/// ledger bans the removed `x_{s+1}`, bumps `counts[s]`, and raises
/// `s_floor`. A target at its cap, or whose candidates at `s + 1` would all
/// be banned, retargets once to `s - 1`; anything below `s_floor` is
/// abandoned. `step_allowance` is the number of decode steps still
/// available; a rollback that could not regenerate to `max_new_tokens`
/// within it is abandoned.
pub fn maybe_rollback(
    beams: &mut Vec<BeamHypothesis>,
    ledger: &mut RollbackLedger,
    s: usize,
    n_overlap: usize,
    cfg: &DecodeConfig,
    step: usize,
    step_allowance: Option<usize>,
) -> RollbackDecision {
    if !cfg.rollback || n_overlap < cfg.r {
        return RollbackDecision::BelowThreshold;
    }
    let Some(beam) = beams.first() else {
        return RollbackDecision::Abandoned(AbandonReason::OutOfRange);
    };
    let prefix = beam.seq.prefix_len();
    let len = beam.seq.len();

    let mut target = s;
    let mut retargeted = false;
    loop {
        if target < ledger.s_floor {
            return RollbackDecision::Abandoned(AbandonReason::BelowFloor);
        }
        if target + 1 < prefix || target + 1 >= len {
            return RollbackDecision::Abandoned(AbandonReason::OutOfRange);
        }
        let removed = beam.seq.tokens()[target + 1];
        let banned_after = ledger.excluded_count(target + 1)
            + usize::from(!ledger.is_excluded(target + 1, removed));
        if ledger.count(target) >= cfg.beta || banned_after >= cfg.n_can {
            if retargeted || target == 0 {
                return RollbackDecision::Abandoned(AbandonReason::Exhausted);
            }
            target -= 1;
            retargeted = true;
            continue;
        }
        let keep = target + 1 - prefix;
        if let Some(allowance) = step_allowance {
            if cfg.max_new_tokens.saturating_sub(keep) > allowance {
                return RollbackDecision::Abandoned(AbandonReason::Budget);
            }
        }

        let rewound_from = beam.generated_len();
        let mut best = beams.swap_remove(0);
        beams.clear();
        best.truncate(keep);
        beams.push(best);
        ledger.record(target, removed);
        return RollbackDecision::Rolled(RollbackEvent {
            step,
            s: target,
            trigger: s,
            n_overlap,
            banned_token: removed,
            rewound_from,
            count: ledger.count(target),
            s_floor: ledger.s_floor,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TokenSequence;
    use crate::penalty::PatternDescriptor;

    fn beam_with(generated: &[TokenId], coords: &[Option<usize>]) -> BeamHypothesis {
        let mut beam = BeamHypothesis::root(TokenSequence::new(&[100, 101], &[102]).unwrap());
        for (&t, &c) in generated.iter().zip(coords) {
            let d = c.map(|c| PatternDescriptor {
                phi: 1.0,
                c,
                scores: vec![],
            });
            beam = beam.extend(t, -0.5, d);
        }
        beam
    }

    fn cfg(r: usize, l: usize) -> DecodeConfig {
        DecodeConfig {
            r,
            l,
            beta: 2,
            n_can: 5,
            max_new_tokens: 32,
            ..DecodeConfig::default()
        }
    }

    #[test]
    fn coordinate_set_takes_recent_descriptors() {
        let b = beam_with(&[1, 2, 3], &[Some(5), Some(5), Some(5)]);
        assert_eq!(coordinate_set(&b, 16), vec![5, 5, 5]);
        let b = beam_with(&[1, 2, 3, 4], &[None, None, Some(4), Some(5)]);
        assert_eq!(coordinate_set(&b, 16), vec![4, 5]);
        assert_eq!(coordinate_set(&b, 1), vec![5]);
    }

    #[test]
    fn overlap_count_mode_and_ties() {
        assert_eq!(overlap_count(&[7, 7, 7, 7]), Some((7, 4)));
        assert_eq!(overlap_count(&[3, 9, 9, 3]), Some((9, 2)));
        assert_eq!(overlap_count(&[1, 2, 2, 3]), Some((2, 2)));
        assert_eq!(overlap_count(&[]), None);
    }

    #[test]
    fn below_threshold_leaves_beams_alone() {
        let mut beams = vec![beam_with(&[1, 2, 3, 4], &[None; 4])];
        let before = beams.clone();
        let mut ledger = RollbackLedger::new();
        let d = maybe_rollback(&mut beams, &mut ledger, 4, 2, &cfg(3, 4), 0, None);
        assert_eq!(d, RollbackDecision::BelowThreshold);
        assert_eq!(beams, before);
        assert_eq!(ledger, RollbackLedger::new());
    }

    #[test]
    fn rollback_truncates_and_bans_next_token() {
        // positions: 0..3 prompt, 3..7 answer tokens [10, 11, 12, 13]
        let mut beams = vec![
            beam_with(&[10, 11, 12, 13], &[None; 4]),
            beam_with(&[10, 11, 12, 14], &[None; 4]),
        ];
        let mut ledger = RollbackLedger::new();
        let d = maybe_rollback(&mut beams, &mut ledger, 4, 3, &cfg(3, 4), 9, None);
        let RollbackDecision::Rolled(event) = d else {
            panic!("expected rollback, got {d:?}");
        };
        assert_eq!(event.s, 4);
        assert_eq!(event.banned_token, 12);
        assert_eq!(beams.len(), 1);
        assert_eq!(beams[0].seq.tokens(), &[100, 101, 102, 10, 11]);
        assert_eq!(beams[0].token_scores.len(), 2);
        assert!(ledger.is_excluded(5, 12));
        assert_eq!(ledger.count(4), 1);
        assert_eq!(ledger.s_floor, 4);
    }

    #[test]
    fn capped_position_retargets_then_abandons() {
        let config = cfg(3, 4);
        let mut ledger = RollbackLedger::new();
        ledger.counts.insert(5, config.beta);
        let mut beams = vec![beam_with(&[10, 11, 12, 13], &[None; 4])];
        let d = maybe_rollback(&mut beams, &mut ledger, 5, 3, &config, 0, None);
        let RollbackDecision::Rolled(event) = d else {
            panic!("expected retarget, got {d:?}");
        };
        assert_eq!((event.trigger, event.s), (5, 4));

        // the floor is now 4, so a capped 4 cannot fall back to 3
        ledger.counts.insert(4, config.beta);
        let mut beams = vec![beam_with(&[10, 11, 12, 13], &[None; 4])];
        let d = maybe_rollback(&mut beams, &mut ledger, 4, 3, &config, 0, None);
        assert_eq!(d, RollbackDecision::Abandoned(AbandonReason::BelowFloor));
    }

    #[test]
    fn floor_blocks_earlier_targets() {
        let mut ledger = RollbackLedger {
            s_floor: 6,
            ..RollbackLedger::default()
        };
        let mut beams = vec![beam_with(&[10, 11, 12, 13, 14], &[None; 5])];
        let d = maybe_rollback(&mut beams, &mut ledger, 5, 4, &cfg(3, 4), 0, None);
        assert_eq!(d, RollbackDecision::Abandoned(AbandonReason::BelowFloor));
    }

    #[test]
    fn exhausted_candidates_retarget() {
        let config = DecodeConfig {
            n_can: 2,
            ..cfg(3, 4)
        };
        let mut ledger = RollbackLedger::new();
        ledger.excluded.entry(6).or_default().insert(99);
        let mut beams = vec![beam_with(&[10, 11, 12, 13], &[None; 4])];
        let d = maybe_rollback(&mut beams, &mut ledger, 5, 3, &config, 0, None);
        let RollbackDecision::Rolled(event) = d else {
            panic!("expected retarget, got {d:?}");
        };
        assert_eq!(event.s, 4);
        assert_eq!(event.banned_token, 12);
    }

    #[test]
    fn budget_can_veto() {
        let mut ledger = RollbackLedger::new();
        let mut beams = vec![beam_with(&[10, 11, 12, 13], &[None; 4])];
        // keeps 2 answer tokens, needs 30 more steps
        let d = maybe_rollback(&mut beams, &mut ledger, 4, 3, &cfg(3, 4), 0, Some(29));
        assert_eq!(d, RollbackDecision::Abandoned(AbandonReason::Budget));
        let d = maybe_rollback(&mut beams, &mut ledger, 4, 3, &cfg(3, 4), 0, Some(30));
        assert!(matches!(d, RollbackDecision::Rolled(_)));
    }
}
