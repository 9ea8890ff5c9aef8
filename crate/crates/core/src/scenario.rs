//! Synthetic attention/logit streams with a known ground truth.
//!
//! Background rows are seeded noise over the causal prefix. A plant moves
//! `strength` of every later row's mass onto one answer position, forming a
//! column the detector should find. Traces are position-indexed, so every
//! beam of the same length sees the same step.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::trace::{StepRecord, StoredLogits, TraceError, TraceHeader, TraceIndexing};
use crate::model::{QueryAttention, TokenId, TraceFile, TraceReplay};
use crate::search::{decode, DecodeConfig, DecodeError, Strategy};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    /// Flat Dirichlet draw over the causal prefix.
    #[default]
    Dirichlet,
    /// Equal weight on every visible position.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Plant {
    /// Absolute position of the planted column.
    pub position: usize,
    /// Answer index of the first row that carries the plant.
    #[serde(default)]
    pub start_step: usize,
    /// Mass moved onto `position`; `0` reproduces the unplanted stream.
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    /// Number of answer steps stored.
    pub length: usize,
    pub vocab: usize,
    pub n_image: usize,
    pub n_prompt: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Layer carrying the generated attention.
    pub layer: usize,
    /// Trailing rows stored per step; must cover the detector window.
    pub window_rows: usize,
    pub seed: u64,
    pub background: Background,
    pub plant: Option<Plant>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            length: 48,
            vocab: 64,
            n_image: 16,
            n_prompt: 8,
            n_layers: 16,
            n_heads: 4,
            layer: 12,
            window_rows: 32,
            seed: 0,
            background: Background::Dirichlet,
            plant: None,
        }
    }
}

impl Scenario {
    pub fn prefix_len(&self) -> usize {
        self.n_image + self.n_prompt
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if self.length == 0 || self.vocab == 0 || self.n_heads == 0 || self.n_prompt == 0 {
            return bad("length, vocab, n_heads and n_prompt must be nonzero".into());
        }
        if self.layer >= self.n_layers {
            return bad(format!(
                "layer {} outside {} layers",
                self.layer, self.n_layers
            ));
        }
        if let Some(plant) = &self.plant {
            if !(0.0..=1.0).contains(&plant.strength) {
                return bad(format!("plant strength {} outside [0, 1]", plant.strength));
            }
            let prefix = self.prefix_len();
            if plant.position < prefix || plant.position >= prefix + self.length {
                return bad(format!(
                    "plant position {} outside the answer span {}..{}",
                    plant.position,
                    prefix,
                    prefix + self.length
                ));
            }
        }
        Ok(())
    }

    /// Answer index of the planted position.
    pub fn plant_step(&self) -> Option<usize> {
        self.plant.as_ref().map(|p| p.position - self.prefix_len())
    }
}

fn background_row(kind: Background, width: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match kind {
        Background::Uniform => vec![1.0 / width as f64; width],
        Background::Dirichlet => {
            let draws: Vec<f64> = (0..width).map(|_| Exp1.sample(rng)).collect();
            let total: f64 = draws.iter().sum();
            draws.into_iter().map(|d| d / total).collect()
        }
    }
}

fn normalize(row: &mut [f64]) {
    let total: f64 = row.iter().sum();
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Builds the trace described by `scenario`.
pub fn generate(scenario: &Scenario) -> Result<TraceFile, ScenarioError> {
    scenario.validate()?;
    let prefix = scenario.prefix_len();
    let total = prefix + scenario.length;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);

    let prompt: Vec<TokenId> = (0..prefix)
        .map(|_| rng.random_range(0..scenario.vocab) as TokenId)
        .collect();

    // the last answer step reads queries up to total - 2
    let mut rows = Vec::with_capacity(total);
    for query in 0..total.saturating_sub(1) {
        let heads = (0..scenario.n_heads)
            .map(|_| {
                let mut row = background_row(scenario.background, query + 1, &mut rng);
                if let Some(plant) = &scenario.plant {
                    let planted = query >= plant.position && query - prefix >= plant.start_step;
                    if planted {
                        let keep = 1.0 - plant.strength;
                        for (j, v) in row.iter_mut().enumerate() {
                            let spike = if j == plant.position { 1.0 } else { 0.0 };
                            *v = plant.strength * spike + keep * *v;
                        }
                    }
                }
                normalize(&mut row);
                row
            })
            .collect();
        rows.push(Arc::new(QueryAttention {
            query,
            weights: vec![heads],
        }));
    }

    let header = TraceHeader {
        vocab_size: scenario.vocab,
        n_layers: scenario.n_layers,
        n_heads: scenario.n_heads,
        n_image: scenario.n_image,
        n_prompt: scenario.n_prompt,
        attn_layer: scenario.layer,
        window_rows: scenario.window_rows,
        logits_top_k: None,
        full_tensor: false,
        indexing: TraceIndexing::ByPosition,
    };
    let mut trace = TraceFile::new(header, prompt)?;
    for g in 0..scenario.length {
        let seq_len = prefix + g;
        let logits: Vec<f64> = (0..scenario.vocab)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let first = if scenario.window_rows == 0 {
            0
        } else {
            seq_len.saturating_sub(scenario.window_rows)
        };
        trace.steps.push(StepRecord {
            seq_len,
            generated: vec![0; g],
            logits: StoredLogits::Full(logits),
            rows: rows[first..seq_len].to_vec(),
        });
    }
    Ok(trace)
}

/// Sensitivity grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub strengths: Vec<f64>,
    pub ks: Vec<usize>,
    pub rs: Vec<usize>,
    /// Seeds `0..seeds` per cell.
    pub seeds: u64,
    /// Answer index of the planted column.
    pub plant_step: usize,
    pub scenario: Scenario,
    /// Base decode settings; `k`, `r`, `l` and `max_new_tokens` are set per cell.
    pub decode: DecodeConfig,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            strengths: vec![0.0, 0.5, 0.9],
            ks: vec![4, 8],
            rs: vec![2, 3],
            seeds: 20,
            plant_step: 20,
            scenario: Scenario::default(),
            decode: DecodeConfig::default(),
        }
    }
}

/// One row of the sensitivity table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub strength: f64,
    pub k: usize,
    pub r: usize,
    pub l: usize,
    pub seeds: u64,
    /// Fraction of seeds with at least one rollback.
    pub trigger_rate: f64,
    /// Fraction of seeds whose first rollback targets the plant.
    pub hit_rate: f64,
    /// Mean windows from the plant's first appearance to a hit.
    pub mean_delay: Option<f64>,
}

/// History length used for a `(k, r)` cell: `k` when it exceeds `r`,
/// otherwise `r + 1`.
pub fn sweep_history(k: usize, r: usize) -> usize {
    if k > r {
        k
    } else {
        r + 1
    }
}

/// Outcome of one planted decode.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub triggered: bool,
    pub hit: bool,
    pub delay: Option<usize>,
}

/// Decodes `scenario` with `cfg` and compares the first rollback against the
/// plant.
pub fn detect(scenario: &Scenario, cfg: &DecodeConfig) -> Result<Detection, ScenarioError> {
    let trace = generate(scenario)?;
    let prefix = scenario.prefix_len();
    let replay = TraceReplay::new(trace);
    let prompt = replay.prompt()?;
    let cfg = DecodeConfig {
        strategy: Strategy::Dopra,
        layer: scenario.layer,
        max_new_tokens: cfg.max_new_tokens.min(scenario.length),
        ..cfg.clone()
    };
    let result = decode(&replay, &prompt, &cfg)?;
    let Some(first) = result.rollbacks.first() else {
        return Ok(Detection {
            triggered: false,
            hit: false,
            delay: None,
        });
    };
    let hit = scenario
        .plant
        .as_ref()
        .is_some_and(|p| first.s == p.position);
    // the triggering token's window ends at prefix + rewound_from - 2
    let delay = scenario
        .plant
        .as_ref()
        .filter(|_| hit)
        .map(|p| (prefix + first.rewound_from - 1).saturating_sub(p.position));
    Ok(Detection {
        triggered: true,
        hit,
        delay,
    })
}

/// Runs every `(strength, k, r)` cell over the grid's seeds.
pub fn sweep(grid: &SweepGrid) -> Result<Vec<SweepRow>, ScenarioError> {
    if grid.strengths.is_empty() || grid.ks.is_empty() || grid.rs.is_empty() || grid.seeds == 0 {
        return Err(ScenarioError::Invalid(
            "sweep grids must be nonempty".into(),
        ));
    }
    let cells: Vec<(f64, usize, usize)> = grid
        .strengths
        .iter()
        .flat_map(|&s| {
            grid.ks
                .iter()
                .flat_map(move |&k| grid.rs.iter().map(move |&r| (s, k, r)))
        })
        .collect();
    cells
        .par_iter()
        .map(|&(strength, k, r)| {
            let l = sweep_history(k, r);
            let cfg = DecodeConfig {
                k,
                r,
                l,
                max_new_tokens: grid.scenario.length,
                ..grid.decode.clone()
            };
            let mut triggered = 0usize;
            let mut hits = 0usize;
            let mut delays = Vec::new();
            for seed in 0..grid.seeds {
                let scenario = Scenario {
                    seed,
                    plant: Some(Plant {
                        position: grid.scenario.prefix_len() + grid.plant_step,
                        start_step: 0,
                        strength,
                    }),
                    ..grid.scenario.clone()
                };
                let d = detect(&scenario, &cfg)?;
                triggered += usize::from(d.triggered);
                hits += usize::from(d.hit);
                delays.extend(d.delay);
            }
            let n = grid.seeds as f64;
            Ok(SweepRow {
                strength,
                k,
                r,
                l,
                seeds: grid.seeds,
                trigger_rate: triggered as f64 / n,
                hit_rate: hits as f64 / n,
                mean_delay: (!delays.is_empty())
                    .then(|| delays.iter().sum::<usize>() as f64 / delays.len() as f64),
            })
        })
        .collect()
}

/// Renders sweep rows as CSV with a header line.
pub fn sweep_csv(rows: &[SweepRow]) -> Result<String, ScenarioError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.serialize(row)?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StepModel;
    use crate::penalty::Detector;

    fn planted(strength: f64, seed: u64) -> Scenario {
        Scenario {
            seed,
            plant: Some(Plant {
                position: 24 + 10,
                start_step: 0,
                strength,
            }),
            ..Scenario::default()
        }
    }

    #[test]
    fn rows_are_distributions() {
        let trace = generate(&planted(0.7, 3)).unwrap();
        for step in &trace.steps {
            for row in &step.rows {
                for head in &row.weights[0] {
                    assert_eq!(head.len(), row.query + 1);
                    assert!((head.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn zero_strength_matches_unplanted_bytes() {
        let none = generate(&Scenario {
            seed: 9,
            ..Scenario::default()
        })
        .unwrap();
        let zero = generate(&planted(0.0, 9)).unwrap();
        assert_eq!(none.to_bytes(), zero.to_bytes());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&planted(0.5, 1)).unwrap().to_bytes();
        let b = generate(&planted(0.5, 1)).unwrap().to_bytes();
        assert_eq!(a, b);
        let c = generate(&planted(0.5, 2)).unwrap().to_bytes();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_infeasible_plants() {
        for plant in [
            Plant {
                position: 3,
                start_step: 0,
                strength: 0.5,
            },
            Plant {
                position: 24 + 48,
                start_step: 0,
                strength: 0.5,
            },
            Plant {
                position: 30,
                start_step: 0,
                strength: 1.5,
            },
            Plant {
                position: 30,
                start_step: 0,
                strength: f64::NAN,
            },
        ] {
            let s = Scenario {
                plant: Some(plant),
                ..Scenario::default()
            };
            assert!(matches!(generate(&s), Err(ScenarioError::Invalid(_))));
        }
    }

    #[test]
    fn planted_column_wins_once_it_has_two_planted_rows() {
        let scenario = planted(0.9, 5);
        let p = 34;
        let replay = TraceReplay::new(generate(&scenario).unwrap());
        let mut seq = replay.prompt().unwrap();
        let detector = Detector {
            layer: 12,
            k: 4,
            sigma: 50.0,
        };
        for _ in 0..20 {
            let out = replay.forward_step(&seq).unwrap();
            let last = seq.len() - 1;
            if let Some(d) = detector.describe(&out, &seq).unwrap() {
                if last > p && last < p + 4 {
                    assert_eq!(d.c, p, "window ending at {last}");
                }
            }
            seq.push(0);
        }
    }

    #[test]
    fn sweep_history_rule() {
        assert_eq!(sweep_history(16, 15), 16);
        assert_eq!(sweep_history(4, 4), 5);
        assert_eq!(sweep_history(4, 6), 7);
    }

    #[test]
    fn sweep_csv_has_header_and_rows() {
        let grid = SweepGrid {
            strengths: vec![0.0, 0.9],
            ks: vec![4],
            rs: vec![3],
            seeds: 3,
            ..SweepGrid::default()
        };
        let rows = sweep(&grid).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].trigger_rate, 0.0);
        assert_eq!(rows[1].hit_rate, 1.0);
        let text = sweep_csv(&rows).unwrap();
        assert!(text.starts_with("strength,k,r,l,seeds,trigger_rate,hit_rate,mean_delay\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
