//! Yes/no object probing scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Deserializer, Serialize};

use super::{ImageId, MetricsError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
}

impl Answer {
    /// Reads a leading "yes" or "no" word, ignoring case and leading space.
    pub fn parse(text: &str) -> Option<Self> {
        let lower = text.trim_start().to_lowercase();
        let word: String = lower.chars().take_while(|c| c.is_alphanumeric()).collect();
        match word.as_str() {
            "yes" => Some(Answer::Yes),
            "no" => Some(Answer::No),
            _ => None,
        }
    }
}

impl<'de> Deserialize<'de> for Answer {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Answer::parse(&text).ok_or_else(|| {
            serde::de::Error::custom(format!("answer `{text}` does not start with yes/no"))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Truth {
    Present,
    Absent,
}

impl<'de> Deserialize<'de> for Truth {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        match text.trim().to_lowercase().as_str() {
            "present" | "yes" => Ok(Truth::Present),
            "absent" | "no" => Ok(Truth::Absent),
            _ => Err(serde::de::Error::custom(format!(
                "truth `{text}` is not present/absent"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeScenario {
    Random,
    Popular,
    Adversarial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeRecord {
    pub image_id: ImageId,
    pub object: String,
    pub answer: Answer,
    pub truth: Truth,
    pub scenario: ProbeScenario,
}

/// Confusion counts with "yes" as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn add(&mut self, answer: Answer, truth: Truth) {
        match (answer, truth) {
            (Answer::Yes, Truth::Present) => self.tp += 1,
            (Answer::Yes, Truth::Absent) => self.fp += 1,
            (Answer::No, Truth::Absent) => self.tn += 1,
            (Answer::No, Truth::Present) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        div(self.tp + self.tn, self.total())
    }

    /// Zero when nothing was predicted positive.
    pub fn precision(&self) -> f64 {
        div(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        div(self.tp, self.tp + self.fn_)
    }

    /// `2tp / (2tp + fp + fn)`, zero when there is no positive at all.
    pub fn f1(&self) -> f64 {
        div(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn yes_ratio(&self) -> f64 {
        div(self.tp + self.fp, self.total())
    }

    pub fn summary(&self) -> ProbeSummary {
        ProbeSummary {
            confusion: *self,
            accuracy: self.accuracy(),
            precision: self.precision(),
            recall: self.recall(),
            f1: self.f1(),
            yes_ratio: self.yes_ratio(),
        }
    }
}

fn div(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub confusion: Confusion,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub yes_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeScores {
    pub scenarios: BTreeMap<ProbeScenario, ProbeSummary>,
    pub pooled: ProbeSummary,
    /// Mean of the per-scenario F1 scores.
    pub mean_f1: f64,
}

pub fn pope_scores(records: &[PopeRecord]) -> Result<PopeScores, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut per: BTreeMap<ProbeScenario, Confusion> = BTreeMap::new();
    let mut pooled = Confusion::default();
    for r in records {
        per.entry(r.scenario).or_default().add(r.answer, r.truth);
        pooled.add(r.answer, r.truth);
    }
    let scenarios: BTreeMap<_, _> = per.into_iter().map(|(s, c)| (s, c.summary())).collect();
    let mean_f1 = scenarios.values().map(|s| s.f1).sum::<f64>() / scenarios.len() as f64;
    Ok(PopeScores {
        scenarios,
        pooled: pooled.summary(),
        mean_f1,
    })
}
