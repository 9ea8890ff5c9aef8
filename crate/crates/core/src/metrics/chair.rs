//! Caption-level hallucination ratios.
//!
//! `c_s` is the pooled fraction of mentioned objects that are absent from
//! the ground truth; `c_i` is the fraction of captions with at least one such
//! object. This is the reverse of the older sentence/instance naming; the
//! formulas are what count.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Lexicon, MetricsError};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageId {
    Number(u64),
    Text(String),
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageId::Number(n) => write!(f, "{n}"),
            ImageId::Text(s) => f.write_str(s),
        }
    }
}

/// One line of a caption file: `{"image_id", "caption", "ground_truth": [..]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionInput {
    pub image_id: ImageId,
    pub caption: String,
    #[serde(default)]
    pub ground_truth: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: ImageId,
    pub caption: String,
    pub mentioned_objects: BTreeSet<String>,
    pub ground_truth_objects: BTreeSet<String>,
}

impl CaptionRecord {
    /// Extracts mentions and canonicalizes ground truth names; unknown ground
    /// truth names are kept lowercased.
    pub fn from_input(input: CaptionInput, lexicon: &Lexicon) -> Self {
        let mentioned_objects = lexicon.extract_objects(&input.caption);
        let ground_truth_objects = input
            .ground_truth
            .iter()
            .map(|g| {
                lexicon
                    .canonicalize(g)
                    .unwrap_or_else(|| super::lexicon::words(g).join(" "))
            })
            .collect();
        Self {
            image_id: input.image_id,
            caption: input.caption,
            mentioned_objects,
            ground_truth_objects,
        }
    }

    pub fn hallucinated(&self) -> BTreeSet<&String> {
        self.mentioned_objects
            .difference(&self.ground_truth_objects)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChairCounts {
    pub hallucinated_objects: usize,
    pub mentioned_objects: usize,
    pub hallucinated_captions: usize,
    pub captions: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChairScores {
    pub c_s: f64,
    pub c_i: f64,
    pub counts: ChairCounts,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn chair_scores(records: &[CaptionRecord]) -> Result<ChairScores, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut counts = ChairCounts {
        hallucinated_objects: 0,
        mentioned_objects: 0,
        hallucinated_captions: 0,
        captions: records.len(),
    };
    for record in records {
        let h = record.hallucinated().len();
        counts.hallucinated_objects += h;
        counts.mentioned_objects += record.mentioned_objects.len();
        counts.hallucinated_captions += usize::from(h > 0);
    }
    Ok(ChairScores {
        c_s: ratio(counts.hallucinated_objects, counts.mentioned_objects),
        c_i: ratio(counts.hallucinated_captions, counts.captions),
        counts,
    })
}
