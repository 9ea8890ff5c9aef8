//! Object-hallucination metrics for captions and yes/no probes.

pub mod chair;
pub mod lexicon;
pub mod pope;
pub mod report;

use thiserror::Error;

pub use chair::{chair_scores, CaptionRecord, ChairCounts, ChairScores, ImageId};
pub use lexicon::Lexicon;
pub use pope::{pope_scores, Answer, Confusion, PopeRecord, PopeScores, ProbeScenario, Truth};
pub use report::ReportRow;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no records to score")]
    Empty,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("lexicon line {line}: {message}")]
    Lexicon { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parses JSON lines, skipping blank lines. Errors carry 1-based line numbers.
pub fn parse_jsonl<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<T>, MetricsError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| MetricsError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
