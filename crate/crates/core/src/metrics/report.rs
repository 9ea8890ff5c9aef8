//! Summary table row in percentages.

use serde::{Deserialize, Serialize};

/// Fractions in `[0, 1]`, rendered as percentages with one decimal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub pope_f1: f64,
    pub c_s: f64,
    pub c_i: f64,
}

impl ReportRow {
    pub const HEADER: &'static str = "| POPE F1 ↑ | C_S ↓ | C_I ↓ |";

    pub fn percentages(&self) -> [String; 3] {
        [self.pope_f1, self.c_s, self.c_i].map(|v| format!("{:.1}", v * 100.0))
    }

    pub fn cells(&self) -> String {
        self.percentages().join(" | ")
    }

    /// Header, separator and value line as a markdown table.
    pub fn markdown(&self) -> String {
        format!("{}\n|---|---|---|\n| {} |\n", Self::HEADER, self.cells())
    }
}
