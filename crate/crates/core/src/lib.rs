//! Beam search with an over-accumulation attention penalty and
//! retrospective rollback, plus the tooling around it: a deterministic toy
//! transformer, attention trace files, synthetic scenarios, caption metrics
//! and region response maps.

pub mod metrics;
pub mod model;
pub mod penalty;
pub mod response;
pub mod scenario;
pub mod search;

pub use model::{StepModel, TokenId, TokenSequence};
pub use search::{decode, DecodeConfig, DecodeError, DecodeResult, Strategy};
