//! End-to-end orchestration: per-identity generation and filtering,
//! assembly, statistics.

mod config;
mod ledger;
mod orchestrator;
mod refilter;

pub use config::*;
pub use ledger::*;
pub use orchestrator::*;
pub use refilter::*;
