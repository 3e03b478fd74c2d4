//! Command-line harness: simulation batches, table reports, ground-truth
//! checks and live advisory sessions.

pub mod advise;
pub mod config;
pub mod report;
pub mod simulate;
pub mod truth;
