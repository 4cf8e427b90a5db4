//! File formats, the experiment pipeline and report aggregation around
//! `tta-core`.

pub mod cache;
pub mod checkpoint;
pub mod config;
pub mod io;
pub mod pipeline;
pub mod report;
pub mod sweep;
