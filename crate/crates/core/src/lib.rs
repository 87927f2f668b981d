//! Local-first episodic memory engine.
//!
//! Three asynchronous sensor streams (speech transcripts, heart rate and
//! skin conductance, gaze events) are aligned onto a one-second grid,
//! archived as JSONL episodic records, and retrieved with natural-language
//! queries through a filter-then-rank pipeline.

pub mod alignment;
pub mod archive;
pub mod domain;
pub mod ingestion;
pub mod retrieval;
