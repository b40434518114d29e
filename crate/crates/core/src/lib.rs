//! Training-free audio question answering over an evolving textual evidence
//! chain.
//!
//! The audio is captioned once into an [`evidence::EvidenceDocument`], then a
//! plan / interact / augment loop ([`orchestrator`]) keeps adding tool-derived
//! evidence until the planning agent judges it sufficient or the iteration
//! budget runs out. The [`eval`] module scores the pipeline on
//! multiple-choice audio benchmarks.

pub mod agents;
pub mod backend;
pub mod eval;
pub mod evidence;
pub mod orchestrator;
pub mod prompts;
