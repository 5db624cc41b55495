//! Concept activation vector probes for frozen embedding spaces.
//!
//! The crate trains linear concept probes (CAVs) on labelled embeddings,
//! scores genre-level concept sensitivity with a replicated significance
//! protocol, and re-ranks items with interpolated concept directions.

pub mod data;
pub mod debias;
pub mod error;
pub mod probe;
pub mod report;
pub mod sampler;
pub mod selftest;
pub mod seed;
pub mod stats;
pub mod synth;
pub mod tcav;

pub use data::{Attribute, Dataset, EmbeddingFormat, EmbeddingRecord};
pub use debias::{adjust, rank, sweep, DebiasCurve, MixMode};
pub use error::{Error, Result};
pub use probe::{fit, Cav, LinearDecision, TrainerConfig};
pub use sampler::{build_split, ConceptSpec, ConceptSplit};
pub use tcav::{run_audit, run_protocol, tcav_score, ProtocolConfig, TcavResult};
