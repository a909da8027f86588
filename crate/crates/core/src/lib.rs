//! Ontology-aware evaluation and training utilities for audio tagging.
//!
//! The crate covers four layers:
//!
//! - [`ontology`]: parse the AudioSet ontology JSON, compute all-pairs graph
//!   distances, and bind an evaluation class list to graph nodes.
//! - [`descriptions`]: build per-class language descriptions (Direct, Prompt,
//!   Desc, Concat) and export per-class embedding tables.
//! - [`metrics`] and [`losses`]: average precision, mAP, ontology-aware mAP
//!   (OmAP) at each coarse-grained level, human consistency scores, and
//!   BCE / ontology-weighted BCE / semantic alignment losses with analytic
//!   gradients.
//! - [`align_toy`]: a deterministic, desk-scale audio/text alignment pipeline
//!   trained on synthetic hierarchical data.
//!
//! [`io`] holds the file formats used by the `otag` command-line tool.

pub mod align_toy;
pub mod descriptions;
pub mod error;
pub mod io;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod ontology;

pub use error::{OtagError, Result};
pub use matrix::Matrix;
