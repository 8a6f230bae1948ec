//! Reference-free review quality metrics: conciseness, comprehensiveness and
//! relevance of a code review measured against pseudo-references generated
//! for the code change, plus the baselines and statistics used to validate
//! them.

pub mod baselines;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod evalstats;
pub mod llm;
pub mod metric;
pub mod pseudoref;
pub mod textproc;

pub use error::{Error, ErrorClass, Result};
