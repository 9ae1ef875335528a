//! Knowledge tracing toolkit.
//!
//! The pipeline fits per-skill Bayesian Knowledge Tracing models, clusters
//! cumulative per-skill success rates into ability profiles, bins problems by
//! training-set success rate, and trains a recurrent predictor on the three
//! resulting features. Baseline models (BIRT, PFA, plain BKT, DKT) and a
//! student-level cross-validation harness are provided for comparison.

pub mod baselines;
pub mod bkt;
pub mod dataset;
pub mod difficulty;
pub mod error;
pub mod eval;
pub mod features;
pub mod predictor;
pub mod profile;
pub mod synth;

pub use error::{Error, Result};
