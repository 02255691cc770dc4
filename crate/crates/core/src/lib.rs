//! Joint answer selection and sequential evidence extraction for
//! explainable multi-hop QA, built on a minimal f64 autodiff engine.
//!
//! The extractor walks sentences one at a time with an RNN state over what
//! it has already picked, attends over the query with a coverage-regularized
//! glimpse, and stops by selecting a trainable end-of-extraction candidate.
//! Inference is beam search over extraction sequences scored by average
//! negative log-likelihood. A sigmoid-per-sentence baseline, official-style
//! metrics, and a synthetic multi-hop generator make the behaviour testable
//! at desk scale.

pub mod answer;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod par;
pub mod params;
pub mod qfe;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{QfeError, Result};
