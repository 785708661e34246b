//! Conditioned dialogue generation at desk scale.
//!
//! A single transformer stack acts as both encoder and decoder: one packed
//! token sequence per sample, with additive self-attention masks deciding
//! which positions may see which. Condition labels steer generation through
//! condition-aware blocks (attention routing over a per-condition key/value
//! pair against a generic zero-value route, plus two parametric-gate ablation
//! variants). Training is a masked-LM objective over mixed batches of
//! 3/4 dialogue and 1/4 conditioned text, with TF-IDF-weighted masking on the
//! text side; decoding appends a mask placeholder and beam-searches
//! left-to-right with duplicate-bigram blocking. The evaluation module
//! implements corpus BLEU-1/2/3, ROUGE-L, CIDEr, Distinct-1/2, avgLen and
//! paired two-sided t-tests.
//!
//! Numeric code is generic over the scalar (`f32`/`f64`, num-traits); the
//! model stack uses the `f64` aliases below.

pub mod data;
pub mod decode;
pub mod error;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Default scalar for the model stack.
pub type Scalar = f64;
/// Tensor at the default scalar.
pub type Tensor = tensor::Tensor<Scalar>;
/// Computation tape at the default scalar.
pub type Tape = tensor::Tape<Scalar>;
