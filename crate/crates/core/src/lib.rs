//! Constrained decoding that nudges a language model toward copying word
//! pairs from its source document.
//!
//! At every decode step after the first, the tokens that follow the previous
//! token somewhere in the source (within one sentence) get a fixed bonus
//! added to their logits, unless the model's own top choice is a line break.
//! The crate covers tokenization ([`text`]), the bigram cache ([`cache`]),
//! the logit transform ([`transform`]), scoring backends ([`model`]), beam
//! search ([`decode`]), metrics and significance tests ([`eval`]), grid
//! search ([`tuner`]) and the dataset-level glue used by the CLI
//! ([`pipeline`]).

pub mod cache;
pub mod decode;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod text;
pub mod transform;
pub mod tuner;
