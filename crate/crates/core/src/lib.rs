//! Two-stage draft-and-refine neural machine translation.
//!
//! Stage one is an attention-based GRU encoder-decoder that produces a
//! draft translation. Stage two is a double-attention model that reads
//! both the source sentence and the draft and re-translates.

pub mod attention;
pub mod autodiff;
pub mod bleu;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod decoding;
pub mod encoder;
pub mod error;
pub mod models;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod training;
pub mod vocab;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::{Precision, Real, Tensor};
