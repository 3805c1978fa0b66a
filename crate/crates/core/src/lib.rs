//! LLaST-style speech-to-text translation at desk scale.
//!
//! The pipeline is `waveform → log-mel → encoder → adaptor → decoder-only LM`,
//! trained with a masked autoregressive loss, optionally through low-rank
//! adapters on frozen encoder and LM weights, and decoded with beam search.

pub mod adaptor;
pub mod audio;
pub mod autodiff;
pub mod bleu;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decode;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod lm;
pub mod lora;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use autodiff::{Graph, ParamId, ParamStore, Parameter, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/audio.md")]
    mod audio {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/lora.md")]
    mod lora {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/decoding.md")]
    mod decoding {}
    #[doc = include_str!("../../../book/src/checkpoints.md")]
    mod checkpoints {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
}
