//! Attention-based character-level speech recognizer.
//!
//! A pooled bidirectional-GRU encoder feeds an attention-equipped recurrent
//! generator that emits characters one at a time. Training uses AdaDelta
//! with gradient clipping and a max-norm constraint; decoding is a beam
//! search that can fuse a word n-gram language model compiled down to a
//! character-level weighted finite-state transducer.

pub mod attention;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod fst;
pub mod nn;
pub mod optim;
pub mod search;

pub use error::{Error, Result};
