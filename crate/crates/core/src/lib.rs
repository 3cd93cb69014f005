//! Spectrogram-domain speech continuation.
//!
//! A speech encoder turns the prompt's log-mel frames into a prefix for a
//! causal decoder. The decoder transcribes the prompt, continues the text and
//! then regresses the continuation's mel frames through a pre-net/post-net
//! pair. Everything from the tensor library to the CLI-facing pipeline lives
//! in this crate.

pub mod audio;
pub mod config;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numeric;
pub mod par;
pub mod pipeline;
pub mod selfcheck;
pub mod tokenizer;

pub use error::{Error, Result};
