//! Language adaptation of a small GPT-style model.
//!
//! A byte-level BPE tokenizer, a pre-norm decoder with a tied LM head,
//! bottleneck and invertible adapters, three adaptation strategies, and an
//! NLI harness covering zero-shot prompting, cross-lingual transfer and
//! supervised finetuning. Everything runs on the CPU autodiff in `numcore`.

pub mod adapters;
pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod experiment;
mod fsutil;
pub mod model;
pub mod params;
pub mod synthetic;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use fsutil::{write_atomic, write_dir_atomic};
pub use numcore;
