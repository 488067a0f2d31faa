//! Decoding and error correction for frame-level word posteriors.
//!
//! The crate is organized around a small pipeline:
//!
//! * [`lexicon`] — vocabularies, pronunciation lexica, and text corpora.
//! * [`ctc`] — collapse/decode/align/score operations on posterior grids.
//! * [`lm`] — count-based masked language models (optionally conditioned on
//!   a phone hypothesis), n-gram models, and training-data generators.
//! * [`correct`] — confidence-based masking and parallel mask filling.
//! * [`fusion`] — n-best rescoring and a distillation loss on aligned frames.
//! * [`sim`] — a synthetic posterior simulator, WER scoring, and RTF
//!   benchmarking used to exercise everything end to end.

pub mod correct;
pub mod ctc;
pub mod fusion;
pub mod lexicon;
pub mod lm;
pub mod rng;
pub mod sim;

/// Dense id into a [`lexicon::Vocab`] (words first, reserved symbols last).
pub type TokenId = u32;

/// Dense id into a [`lexicon::Lexicon`] phone inventory.
pub type PhoneId = u32;
