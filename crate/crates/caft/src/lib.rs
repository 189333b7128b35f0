//! Context-aware fine-tuning over segment streams: a self-contained training
//! stack (reverse-mode tape, transformer encoder, CTC + classification heads,
//! synthetic corpus, trainer/eval/bench) built for desk-scale experiments on
//! how neighboring-segment context changes sequence-model quality.

pub mod config;
pub mod corpus;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod train;
