//! Tokenizer, corpus handling and batch construction.

pub mod batch;
pub mod bpe;
pub mod corpus;

pub use batch::{make_clm_batch, make_mlm_batch, Batch, MaskConfig};
pub use bpe::{train_bpe, Tokenizer, Vocab, BOS, MASK, N_SPECIAL, PAD, UNK};
pub use corpus::{load_documents, pack, Document, TokenCorpus, WindowSampler};
