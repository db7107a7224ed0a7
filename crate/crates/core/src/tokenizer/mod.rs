//! WordPiece vocabularies: training, merging, encoding and efficiency reports.

mod trainer;
mod vocab;
mod wordpiece;

pub use trainer::{train_wordpiece, train_wordpiece_with, TrainerConfig};
pub use vocab::{
    merge_vocabularies, Vocabulary, CLS, CONTINUATION_PREFIX, DEFAULT_SPECIALS, MASK, PAD, SEP, UNK,
};
pub use wordpiece::{
    filter_domain_terms, pre_tokenize, tokenizer_compare, EncodedSequence, TokenizerModel, TokenizerReport,
};
