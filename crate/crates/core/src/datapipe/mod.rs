//! Corpus preparation: cleaning, de-duplication, chunk packing, pair
//! filtering and hard-negative mining.

mod clean;
mod pack;
mod pairs;

pub use clean::{clean_document, dedup_corpus, CorpusDocument};
pub use pack::{pack_chunks, pack_ids, DEFAULT_CHUNK_LEN, DEFAULT_MIN_TAIL};
pub use pairs::{
    drop_count, filter_pairs_by_similarity, mine_hard_negatives, sample_indices, FilterMode, HardNegativeRecord,
    MineOptions, MinedRecord, SentencePair,
};
