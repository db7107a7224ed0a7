//! Retrieval evaluation: cosine ranking, graded nDCG, recall and comparison
//! reports.

mod cache;
mod metrics;
mod report;
mod retrieval;

pub use cache::{embed_cached, embed_texts, EmbeddingCache, CACHE_ENV};
pub use metrics::{cosine, ndcg_at_k, recall_at_k};
pub use report::{
    compare_models, metric_names, score_run, Coverage, EvalModel, EvalReport, ModelInfo, ReportRow, RunScores,
};
pub use retrieval::{retrieval_run, Ranked, RetrievalDataset, CORPUS_FILE, QRELS_FILE, QUERIES_FILE};
