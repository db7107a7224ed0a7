use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cache::{embed_cached, embed_texts, EmbeddingCache};
use super::metrics::cosine;
use crate::error::{Error, Result};
use crate::io::read_jsonl;
use crate::model::Embedder;

pub const QUERIES_FILE: &str = "queries.jsonl";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const QRELS_FILE: &str = "qrels.jsonl";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TextRecord {
    id: String,
    text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QrelRecord {
    qid: String,
    did: String,
    rel: u32,
}

/// Queries, documents and graded relevance judgments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievalDataset {
    pub name: String,
    pub queries: BTreeMap<String, String>,
    pub corpus: BTreeMap<String, String>,
    pub qrels: BTreeMap<String, BTreeMap<String, u32>>,
}

fn by_id(records: Vec<TextRecord>, what: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for r in records {
        if out.insert(r.id.clone(), r.text).is_some() {
            return Err(Error::invalid(format!("duplicate {what} id `{}`", r.id)));
        }
    }
    Ok(out)
}

impl RetrievalDataset {
    /// Reads `queries.jsonl`, `corpus.jsonl` and `qrels.jsonl` from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let queries = by_id(read_jsonl(&dir.join(QUERIES_FILE))?, "query")?;
        let corpus = by_id(read_jsonl(&dir.join(CORPUS_FILE))?, "document")?;
        let mut qrels: BTreeMap<String, BTreeMap<String, u32>> = BTreeMap::new();
        for r in read_jsonl::<QrelRecord>(&dir.join(QRELS_FILE))? {
            qrels.entry(r.qid).or_default().insert(r.did, r.rel);
        }
        let ds = Self {
            name,
            queries,
            corpus,
            qrels,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for (qid, docs) in &self.qrels {
            if !self.queries.contains_key(qid) {
                return Err(Error::invalid(format!("{}: qrels name unknown query `{qid}`", self.name)));
            }
            if let Some(did) = docs.keys().find(|d| !self.corpus.contains_key(*d)) {
                return Err(Error::invalid(format!("{}: qrels name unknown document `{did}`", self.name)));
            }
        }
        Ok(())
    }
}

/// One retrieved document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub doc_id: String,
    pub score: f64,
}

/// Top `k` documents per query by cosine similarity; ties go to the smaller
/// document id. Corpus embeddings go through `cache` when one is given.
pub fn retrieval_run(
    embedder: &dyn Embedder,
    dataset: &RetrievalDataset,
    k: usize,
    cache: Option<&EmbeddingCache>,
) -> Result<BTreeMap<String, Vec<Ranked>>> {
    if dataset.corpus.is_empty() {
        return Err(Error::invalid(format!("{}: empty corpus", dataset.name)));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let doc_ids: Vec<&String> = dataset.corpus.keys().collect();
    let doc_texts: Vec<&str> = dataset.corpus.values().map(String::as_str).collect();
    let docs = embed_cached(embedder, &doc_texts, cache)?;
    let query_ids: Vec<&String> = dataset.queries.keys().collect();
    let query_texts: Vec<&str> = dataset.queries.values().map(String::as_str).collect();
    let queries = embed_texts(embedder, &query_texts)?;

    let ranked: Vec<Vec<Ranked>> = queries
        .par_iter()
        .map(|q| {
            let mut scored: Vec<(f64, usize)> = docs
                .iter()
                .enumerate()
                .map(|(i, d)| cosine(q, d).map(|s| (s, i)))
                .collect::<Result<_>>()?;
            // doc ids are already ascending, so index order breaks ties
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            Ok(scored
                .into_iter()
                .take(k)
                .map(|(score, i)| Ranked {
                    doc_id: doc_ids[i].clone(),
                    score,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(query_ids.into_iter().cloned().zip(ranked).collect())
}
