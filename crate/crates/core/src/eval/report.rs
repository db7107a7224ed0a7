use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::cache::EmbeddingCache;
use super::metrics::{ndcg_at_k, recall_at_k};
use super::retrieval::{retrieval_run, Ranked, RetrievalDataset};
use crate::error::{Error, Result};
use crate::model::{Embedder, TextEncoder};

/// A model under comparison.
pub struct EvalModel<'a> {
    pub name: String,
    pub embedder: &'a dyn Embedder,
    pub checkpoint_hash: Option<String>,
    pub tokenizer_hash: Option<String>,
}

impl<'a> EvalModel<'a> {
    pub fn from_encoder(name: impl Into<String>, encoder: &'a TextEncoder<'a>) -> Self {
        Self {
            name: name.into(),
            embedder: encoder,
            checkpoint_hash: Some(encoder.checkpoint_hash.clone()),
            tokenizer_hash: Some(encoder.tokenizer_hash.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub name: String,
    pub checkpoint_hash: Option<String>,
    pub tokenizer_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub model: String,
    pub metric: String,
    /// Percentage, 0 to 100.
    pub value: f64,
}

/// How many queries entered the means, and how many had no relevant document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub dataset: String,
    pub model: String,
    pub evaluated_queries: usize,
    pub skipped_queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub models: Vec<ModelInfo>,
    pub rows: Vec<ReportRow>,
    pub coverage: Vec<Coverage>,
}

/// Metric names reported for cutoff `k`, in display order.
pub fn metric_names(k: usize) -> Vec<String> {
    let mut names = vec![format!("ndcg@{k}"), "recall@1".to_string()];
    if k != 1 {
        names.push(format!("recall@{k}"));
    }
    names
}

/// Per-query metrics (fractions in [0, 1]) for queries that have at least
/// one relevant document, and the number of queries without one.
#[derive(Debug, Clone, PartialEq)]
pub struct RunScores {
    pub per_query: BTreeMap<String, Vec<f64>>,
    pub skipped: usize,
}

impl RunScores {
    /// Mean of each metric over the evaluated queries, as percentages.
    pub fn means(&self) -> Vec<f64> {
        let n = self.per_query.len();
        let Some(width) = self.per_query.values().next().map(Vec::len) else {
            return Vec::new();
        };
        (0..width)
            .map(|j| 100.0 * self.per_query.values().map(|v| v[j]).sum::<f64>() / n as f64)
            .collect()
    }
}

/// Scores a retrieval run in the order of [`metric_names`].
pub fn score_run(run: &BTreeMap<String, Vec<Ranked>>, dataset: &RetrievalDataset, k: usize) -> RunScores {
    let empty = BTreeMap::new();
    let mut per_query = BTreeMap::new();
    let mut skipped = 0;
    for qid in dataset.queries.keys() {
        let qrels = dataset.qrels.get(qid).unwrap_or(&empty);
        let ranked: Vec<String> = run.get(qid).map(|r| r.iter().map(|x| x.doc_id.clone()).collect()).unwrap_or_default();
        let Some(r1) = recall_at_k(&ranked, qrels, 1) else {
            skipped += 1;
            continue;
        };
        let mut scores = vec![ndcg_at_k(&ranked, qrels, k), r1];
        if k != 1 {
            scores.push(recall_at_k(&ranked, qrels, k).expect("relevant documents exist"));
        }
        per_query.insert(qid.clone(), scores);
    }
    RunScores { per_query, skipped }
}

/// Evaluates every model on every dataset. Rows are sorted by dataset, then
/// model, with metrics in [`metric_names`] order.
pub fn compare_models(
    models: &[EvalModel],
    datasets: &[RetrievalDataset],
    k: usize,
    cache: Option<&EmbeddingCache>,
) -> Result<EvalReport> {
    if models.is_empty() || datasets.is_empty() {
        return Err(Error::invalid("comparison needs at least one model and one dataset"));
    }
    let names = metric_names(k);
    let mut rows = Vec::new();
    let mut coverage = Vec::new();
    for ds in datasets {
        for m in models {
            let run = retrieval_run(m.embedder, ds, k, cache)?;
            let scores = score_run(&run, ds, k);
            if scores.per_query.is_empty() {
                log::warn!("{}: no query has a relevant document", ds.name);
            }
            for (metric, value) in names.iter().zip(scores.means()) {
                rows.push(ReportRow {
                    dataset: ds.name.clone(),
                    model: m.name.clone(),
                    metric: metric.clone(),
                    value,
                });
            }
            coverage.push(Coverage {
                dataset: ds.name.clone(),
                model: m.name.clone(),
                evaluated_queries: scores.per_query.len(),
                skipped_queries: scores.skipped,
            });
        }
    }
    rows.sort_by(|a, b| (&a.dataset, &a.model).cmp(&(&b.dataset, &b.model)));
    coverage.sort_by(|a, b| (&a.dataset, &a.model).cmp(&(&b.dataset, &b.model)));
    Ok(EvalReport {
        k,
        models: models
            .iter()
            .map(|m| ModelInfo {
                name: m.name.clone(),
                checkpoint_hash: m.checkpoint_hash.clone(),
                tokenizer_hash: m.tokenizer_hash.clone(),
            })
            .collect(),
        rows,
        coverage,
    })
}

impl EvalReport {
    pub fn value(&self, dataset: &str, model: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.dataset == dataset && r.model == model && r.metric == metric)
            .map(|r| r.value)
    }

    /// Aligned text table: one line per (dataset, metric), one column per
    /// model, the best value in each line marked with `*`.
    pub fn render_table(&self) -> String {
        let models: Vec<&str> = self.models.iter().map(|m| m.name.as_str()).collect();
        let mut keys: Vec<(&str, &str)> = Vec::new();
        for r in &self.rows {
            if !keys.contains(&(&r.dataset, &r.metric)) {
                keys.push((&r.dataset, &r.metric));
            }
        }
        let mut lines: Vec<Vec<String>> = vec![["dataset", "metric"]
            .into_iter()
            .map(String::from)
            .chain(models.iter().map(|m| m.to_string()))
            .collect()];
        for (ds, metric) in keys {
            let vals: Vec<Option<f64>> = models.iter().map(|m| self.value(ds, m, metric)).collect();
            let best = vals.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut line = vec![ds.to_string(), metric.to_string()];
            for v in vals {
                line.push(match v {
                    Some(v) if models.len() > 1 && v == best => format!("{v:.2}*"),
                    Some(v) => format!("{v:.2} "),
                    None => "- ".to_string(),
                });
            }
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for line in &lines {
            let mut text = String::new();
            for (c, cell) in line.iter().enumerate() {
                if c > 0 {
                    text.push_str("  ");
                }
                if c < 2 {
                    let _ = write!(text, "{cell:<w$}", w = widths[c]);
                } else {
                    let _ = write!(text, "{cell:>w$}", w = widths[c]);
                }
            }
            out.push_str(text.trim_end());
            out.push('\n');
        }
        out
    }
}
