use std::collections::HashSet;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::io::sha256_hex;

/// Raw corpus record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDocument {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub source: String,
}

static COMMENT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?s)<!--.*?-->").unwrap());
static SCRIPT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?is)<(script|style)\b[^>]*>.*?</(script|style)\s*>").unwrap());
static BLOCK_TAG: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)</?(p|div|br|li|ul|ol|h[1-6]|tr|table|section|article|blockquote|pre|hr)\b[^<>]*>").unwrap()
});
static TAG: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"</?[A-Za-z][A-Za-z0-9-]*(\s[^<>]*)?/?>").unwrap());
static URL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(https?://|ftp://|www\.)\S+").unwrap());
static PARA_BREAK: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\n[ \t\r\f\v]*\n").unwrap());

fn clean_once(text: &str) -> String {
    let text = text.replace("\r\n", "\n");
    let text = COMMENT.replace_all(&text, " ");
    let text = SCRIPT.replace_all(&text, " ");
    let text = BLOCK_TAG.replace_all(&text, "\n\n");
    let text = TAG.replace_all(&text, "");
    let text = URL.replace_all(&text, " ");
    let mut paragraphs: Vec<String> = Vec::new();
    for p in PARA_BREAK.split(&text) {
        let p = p.split_whitespace().collect::<Vec<_>>().join(" ");
        if !p.is_empty() && paragraphs.last() != Some(&p) {
            paragraphs.push(p);
        }
    }
    paragraphs.join("\n\n")
}

/// Strips markup (keeping the text inside tags), removes links, normalizes
/// whitespace and collapses consecutive repeated paragraphs. Paragraphs in
/// the result are separated by one blank line.
pub fn clean_document(text: &str) -> String {
    // Removing one tag can splice a new one together ("<<b>i>"), so run to a
    // fixed point.
    let mut cur = clean_once(text);
    for _ in 0..64 {
        let next = clean_once(&cur);
        if next == cur {
            break;
        }
        cur = next;
    }
    cur
}

fn normalized_hash(text: &str) -> String {
    sha256_hex(text.split_whitespace().collect::<Vec<_>>().join(" ").as_bytes())
}

/// Drops documents whose whitespace-normalized text was already seen,
/// keeping the first occurrence.
pub fn dedup_corpus(docs: Vec<CorpusDocument>) -> Vec<CorpusDocument> {
    let mut seen = HashSet::new();
    docs.into_iter().filter(|d| seen.insert(normalized_hash(&d.text))).collect()
}
