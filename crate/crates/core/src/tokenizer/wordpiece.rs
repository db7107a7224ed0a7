use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::vocab::{Vocabulary, CLS, SEP, UNK};
use crate::error::{Error, Result};

/// Splits on whitespace, then peels every punctuation character off as its own word.
pub fn pre_tokenize(text: &str, lowercase: bool) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in text.split_whitespace() {
        let chunk = if lowercase { chunk.to_lowercase() } else { chunk.to_string() };
        let mut current = String::new();
        for c in chunk.chars() {
            if is_punctuation(c) {
                if !current.is_empty() {
                    words.push(std::mem::take(&mut current));
                }
                words.push(c.to_string());
            } else {
                current.push(c);
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
    }
    words
}

fn is_punctuation(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Token ids plus the grouping needed for whole-word masking.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EncodedSequence {
    pub ids: Vec<u32>,
    /// Half-open `[start, end)` spans over `ids`, one per source word.
    pub word_groups: Vec<(usize, usize)>,
    pub attention_mask: Vec<u8>,
    pub special_positions: BTreeSet<usize>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn non_special_len(&self) -> usize {
        self.ids.len() - self.special_positions.len()
    }

    /// Rebuilds word groups from raw ids: a word starts at every non-continuation
    /// token; special tokens belong to no word.
    pub fn from_ids(vocab: &Vocabulary, ids: &[u32]) -> Result<Self> {
        let mut seq = EncodedSequence {
            ids: ids.to_vec(),
            attention_mask: vec![1; ids.len()],
            ..Default::default()
        };
        let mut open: Option<usize> = None;
        for (i, &id) in ids.iter().enumerate() {
            let token = vocab.token(id).ok_or(Error::UnknownTokenId(id))?;
            if vocab.is_special(id) {
                if let Some(s) = open.take() {
                    seq.word_groups.push((s, i));
                }
                seq.special_positions.insert(i);
            } else if vocab.is_continuation(token) && open.is_some() {
                continue;
            } else {
                if let Some(s) = open.replace(i) {
                    seq.word_groups.push((s, i));
                }
            }
        }
        if let Some(s) = open {
            seq.word_groups.push((s, ids.len()));
        }
        Ok(seq)
    }

    /// Wraps the sequence as `[CLS] ... [SEP]`.
    pub fn with_specials(&self, cls: u32, sep: u32) -> Self {
        let mut ids = Vec::with_capacity(self.ids.len() + 2);
        ids.push(cls);
        ids.extend_from_slice(&self.ids);
        ids.push(sep);
        let mut special_positions: BTreeSet<usize> = self.special_positions.iter().map(|p| p + 1).collect();
        special_positions.insert(0);
        special_positions.insert(ids.len() - 1);
        EncodedSequence {
            attention_mask: vec![1; ids.len()],
            word_groups: self.word_groups.iter().map(|&(s, e)| (s + 1, e + 1)).collect(),
            ids,
            special_positions,
        }
    }

    /// Keeps the first `max_len` positions, dropping words that would be cut.
    pub fn truncate(&mut self, max_len: usize) {
        if self.ids.len() <= max_len {
            return;
        }
        self.ids.truncate(max_len);
        self.attention_mask.truncate(max_len);
        self.word_groups.retain(|&(_, e)| e <= max_len);
        self.special_positions.retain(|&p| p < max_len);
        // Orphaned continuation pieces of a cut word: drop them too.
        let covered_end = self
            .word_groups
            .last()
            .map(|&(_, e)| e)
            .unwrap_or(0)
            .max(self.special_positions.iter().next_back().map_or(0, |p| p + 1));
        self.ids.truncate(covered_end);
        self.attention_mask.truncate(covered_end);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerModel {
    pub vocab: Vocabulary,
    pub max_chars_per_word: usize,
    pub unk_token: String,
    pub lowercase: bool,
}

impl TokenizerModel {
    pub fn new(vocab: Vocabulary) -> Result<Self> {
        if !vocab.contains(UNK) {
            return Err(Error::invalid("vocabulary lacks the [UNK] token"));
        }
        Ok(Self {
            vocab,
            max_chars_per_word: 100,
            unk_token: UNK.to_string(),
            lowercase: true,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::new(Vocabulary::load(path)?)
    }

    pub fn unk_id(&self) -> u32 {
        self.vocab.id(&self.unk_token).expect("checked at construction")
    }

    pub fn cls_id(&self) -> Result<u32> {
        self.vocab.special_id(CLS)
    }

    pub fn sep_id(&self) -> Result<u32> {
        self.vocab.special_id(SEP)
    }

    /// Greedy longest-match-first segmentation of one word. `None` when the word
    /// is too long or some remainder matches nothing.
    pub fn segment_word(&self, word: &str) -> Option<Vec<u32>> {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > self.max_chars_per_word {
            return None;
        }
        let prefix = self.vocab.continuation_prefix();
        let mut out = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                let piece: String = chars[start..end].iter().collect();
                let candidate = if start > 0 { format!("{prefix}{piece}") } else { piece };
                if let Some(id) = self.vocab.id(&candidate) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            out.push(found?);
            start = end;
        }
        Some(out)
    }

    pub fn encode(&self, text: &str) -> EncodedSequence {
        let mut seq = EncodedSequence::default();
        for word in pre_tokenize(text, self.lowercase) {
            let start = seq.ids.len();
            match self.segment_word(&word) {
                Some(ids) => seq.ids.extend(ids),
                None => seq.ids.push(self.unk_id()),
            }
            seq.word_groups.push((start, seq.ids.len()));
        }
        seq.attention_mask = vec![1; seq.ids.len()];
        seq
    }

    pub fn tokens(&self, text: &str) -> Vec<String> {
        self.encode(text)
            .ids
            .iter()
            .map(|&id| self.vocab.token(id).unwrap_or_default().to_string())
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let prefix = self.vocab.continuation_prefix();
        let mut out = String::new();
        for &id in ids {
            let token = self.vocab.token(id).ok_or(Error::UnknownTokenId(id))?;
            if self.vocab.is_special(id) {
                continue;
            }
            if self.vocab.is_continuation(token) && !out.is_empty() {
                out.push_str(&token[prefix.len()..]);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(token);
            }
        }
        Ok(out)
    }

    /// Non-special tokens emitted for `text`.
    pub fn count_tokens(&self, text: &str) -> usize {
        let seq = self.encode(text);
        seq.ids.iter().filter(|&&id| !self.vocab.is_special(id) || id == self.unk_id()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerReport {
    pub corpus_id: String,
    pub words: usize,
    pub tokens_base: usize,
    pub tokens_merged: usize,
    pub reduction_pct: f64,
    pub fertility_base: f64,
    pub fertility_merged: f64,
}

/// Counts sub-tokens of `base` and `merged` over the same corpus.
pub fn tokenizer_compare(
    base: &TokenizerModel,
    merged: &TokenizerModel,
    corpus: &[String],
    corpus_id: &str,
) -> Result<TokenizerReport> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot compare tokenizers on an empty corpus"));
    }
    let (mut words, mut tokens_base, mut tokens_merged) = (0, 0, 0);
    for doc in corpus {
        words += pre_tokenize(doc, base.lowercase).len();
        tokens_base += base.count_tokens(doc);
        tokens_merged += merged.count_tokens(doc);
    }
    let reduction_pct = if tokens_base == 0 {
        0.0
    } else {
        100.0 * (tokens_base as f64 - tokens_merged as f64) / tokens_base as f64
    };
    let per_word = |n: usize| if words == 0 { 0.0 } else { n as f64 / words as f64 };
    Ok(TokenizerReport {
        corpus_id: corpus_id.to_string(),
        words,
        tokens_base,
        tokens_merged,
        reduction_pct,
        fertility_base: per_word(tokens_base),
        fertility_merged: per_word(tokens_merged),
    })
}

/// Keeps candidate terms the base tokenizer fragments into two or more pieces.
pub fn filter_domain_terms<'a>(base: &TokenizerModel, candidates: impl IntoIterator<Item = &'a str>) -> Vec<&'a str> {
    candidates
        .into_iter()
        .filter(|term| base.count_tokens(term) >= 2)
        .collect()
}
