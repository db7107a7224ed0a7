use std::collections::{HashMap, HashSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_to_string, write_atomic};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const DEFAULT_SPECIALS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];
pub const CONTINUATION_PREFIX: &str = "##";

/// Ordered token inventory; a token's id is its position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    continuation_prefix: String,
    special_tokens: Vec<String>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, continuation_prefix: &str, special_tokens: &[&str]) -> Result<Self> {
        if continuation_prefix.is_empty() {
            return Err(Error::invalid("continuation prefix must not be empty"));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(['\n', '\r']) {
                return Err(Error::invalid(format!("invalid token at id {i}: {t:?}")));
            }
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::invalid(format!("duplicate token {t:?}")));
            }
        }
        for s in special_tokens {
            if !ids.contains_key(*s) {
                return Err(Error::invalid(format!("special token {s} missing from vocabulary")));
            }
        }
        Ok(Self {
            tokens,
            ids,
            continuation_prefix: continuation_prefix.to_string(),
            special_tokens: special_tokens.iter().map(|s| s.to_string()).collect(),
        })
    }

    /// Vocabulary with the `##` prefix and the five standard special tokens.
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Result<Self> {
        Self::new(tokens.into_iter().map(Into::into).collect(), CONTINUATION_PREFIX, &DEFAULT_SPECIALS)
    }

    /// One token per line, line number = id.
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string)).map_err(|e| match e {
            Error::InvalidInput(msg) => Error::invalid(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_file_string().as_bytes())
    }

    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn continuation_prefix(&self) -> &str {
        &self.continuation_prefix
    }

    pub fn is_continuation(&self, token: &str) -> bool {
        token.starts_with(&self.continuation_prefix) && token.len() > self.continuation_prefix.len()
    }

    pub fn special_tokens(&self) -> &[String] {
        &self.special_tokens
    }

    pub fn is_special(&self, id: u32) -> bool {
        self.token(id).is_some_and(|t| self.special_tokens.iter().any(|s| s == t))
    }

    /// Id of a special token that is guaranteed present by construction.
    pub fn special_id(&self, token: &str) -> Result<u32> {
        self.id(token)
            .filter(|_| self.special_tokens.iter().any(|s| s == token))
            .ok_or_else(|| Error::invalid(format!("{token} is not a special token of this vocabulary")))
    }

    pub fn non_special_tokens(&self) -> impl Iterator<Item = &str> {
        let specials: HashSet<&str> = self.special_tokens.iter().map(String::as_str).collect();
        self.tokens.iter().map(String::as_str).filter(move |t| !specials.contains(t))
    }
}

/// Base tokens followed by the domain tokens that base lacks, in domain order.
/// Base ids are preserved.
pub fn merge_vocabularies(base: &Vocabulary, domain: &Vocabulary) -> Result<Vocabulary> {
    if base.continuation_prefix != domain.continuation_prefix {
        return Err(Error::invalid(format!(
            "continuation prefixes differ: {:?} vs {:?}",
            base.continuation_prefix, domain.continuation_prefix
        )));
    }
    let a: HashSet<&String> = base.special_tokens.iter().collect();
    let b: HashSet<&String> = domain.special_tokens.iter().collect();
    if a != b {
        return Err(Error::invalid(format!(
            "special token sets differ: {:?} vs {:?}",
            base.special_tokens, domain.special_tokens
        )));
    }
    let mut tokens = base.tokens.clone();
    tokens.extend(domain.tokens.iter().filter(|t| !base.contains(t)).cloned());
    let specials: Vec<&str> = base.special_tokens.iter().map(String::as_str).collect();
    Vocabulary::new(tokens, &base.continuation_prefix, &specials)
}
