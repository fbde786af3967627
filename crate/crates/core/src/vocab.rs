//! Frequency-capped token table shared by TYPE and VALUE tokens.
//!
//! Every non-reserved entry is stored under a namespaced key: `T:` for node
//! types and `V:` for values and source tokens, so a type and a value with the
//! same spelling never collide.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seqgen::Namespace;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const RESERVED: usize = 2;
pub const DEFAULT_MAX_SIZE: usize = 100_000;

const TYPE_PREFIX: &str = "T:";
const VALUE_PREFIX: &str = "V:";

/// Namespaced vocabulary key for a token.
pub fn token_key(namespace: Namespace, text: &str) -> String {
    match namespace {
        Namespace::Type => format!("{TYPE_PREFIX}{text}"),
        Namespace::Value => format!("{VALUE_PREFIX}{text}"),
    }
}

/// Inverse of [`token_key`]; `None` for reserved tokens.
pub fn split_key(key: &str) -> Option<(Namespace, &str)> {
    if let Some(t) = key.strip_prefix(TYPE_PREFIX) {
        Some((Namespace::Type, t))
    } else {
        key.strip_prefix(VALUE_PREFIX).map(|v| (Namespace::Value, v))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, u32>,
    max_size: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    format: String,
    max_size: usize,
    tokens: Vec<String>,
    counts: Vec<u64>,
}

const FORMAT: &str = "codepred-vocab/1";

impl Vocab {
    /// Keeps the `max_size - 2` most frequent keys, ties broken by ascending key.
    pub fn build<I, S>(keys: I, max_size: usize) -> Result<Vocab>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if max_size < RESERVED {
            return Err(Error::invalid(format!(
                "vocabulary size {max_size} cannot hold the reserved tokens"
            )));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for k in keys {
            let k = k.as_ref();
            if k == PAD_TOKEN || k == UNK_TOKEN {
                continue;
            }
            *counts.entry(k.to_owned()).or_insert(0) += 1;
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - RESERVED);
        let mut tokens = vec![PAD_TOKEN.to_owned(), UNK_TOKEN.to_owned()];
        let mut cnts = vec![0, 0];
        for (t, c) in ranked {
            tokens.push(t);
            cnts.push(c);
        }
        Ok(Vocab::from_parts(tokens, cnts, max_size))
    }

    fn from_parts(tokens: Vec<String>, counts: Vec<u64>, max_size: usize) -> Vocab {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab {
            tokens,
            counts,
            index,
            max_size,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn max_size(&self) -> usize {
        self.max_size
    }

    pub fn encode(&self, key: &str) -> u32 {
        self.index.get(key).copied().unwrap_or(UNK_ID)
    }

    pub fn encode_token(&self, namespace: Namespace, text: &str) -> u32 {
        self.encode(&token_key(namespace, text))
    }

    pub fn decode(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "token id {id} is outside a vocabulary of {}",
                    self.tokens.len()
                ))
            })
    }

    pub fn count(&self, id: u32) -> u64 {
        self.counts.get(id as usize).copied().unwrap_or(0)
    }

    pub fn namespace_of(&self, id: u32) -> Option<Namespace> {
        self.tokens
            .get(id as usize)
            .and_then(|k| split_key(k))
            .map(|(ns, _)| ns)
    }

    /// Fraction of the given keys that are in-vocabulary.
    pub fn coverage<I, S>(&self, keys: I) -> f64
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let (mut hit, mut total) = (0u64, 0u64);
        for k in keys {
            total += 1;
            if self.index.contains_key(k.as_ref()) {
                hit += 1;
            }
        }
        if total == 0 {
            return 1.0;
        }
        hit as f64 / total as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&VocabFile {
            format: FORMAT.to_owned(),
            max_size: self.max_size,
            tokens: self.tokens.clone(),
            counts: self.counts.clone(),
        })
        .expect("vocab serializes")
    }

    pub fn from_json(text: &str) -> Result<Vocab> {
        let f: VocabFile = serde_json::from_str(text).map_err(|e| Error::from_json(e, text))?;
        if f.format != FORMAT {
            return Err(Error::invalid(format!("unsupported vocab format {}", f.format)));
        }
        if f.tokens.len() != f.counts.len()
            || f.tokens.len() < RESERVED
            || f.tokens[PAD_ID as usize] != PAD_TOKEN
            || f.tokens[UNK_ID as usize] != UNK_TOKEN
        {
            return Err(Error::invalid("vocab file is inconsistent"));
        }
        let v = Vocab::from_parts(f.tokens, f.counts, f.max_size);
        if v.index.len() != v.tokens.len() {
            return Err(Error::invalid("vocab file contains duplicate tokens"));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        Vocab::from_json(&std::fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the serialized table.
    pub fn hash(&self) -> String {
        hex_digest(self.to_json().as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
