//! Word-level tokenizer, vocabulary, and embedding lookup.

use crate::error::{Error, Result};
use crate::nn::RealMatrix;
use std::collections::HashMap;
use std::fmt::Write as _;

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Lowercase, split on whitespace, and split out punctuation as
/// single-character tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    /// Corpus frequency per id (0 for the specials).
    freqs: Vec<u64>,
}

impl Vocabulary {
    /// Build from a corpus: most frequent tokens first, ties broken
    /// lexicographically, capped at `max_size` entries including the
    /// [PAD]/[UNK] specials.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Vocabulary {
        assert!(max_size >= 2, "vocabulary must hold at least the specials");
        let mut counts: HashMap<String, u64> = HashMap::new();
        for text in corpus {
            for tok in tokenize(text.as_ref()) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - 2);

        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut freqs = vec![0u64, 0u64];
        for (tok, n) in ranked {
            tokens.push(tok);
            freqs.push(n);
        }
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, ids, freqs }
    }

    /// Rebuild from an id-ordered token list (checkpoint loading).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocabulary> {
        if tokens.len() < 2 || tokens[PAD_ID] != PAD_TOKEN || tokens[UNK_ID] != UNK_TOKEN {
            return Err(Error::Config(
                "vocabulary must start with [PAD], [UNK]".into(),
            ));
        }
        let ids: HashMap<String, usize> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        if ids.len() != tokens.len() {
            return Err(Error::Config("duplicate token in vocabulary".into()));
        }
        let freqs = vec![0; tokens.len()];
        Ok(Vocabulary { tokens, ids, freqs })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn frequency(&self, id: usize) -> u64 {
        self.freqs[id]
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Serialize as "token<TAB>id" lines sorted by token.
    pub fn to_tsv(&self) -> String {
        let mut rows: Vec<(&String, usize)> =
            self.tokens.iter().enumerate().map(|(i, t)| (t, i)).collect();
        rows.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::new();
        for (tok, id) in rows {
            let _ = writeln!(out, "{tok}\t{id}");
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Vocabulary> {
        let mut pairs: Vec<(String, usize)> = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line.split_once('\t').ok_or_else(|| {
                Error::Config(format!("vocab line {} missing tab separator", ln + 1))
            })?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::Config(format!("vocab line {}: bad id '{id}'", ln + 1)))?;
            pairs.push((tok.to_string(), id));
        }
        pairs.sort_by_key(|(_, id)| *id);
        for (expect, (_, id)) in pairs.iter().enumerate() {
            if *id != expect {
                return Err(Error::Config(format!(
                    "vocab ids are not dense: expected {expect}, found {id}"
                )));
            }
        }
        Vocabulary::from_tokens(pairs.into_iter().map(|(t, _)| t).collect())
    }
}

/// Token ids paired with their embedding rows.
#[derive(Debug, Clone)]
pub struct EmbeddingSequence {
    pub ids: Vec<usize>,
    pub z: RealMatrix,
}

impl EmbeddingSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Look up each token's embedding row from the shared table.
/// Empty text yields a zero-length sequence.
pub fn tokenize_embed(text: &str, vocab: &Vocabulary, table: &RealMatrix) -> EmbeddingSequence {
    assert_eq!(table.rows(), vocab.len(), "embedding table size mismatch");
    let ids = vocab.encode(text);
    let mut z = RealMatrix::zeros(ids.len(), table.cols());
    for (r, &id) in ids.iter().enumerate() {
        z.row_mut(r).copy_from_slice(table.row(id));
    }
    EmbeddingSequence { ids, z }
}
