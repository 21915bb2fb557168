//! Word-level vocabulary and fixed-length encoding.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;
pub const LINK: u32 = 5;
pub const NUM_SPECIAL: u32 = 6;
pub const SPECIAL_TOKENS: [&str; 6] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]", "<link>"];
pub const DEFAULT_MAX_LEN: usize = 64;

/// Token-id bijection. Specials occupy ids 0..6; the rest follow in
/// frequency order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds from non-special tokens in id order.
    pub fn from_tokens(words: Vec<String>) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return invalid(format!(
                    "vocabulary token {i} is empty or contains whitespace"
                ));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return invalid(format!("duplicate vocabulary token `{t}`"));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Whitespace tokens after lowercasing; frequency ≥ `min_freq`, most
    /// frequent first, ties in lexicographic order, at most `max_size`
    /// non-special entries.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_freq: usize, max_size: usize) -> Result<Self> {
        if min_freq == 0 {
            return invalid("min_freq must be at least 1");
        }
        let mut freq: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for w in text.as_ref().to_lowercase().split_whitespace() {
                if !SPECIAL_TOKENS.contains(&w) {
                    *freq.entry(w.to_string()).or_default() += 1;
                }
            }
        }
        let mut entries: Vec<(String, usize)> =
            freq.into_iter().filter(|&(_, n)| n >= min_freq).collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        entries.truncate(max_size);
        Self::from_tokens(entries.into_iter().map(|(w, _)| w).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Non-special tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[NUM_SPECIAL as usize..]
    }

    /// One non-special token per line; line `n` holds id `n + 6`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
        for w in self.words() {
            writeln!(f, "{w}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_tokens(text.lines().map(String::from).collect())
    }

    /// Row `[CLS] tokens… [SEP] [PAD]…` of exactly `max_len` ids.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<Vec<u32>> {
        if max_len < 3 {
            return invalid(format!("max_len must be at least 3, got {max_len}"));
        }
        let mut row = Vec::with_capacity(max_len);
        row.push(CLS);
        row.extend(
            text.to_lowercase()
                .split_whitespace()
                .take(max_len - 2)
                .map(|w| self.id(w)),
        );
        row.push(SEP);
        row.resize(max_len, PAD);
        Ok(row)
    }

    pub fn encode_batch<S: AsRef<str>>(&self, texts: &[S], max_len: usize) -> Result<TokenBatch> {
        let mut ids = Vec::with_capacity(texts.len() * max_len);
        for t in texts {
            ids.extend(self.encode(t.as_ref(), max_len)?);
        }
        TokenBatch::new(ids, texts.len(), max_len)
    }

    /// Drops `[PAD]`, `[CLS]` and `[SEP]`; every other id is written as its token.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut words = Vec::new();
        for &id in ids {
            let tok = self.token(id).ok_or_else(|| {
                Error::Invalid(format!(
                    "token id {id} outside vocabulary of {}",
                    self.len()
                ))
            })?;
            if !matches!(id, PAD | CLS | SEP) {
                words.push(tok);
            }
        }
        Ok(words.join(" "))
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(words: Vec<String>) -> Result<Self> {
        Vocabulary::from_tokens(words)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words().to_vec()
    }
}

/// Row-major `batch × len` ids with the matching attention mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<u32>, batch: usize, len: usize) -> Result<Self> {
        if ids.len() != batch * len {
            return invalid(format!(
                "token batch of {} ids does not match {batch}x{len}",
                ids.len()
            ));
        }
        let mask = ids.iter().map(|&i| i != PAD).collect();
        Ok(TokenBatch {
            ids,
            mask,
            batch,
            len,
        })
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.ids[i * self.len..(i + 1) * self.len]
    }

    pub fn mask_row(&self, i: usize) -> &[bool] {
        &self.mask[i * self.len..(i + 1) * self.len]
    }

    /// Columns up to the longest non-pad prefix. Padded keys are masked,
    /// so dropping all-pad columns leaves every non-pad output unchanged.
    pub fn trimmed(&self) -> TokenBatch {
        let used = (0..self.batch)
            .map(|b| {
                self.mask_row(b)
                    .iter()
                    .rposition(|&m| m)
                    .map_or(1, |p| p + 1)
            })
            .max()
            .unwrap_or(1);
        if used == self.len {
            return self.clone();
        }
        let ids = (0..self.batch)
            .flat_map(|b| self.row(b)[..used].iter().copied())
            .collect();
        TokenBatch::new(ids, self.batch, used).expect("consistent shape")
    }

    /// Rows `idx` in order.
    pub fn select(&self, idx: &[usize]) -> TokenBatch {
        let ids = idx
            .iter()
            .flat_map(|&b| self.row(b).iter().copied())
            .collect();
        TokenBatch::new(ids, idx.len(), self.len).expect("consistent shape")
    }

    /// Checks the `[CLS] … [SEP] [PAD]…` layout of every row.
    pub fn validate(&self) -> Result<()> {
        for b in 0..self.batch {
            let row = self.row(b);
            let content = row.iter().rposition(|&i| i != PAD);
            let ok = row[0] == CLS
                && content.is_some_and(|last| row[last] == SEP)
                && row.iter().filter(|&&i| i == SEP).count() == 1
                && row
                    .iter()
                    .zip(self.mask_row(b))
                    .all(|(&i, &m)| m == (i != PAD));
            if !ok {
                return invalid(format!("row {b} is not a well-formed token row"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_then_lexicographic() {
        let v = Vocabulary::build(&["a b", "a"], 1, 100).unwrap();
        assert!(v.id("a") < v.id("b"));
        assert_eq!(v.id("a"), NUM_SPECIAL);
        let v2 = Vocabulary::build(&["a b", "a"], 2, 100).unwrap();
        assert!(v2.contains("a"));
        assert_eq!(v2.id("b"), UNK);
        let v3 = Vocabulary::build(&["z y x"], 1, 2).unwrap();
        assert_eq!(v3.words(), ["x", "y"]);
    }

    #[test]
    fn encode_layout() {
        let v = Vocabulary::build(&["woman here opinion discarded"], 1, 100).unwrap();
        let empty = v.encode("", 64).unwrap();
        assert_eq!(&empty[..3], &[CLS, SEP, PAD]);
        assert_eq!(empty.iter().filter(|&&i| i != PAD).count(), 2);

        let row = v.encode("woman here opinion discarded", 64).unwrap();
        assert_eq!(row.iter().filter(|&&i| i != PAD).count(), 6);

        let long = vec!["woman"; 100].join(" ");
        let row = v.encode(&long, 64).unwrap();
        assert_eq!(row.iter().filter(|&&i| i == v.id("woman")).count(), 62);
        assert_eq!(row[63], SEP);
        assert!(v.encode("x", 2).is_err());
    }

    #[test]
    fn decode_conventions() {
        let v = Vocabulary::build(&["alpha beta"], 1, 100).unwrap();
        assert_eq!(v.decode(&[PAD; 8]).unwrap(), "");
        assert_eq!(
            v.decode(&[CLS, UNK, v.id("beta"), SEP]).unwrap(),
            "[UNK] beta"
        );
        assert!(v.decode(&[99]).is_err());
        assert_eq!(
            v.decode(&v.encode("Alpha   BETA", 16).unwrap()).unwrap(),
            "alpha beta"
        );
    }

    #[test]
    fn trimming_keeps_content() {
        let v = Vocabulary::build(&["a b c"], 1, 100).unwrap();
        let batch = v.encode_batch(&["a b c", "a"], 64).unwrap();
        batch.validate().unwrap();
        let t = batch.trimmed();
        assert_eq!(t.len, 5);
        assert_eq!(t.row(1), &[CLS, v.id("a"), SEP, PAD, PAD]);
        t.validate().unwrap();
    }
}
