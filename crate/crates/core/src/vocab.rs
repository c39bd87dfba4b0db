//! Token ↔ id mapping with four reserved ids.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: usize = 4;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from corpus tokens. Ids are assigned in
    /// (length, lexical) order so `w4 < w5 < … < w10`, independent of the
    /// order tokens were seen in.
    pub fn from_tokens<'a, I: IntoIterator<Item = &'a str>>(tokens: I) -> Result<Self> {
        let mut uniq: Vec<&str> = tokens.into_iter().collect();
        uniq.sort_by(|a, b| a.len().cmp(&b.len()).then(a.cmp(b)));
        uniq.dedup();
        Self::from_list(uniq.into_iter().map(str::to_string).collect())
    }

    /// `size` ids whose corpus tokens are `w4 … w{size-1}`.
    pub fn synthetic(size: usize) -> Result<Self> {
        if size <= RESERVED {
            return Err(Error::InvalidArgument(format!(
                "vocabulary size must exceed {RESERVED}, got {size}"
            )));
        }
        Self::from_list((RESERVED..size).map(|i| format!("w{i}")).collect())
    }

    /// Corpus tokens in id order (reserved ids excluded).
    pub fn from_list(corpus_tokens: Vec<String>) -> Result<Self> {
        let mut tokens: Vec<String> = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            index.insert(t.clone(), i);
        }
        for t in corpus_tokens {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!("invalid token {t:?}")));
            }
            if index.contains_key(&t) {
                return Err(Error::InvalidArgument(format!("duplicate or reserved token {t:?}")));
            }
            index.insert(t.clone(), tokens.len());
            tokens.push(t);
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= RESERVED
    }

    /// Corpus tokens in id order, without the reserved entries.
    pub fn corpus_tokens(&self) -> &[String] {
        &self.tokens[RESERVED..]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied().filter(|&i| i >= RESERVED)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(UNK_TOKEN, String::as_str)
    }

    /// Unknown tokens map to [`UNK`].
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref()).unwrap_or(UNK)).collect()
    }

    /// Like [`encode`](Self::encode) but fails on the first unknown token.
    pub fn encode_strict<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| {
                self.id(t.as_ref())
                    .ok_or_else(|| Error::VocabMismatch(format!("token {:?} is not in the vocabulary", t.as_ref())))
            })
            .collect()
    }

    /// Drops padding, begin and end markers; unknown or out-of-range ids
    /// print as `<unk>`.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS))
            .map(|&i| {
                if i == UNK || i >= self.tokens.len() {
                    UNK_TOKEN.to_string()
                } else {
                    self.tokens[i].clone()
                }
            })
            .collect()
    }
}
