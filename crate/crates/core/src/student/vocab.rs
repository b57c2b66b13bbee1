use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

const PUNCT: &[char] = &['(', ')', '.', ',', ':', '?'];

/// Splits on whitespace and separates `( ) . , : ?` into their own tokens.
pub fn tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut start = 0;
        for (i, c) in word.char_indices() {
            if PUNCT.contains(&c) {
                if start < i {
                    out.push(&word[start..i]);
                }
                out.push(&word[i..i + c.len_utf8()]);
                start = i + c.len_utf8();
            }
        }
        if start < word.len() {
            out.push(&word[start..]);
        }
    }
    out
}

/// Inverse of [`tokenize`] for text written in the usual style: no space
/// before closing punctuation, none after an opening parenthesis.
pub fn detokenize<'a>(tokens: impl IntoIterator<Item = &'a str>) -> String {
    let mut out = String::new();
    let mut glue_next = true;
    for tok in tokens {
        let closing = matches!(tok, ")" | "." | "," | ":" | "?");
        if !glue_next && !closing {
            out.push(' ');
        }
        out.push_str(tok);
        glue_next = tok == "(";
    }
    out
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Frequency-ordered word vocabulary, ties broken lexicographically,
    /// truncated to `max_size` entries including the four specials.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self, VocabError> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut any = false;
        for text in texts {
            any = true;
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if !any || counts.is_empty() {
            return Err(VocabError::EmptyCorpus);
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|(t, _)| !SPECIALS.contains(t)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
            .take(max_size.max(SPECIALS.len()))
            .collect::<Vec<_>>();
        Ok(tokens.into())
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

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).into_iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        detokenize(
            ids.iter()
                .filter(|&&id| id != PAD && id != BOS && id != EOS)
                .map(|&id| self.token(id)),
        )
    }
}
