//! Word-level vocabulary and document encoding with start/end sentinels.

use std::collections::HashMap;

use crate::error::{contract_err, Error, Result};

pub const PAD: u32 = 0;
pub const START: u32 = 1;
pub const END: u32 = 2;
pub const UNK: u32 = 3;
/// Joins paragraphs so their boundaries survive concatenation.
pub const SEP: u32 = 4;

pub const RESERVED: [&str; 5] = ["<pad>", "<s>", "</s>", "<unk>", "<p>"];

/// Lowercases and splits on whitespace; every punctuation character
/// becomes its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_alphanumeric() {
                word.extend(ch.to_lowercase());
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Parse(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Frequency-ranked vocabulary, ties broken lexicographically.
    /// `max_size` counts the reserved entries.
    pub fn build<I, T>(corpus: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = T>,
        T: AsRef<str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut docs = 0usize;
        for doc in corpus {
            docs += 1;
            for tok in tokenize(doc.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if docs == 0 {
            return Err(contract_err!("cannot build a vocabulary from an empty corpus"));
        }
        if max_size < RESERVED.len() {
            return Err(Error::Config(format!(
                "vocabulary size {max_size} leaves no room for the {} reserved tokens",
                RESERVED.len()
            )));
        }
        for r in RESERVED {
            counts.remove(r);
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - RESERVED.len());
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
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

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `token<TAB>id` lines in id order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(t);
            out.push('\t');
            out.push_str(&i.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entries: Vec<(u32, String)> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line.rsplit_once('\t').ok_or_else(|| Error::Record {
                line: n + 1,
                message: "expected token<TAB>id".into(),
            })?;
            let id: u32 = id.parse().map_err(|_| Error::Record {
                line: n + 1,
                message: format!("bad id {id:?}"),
            })?;
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Record {
                    line: n + 1,
                    message: format!("bad token {tok:?}"),
                });
            }
            entries.push((id, tok.to_string()));
        }
        entries.sort_by_key(|e| e.0);
        for (i, (id, _)) in entries.iter().enumerate() {
            if *id as usize != i {
                return Err(Error::Parse(format!("vocabulary ids are not contiguous at {i}")));
            }
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if entries.get(i).map(|e| e.1.as_str()) != Some(*r) {
                return Err(Error::Parse(format!("reserved id {i} must be {r}")));
            }
        }
        Self::from_tokens(entries.into_iter().map(|e| e.1).collect())
    }

    /// Space-joined token list for embedding in key=value text.
    pub fn to_inline(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn from_inline(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Parse("inline vocabulary lacks the reserved tokens".into()));
        }
        Self::from_tokens(tokens)
    }
}

/// Encoded ids including the START/END sentinels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    /// Number of content tokens, excluding the two sentinels.
    pub fn content_len(&self) -> usize {
        self.ids.len().saturating_sub(2)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn wrap(mut content: Vec<u32>, max_tokens: usize) -> TokenSequence {
    content.truncate(max_tokens.saturating_sub(2));
    let mut ids = Vec::with_capacity(content.len() + 2);
    ids.push(START);
    ids.extend(content);
    ids.push(END);
    TokenSequence { ids }
}

/// START + head of the document (unknown words as UNK) + END, at most
/// `max_tokens` ids in total.
pub fn encode_document(text: &str, vocab: &Vocab, max_tokens: usize) -> TokenSequence {
    let content = tokenize(text).iter().map(|t| vocab.id(t)).collect();
    wrap(content, max_tokens)
}

/// Encodes paragraphs joined by [`SEP`].
pub fn encode_paragraphs<T: AsRef<str>>(paragraphs: &[T], vocab: &Vocab, max_tokens: usize) -> TokenSequence {
    let mut content = Vec::new();
    for (i, p) in paragraphs.iter().enumerate() {
        if i > 0 {
            content.push(SEP);
        }
        content.extend(tokenize(p.as_ref()).iter().map(|t| vocab.id(t)));
    }
    wrap(content, max_tokens)
}

/// Drops PAD/START/END and joins the remaining tokens with single spaces.
pub fn decode_tokens(ids: &[u32], vocab: &Vocab) -> Result<String> {
    let mut words = Vec::with_capacity(ids.len());
    for &id in ids {
        if matches!(id, PAD | START | END) {
            continue;
        }
        let tok = vocab
            .token(id)
            .ok_or_else(|| contract_err!("token id {id} is outside the vocabulary of {}", vocab.len()))?;
        words.push(tok);
    }
    Ok(words.join(" "))
}
