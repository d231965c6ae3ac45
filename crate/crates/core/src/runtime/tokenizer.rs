//! Word-level toy tokenizer.
//!
//! Text is split on whitespace and each punctuation character becomes its own
//! token. The vocabulary file holds one token per line and the line number is
//! the id; the first four lines are always `<pad>`, `<bos>`, `<eos>`, `<unk>`.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::runtime::config::{BOS, EOS, PAD, UNK};
use crate::runtime::TokenId;

pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

const OPENING: &[char] = &['(', '[', '{'];
const CLOSING: &[char] = &['.', ',', ';', ':', '!', '?', ')', ']', '}', '"'];

fn is_punct(c: char) -> bool {
    OPENING.contains(&c) || CLOSING.contains(&c)
}

/// Splits text into word and punctuation pieces.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for c in word.chars() {
            if is_punct(c) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Joins pieces back into text: single spaces, none before closing punctuation
/// or after opening brackets.
pub fn join_pieces<S: AsRef<str>>(pieces: &[S]) -> String {
    let mut out = String::new();
    let mut after_opening = true;
    for p in pieces {
        let p = p.as_ref();
        let closing = p.chars().count() == 1 && p.chars().all(|c| CLOSING.contains(&c));
        if !out.is_empty() && !closing && !after_opening {
            out.push(' ');
        }
        out.push_str(p);
        after_opening = p.chars().count() == 1 && p.chars().all(|c| OPENING.contains(&c));
    }
    out
}

/// Whitespace-normalized form of `text`; what a lossless round trip returns.
pub fn normalize(text: &str) -> String {
    join_pieces(&pre_tokenize(text))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from specials followed by `words` in first-seen order.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocab { tokens: Vec::new(), index: HashMap::new() };
        for s in SPECIALS {
            v.push(s);
        }
        for w in words {
            v.push(w.as_ref());
        }
        v
    }

    fn push(&mut self, w: &str) -> TokenId {
        if let Some(&id) = self.index.get(w) {
            return id;
        }
        let id = self.tokens.len() as TokenId;
        self.tokens.push(w.to_string());
        self.index.insert(w.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        pre_tokenize(text)
            .iter()
            .map(|p| self.id(p).unwrap_or(UNK))
            .collect()
    }

    /// Inverse of [`Vocab::tokenize`]; special tokens other than `<unk>` are skipped.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let pieces: Vec<&str> = ids
            .iter()
            .filter(|&&id| !matches!(id, PAD | BOS | EOS))
            .map(|&id| self.token(id).unwrap_or(SPECIALS[UNK as usize]))
            .collect();
        join_pieces(&pieces)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut v = Vocab { tokens: Vec::new(), index: HashMap::new() };
        for (i, line) in text.lines().enumerate() {
            let tok = line.trim_end_matches('\r');
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Corpus {
                    file: path.to_path_buf(),
                    line: i + 1,
                    message: "vocabulary tokens must be non-empty and contain no whitespace".into(),
                });
            }
            if i < SPECIALS.len() && tok != SPECIALS[i] {
                return Err(Error::Corpus {
                    file: path.to_path_buf(),
                    line: i + 1,
                    message: format!("expected special token {}", SPECIALS[i]),
                });
            }
            if v.index.contains_key(tok) {
                return Err(Error::Corpus {
                    file: path.to_path_buf(),
                    line: i + 1,
                    message: format!("duplicate token {tok}"),
                });
            }
            v.push(tok);
        }
        if v.len() < SPECIALS.len() {
            return Err(Error::Corpus {
                file: path.to_path_buf(),
                line: v.len() + 1,
                message: "vocabulary is missing special tokens".into(),
            });
        }
        Ok(v)
    }
}
