use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const RESERVED: [&str; 3] = ["<pad>", "<s>", "</s>"];

/// Closed symbol set. Ids `0..3` are the padding, begin and end sentinels; corpus
/// symbols follow in file order.
#[derive(Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new<S: AsRef<str>>(symbols: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for (line, sym) in symbols.into_iter().enumerate() {
            let sym = sym.as_ref();
            if sym.is_empty() || sym.chars().any(char::is_whitespace) {
                return Err(Error::Vocab(format!(
                    "line {}: token `{sym}` is empty or contains whitespace",
                    line + 1
                )));
            }
            if index.contains_key(sym) {
                return Err(Error::Vocab(format!(
                    "line {}: duplicate token `{sym}`",
                    line + 1
                )));
            }
            index.insert(sym.to_string(), tokens.len());
            tokens.push(sym.to_string());
        }
        if tokens.len() == RESERVED.len() {
            return Err(Error::Vocab("no symbols".into()));
        }
        Ok(Vocabulary { tokens, index })
    }

    /// One token per line; blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().map(str::trim).collect();
        let mut symbols = Vec::new();
        for (i, l) in lines.iter().enumerate() {
            if l.is_empty() {
                continue;
            }
            if symbols.contains(l) {
                return Err(Error::Vocab(format!("line {}: duplicate token `{l}`", i + 1)));
            }
            symbols.push(*l);
        }
        Self::new(symbols)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in self.symbols() {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    /// Total size `K`, sentinels included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn symbols(&self) -> impl Iterator<Item = &str> {
        self.tokens[RESERVED.len()..].iter().map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<TokenSequence> {
        let mut ids = Vec::with_capacity(tokens.len());
        for t in tokens {
            let t = t.as_ref();
            match self.id(t) {
                Some(id) if id >= RESERVED.len() => ids.push(id),
                _ => return Err(Error::Vocab(format!("unknown token `{t}`"))),
            }
        }
        Ok(TokenSequence(ids))
    }

    /// Space-separated rendering of a sequence.
    pub fn decode(&self, seq: &TokenSequence) -> String {
        seq.ids()
            .iter()
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl fmt::Debug for Vocabulary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Vocabulary({} tokens)", self.tokens.len())
    }
}

/// Symbol ids of one expression, without sentinels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSequence(pub Vec<usize>);

impl TokenSequence {
    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Decoder inputs `[<s>, w1, ..., wT]`.
    pub fn inputs(&self) -> Vec<usize> {
        std::iter::once(SOS).chain(self.0.iter().copied()).collect()
    }

    /// Decoder targets `[w1, ..., wT, </s>]`.
    pub fn targets(&self) -> Vec<usize> {
        self.0.iter().copied().chain(std::iter::once(EOS)).collect()
    }
}
