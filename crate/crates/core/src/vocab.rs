//! Word-and-punctuation tokenizer with byte fallback.
//!
//! Text is cut into special markup, alphanumeric runs, single punctuation
//! characters and lone whitespace. A single space in front of a word or
//! punctuation mark is folded into the piece as `▁`. Pieces missing from the
//! vocabulary are emitted as their UTF-8 bytes, so `detokenize(tokenize(s))`
//! reproduces `s` exactly for any string.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const AUDIO_OPEN: TokenId = 3;
pub const AUDIO_CLOSE: TokenId = 4;
pub const AUDIO_PLACEHOLDER: TokenId = 5;

/// Markup of the special tokens, in id order.
pub const SPECIALS: [&str; 6] = ["<pad>", "<s>", "</s>", "<audio>", "</audio>", "<AudioInputs>"];

const BYTE_BASE: TokenId = SPECIALS.len() as TokenId;
const FIRST_WORD: TokenId = BYTE_BASE + 256;
const SPACE_MARK: char = '▁';

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

/// One piece of the input: its raw text span.
fn pieces(text: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut pos = 0;
    let starts_special = |at: usize| SPECIALS.iter().position(|s| text[at..].starts_with(s));
    while pos < text.len() {
        if let Some(k) = starts_special(pos) {
            out.push(Piece::Special(k as TokenId));
            pos += SPECIALS[k].len();
            continue;
        }
        let start = pos;
        let rest = &text[pos..];
        let mut chars = rest.chars();
        let c = chars.next().unwrap();
        let lead = c == ' '
            && chars
                .next()
                .is_some_and(|n| !n.is_whitespace() && starts_special(pos + 1).is_none());
        if lead {
            pos += 1;
        }
        let c = text[pos..].chars().next().unwrap();
        if c.is_alphanumeric() {
            let run: usize = text[pos..]
                .chars()
                .take_while(|ch| ch.is_alphanumeric())
                .map(char::len_utf8)
                .sum();
            pos += run;
        } else {
            pos += c.len_utf8();
        }
        out.push(Piece::Text(&text[start..pos]));
    }
    out
}

enum Piece<'a> {
    Special(TokenId),
    Text(&'a str),
}

/// Vocabulary spelling of a raw piece, or `None` when it can only be
/// represented by bytes.
fn spelling(raw: &str) -> Option<String> {
    if raw.contains(SPACE_MARK) || raw.chars().any(|c| c.is_control()) {
        return None;
    }
    let body = raw.strip_prefix(' ').unwrap_or(raw);
    if body.chars().any(char::is_whitespace) && body != " " && !body.is_empty() {
        return None;
    }
    Some(raw.replace(' ', &SPACE_MARK.to_string()))
}

fn byte_token(b: u8) -> String {
    format!("<0x{b:02X}>")
}

impl Vocabulary {
    /// Specials and byte tokens only.
    pub fn base() -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend((0..=255u8).map(byte_token));
        Self::from_tokens(tokens).expect("base vocabulary is valid")
    }

    /// Builds a vocabulary covering every piece seen in `texts`.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut seen = BTreeSet::new();
        for t in texts {
            for p in pieces(t) {
                if let Piece::Text(raw) = p {
                    if let Some(s) = spelling(raw) {
                        seen.insert(s);
                    }
                }
            }
        }
        let mut base = Self::base().tokens;
        base.extend(seen);
        Self::from_tokens(base).expect("built vocabulary is valid")
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let bad = |msg: String| Error::Config(format!("vocabulary: {msg}"));
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(bad(format!("id {i} must be {s}")));
            }
        }
        for b in 0..=255u8 {
            if tokens.get((BYTE_BASE + b as TokenId) as usize) != Some(&byte_token(b)) {
                return Err(bad(format!("missing byte token {}", byte_token(b))));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains('\n') {
                return Err(bad(format!("invalid token at id {i}")));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(bad(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for p in pieces(text) {
            match p {
                Piece::Special(id) => out.push(id),
                Piece::Text(raw) => match spelling(raw).and_then(|s| self.id(&s)) {
                    Some(id) => out.push(id),
                    None => out.extend(raw.bytes().map(|b| BYTE_BASE + b as TokenId)),
                },
            }
        }
        out
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            if (BYTE_BASE..FIRST_WORD).contains(&id) {
                bytes.push((id - BYTE_BASE) as u8);
            } else if let Some(t) = self.token(id) {
                if (id as usize) < SPECIALS.len() {
                    bytes.extend_from_slice(t.as_bytes());
                } else {
                    bytes.extend_from_slice(t.replace(SPACE_MARK, " ").as_bytes());
                }
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}
