//! Caption normalization, vocabulary construction, and token codecs.
//!
//! The vocabulary is word-level: four reserved tokens at fixed ids,
//! then corpus words ranked by frequency. Encoding brackets a caption
//! with BOS/EOS and truncates from the tail, keeping the front of the
//! caption.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

/// Reserved token spellings, in id order.
pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Punctuation that becomes a standalone token during normalization.
const SPLIT_PUNCT: [char; 8] = ['.', ',', ';', ':', '!', '?', '(', ')'];

/// Lowercases ASCII letters, splits listed punctuation into standalone
/// tokens, collapses whitespace, and drops non-ASCII characters.
/// Idempotent; may return an empty string.
pub fn normalize_caption(raw: &str) -> String {
    let mut buf = String::with_capacity(raw.len() + 8);
    for ch in raw.chars() {
        if !ch.is_ascii() {
            continue;
        }
        if SPLIT_PUNCT.contains(&ch) {
            buf.push(' ');
            buf.push(ch);
            buf.push(' ');
        } else if ch.is_ascii_whitespace() {
            buf.push(' ');
        } else {
            buf.push(ch.to_ascii_lowercase());
        }
    }
    let words: Vec<&str> = buf.split_whitespace().collect();
    words.join(" ")
}

/// Word-level vocabulary with dense ids.
///
/// Ids 0-3 are PAD, BOS, EOS, UNK. The word lookup map holds only
/// non-reserved entries, so a caption that literally contains a
/// reserved spelling encodes to UNK rather than to a control id.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from normalized captions.
    ///
    /// Words are ranked by frequency (descending), ties broken by
    /// first appearance in the corpus, and truncated to
    /// `max_size - 4` before the reserved tokens are prepended.
    /// An empty corpus yields a reserved-only vocabulary.
    pub fn train(corpus: &[String], max_size: usize) -> Result<Self> {
        if max_size < 5 {
            return Err(Error::InvalidArgument(format!(
                "vocabulary size must be at least 5, got {max_size}"
            )));
        }
        let mut count: HashMap<&str, usize> = HashMap::new();
        let mut first_seen: HashMap<&str, usize> = HashMap::new();
        let mut position = 0usize;
        for caption in corpus {
            for word in caption.split_whitespace() {
                if RESERVED_TOKENS.contains(&word) {
                    continue;
                }
                *count.entry(word).or_insert(0) += 1;
                first_seen.entry(word).or_insert(position);
                position += 1;
            }
        }
        let mut ranked: Vec<&str> = count.keys().copied().collect();
        ranked.sort_by_key(|w| (std::cmp::Reverse(count[w]), first_seen[w]));
        ranked.truncate(max_size - 4);

        let mut id_to_token: Vec<String> = RESERVED_TOKENS.iter().map(|t| t.to_string()).collect();
        let mut token_to_id = HashMap::new();
        for word in ranked {
            token_to_id.insert(word.to_string(), id_to_token.len() as u32);
            id_to_token.push(word.to_string());
        }
        Ok(Vocabulary {
            id_to_token,
            token_to_id,
        })
    }

    /// Rebuilds a vocabulary from a complete token list (reserved
    /// entries first), as stored in checkpoints.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 4 {
            return Err(Error::Data(format!(
                "vocabulary must include the 4 reserved tokens, got {} entries",
                tokens.len()
            )));
        }
        for (i, want) in RESERVED_TOKENS.iter().enumerate() {
            if tokens[i] != *want {
                return Err(Error::Data(format!(
                    "vocabulary id {i} must be {want:?}, found {:?}",
                    tokens[i]
                )));
            }
        }
        let mut token_to_id = HashMap::new();
        for (id, tok) in tokens.iter().enumerate().skip(4) {
            if RESERVED_TOKENS.contains(&tok.as_str()) {
                return Err(Error::Data(format!(
                    "reserved spelling {tok:?} reappears at id {id}"
                )));
            }
            if token_to_id.insert(tok.clone(), id as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Vocabulary {
            id_to_token: tokens,
            token_to_id,
        })
    }

    /// One token per line, line number = id.
    pub fn to_lines(&self) -> String {
        let mut out = self.id_to_token.join("\n");
        out.push('\n');
        out
    }

    pub fn from_lines(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.id_to_token
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "token id {id} out of range for vocabulary of {}",
                    self.id_to_token.len()
                ))
            })
    }

    /// Id of a word, or UNK when absent or reserved.
    pub fn id_or_unk(&self, word: &str) -> u32 {
        self.token_to_id.get(word).copied().unwrap_or(UNK)
    }
}

/// Encodes a normalized caption as BOS + word ids + EOS, truncated so
/// the total length never exceeds `max_len` and EOS is always last.
pub fn encode(v: &Vocabulary, caption: &str, max_len: usize) -> Result<Vec<u32>> {
    if max_len < 3 {
        return Err(Error::InvalidArgument(format!(
            "max caption length must be at least 3, got {max_len}"
        )));
    }
    let mut ids = vec![BOS];
    for word in caption.split_whitespace().take(max_len - 2) {
        ids.push(v.id_or_unk(word));
    }
    ids.push(EOS);
    Ok(ids)
}

/// Drops PAD/BOS/EOS and joins the remaining tokens with spaces.
pub fn decode(v: &Vocabulary, ids: &[u32]) -> Result<String> {
    let mut words = Vec::new();
    for &id in ids {
        if id == PAD || id == BOS || id == EOS {
            continue;
        }
        words.push(v.token(id)?);
    }
    Ok(words.join(" "))
}
