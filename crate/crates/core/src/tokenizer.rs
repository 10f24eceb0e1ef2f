//! Byte-level BPE compatible with the GPT-2 file format
//! (`encoder.json` + `vocab.bpe`).
//!
//! Every byte maps to a printable code point through a fixed bijection, so
//! any UTF-8 input is representable and there is no unknown token.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use fancy_regex::Regex;
use thiserror::Error;

use crate::doc::CleanDocument;

pub const EOS_TOKEN: &str = "<|endoftext|>";

/// The GPT-2 pretokenization pattern.
const PRETOKENIZE_PATTERN: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

static PRETOKENIZER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(PRETOKENIZE_PATTERN).expect("valid pretokenizer pattern"));

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("vocab file is not a JSON object of string -> integer: {0}")]
    VocabFormat(String),
    #[error("vocab has no {EOS_TOKEN:?} entry")]
    MissingEos,
    #[error("vocab ids are not dense: {0}")]
    NonDenseIds(String),
    #[error("vocab lacks the byte-level symbol for byte {0:#04x}")]
    MissingByte(u8),
    #[error("merges line {line}: {message}")]
    BadMerge { line: usize, message: String },
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },
    #[error("token count is zero")]
    NoTokens,
}

/// GPT-2's byte → printable-character table.
pub fn byte_alphabet() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut assigned = [false; 256];
    let printable = (b'!'..=b'~').chain(0xA1..=0xAC).chain(0xAE..=0xFF);
    for b in printable {
        table[b as usize] = char::from_u32(b as u32).unwrap();
        assigned[b as usize] = true;
    }
    let mut next = 0u32;
    for b in 0..256usize {
        if !assigned[b] {
            table[b] = char::from_u32(256 + next).unwrap();
            next += 1;
        }
    }
    table
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub source_doc: Option<crate::doc::DocId>,
}

/// Output of [`TokenizerModel::decode`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub text: String,
    /// Set when the byte sequence was not valid UTF-8 and replacement
    /// characters were substituted.
    pub lossy: bool,
}

/// An immutable byte-level BPE model.
#[derive(Debug, Clone)]
pub struct TokenizerModel {
    vocab: HashMap<String, u32>,
    tokens: Vec<String>,
    /// (left id, right id) → (rank, merged id)
    merges: HashMap<(u32, u32), (u32, u32)>,
    num_merges: usize,
    byte_to_id: [u32; 256],
    char_to_byte: HashMap<char, u8>,
    eos_id: u32,
}

impl TokenizerModel {
    pub fn load(vocab_file: &Path, merges_file: &Path) -> Result<Self, TokenizerError> {
        let read = |p: &Path| {
            fs::read_to_string(p).map_err(|source| TokenizerError::Io {
                path: p.display().to_string(),
                source,
            })
        };
        let vocab: HashMap<String, u32> = serde_json::from_str(&read(vocab_file)?)
            .map_err(|e| TokenizerError::VocabFormat(e.to_string()))?;
        let merges_text = read(merges_file)?;
        let mut merges = Vec::new();
        for (i, line) in merges_text.lines().enumerate() {
            if (i == 0 && line.starts_with("#version")) || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    merges.push((i + 1, l.to_string(), r.to_string()))
                }
                _ => {
                    return Err(TokenizerError::BadMerge {
                        line: i + 1,
                        message: format!("expected \"left right\", got {line:?}"),
                    })
                }
            }
        }
        Self::from_parts(vocab, merges)
    }

    /// Builds a model from a vocabulary and ordered merges given as
    /// (source line, left, right).
    pub fn from_parts(
        vocab: HashMap<String, u32>,
        merges: Vec<(usize, String, String)>,
    ) -> Result<Self, TokenizerError> {
        let n = vocab.len();
        let mut tokens = vec![None; n];
        for (tok, &id) in &vocab {
            let slot = tokens.get_mut(id as usize).ok_or_else(|| {
                TokenizerError::NonDenseIds(format!("{tok:?} has id {id} >= vocab size {n}"))
            })?;
            if let Some(prev) = slot.replace(tok.clone()) {
                return Err(TokenizerError::NonDenseIds(format!(
                    "id {id} assigned to both {prev:?} and {tok:?}"
                )));
            }
        }
        let tokens: Vec<String> = tokens.into_iter().map(Option::unwrap).collect();
        let eos_id = *vocab.get(EOS_TOKEN).ok_or(TokenizerError::MissingEos)?;

        let alphabet = byte_alphabet();
        let mut byte_to_id = [0u32; 256];
        let mut char_to_byte = HashMap::with_capacity(256);
        for (b, &c) in alphabet.iter().enumerate() {
            byte_to_id[b] = *vocab
                .get(&c.to_string())
                .ok_or(TokenizerError::MissingByte(b as u8))?;
            char_to_byte.insert(c, b as u8);
        }

        let mut merge_map = HashMap::with_capacity(merges.len());
        for (rank, (line, left, right)) in merges.iter().enumerate() {
            let lookup = |t: &str| {
                vocab.get(t).copied().ok_or_else(|| TokenizerError::BadMerge {
                    line: *line,
                    message: format!("token {t:?} is not in the vocab"),
                })
            };
            let l = lookup(left)?;
            let r = lookup(right)?;
            let merged = lookup(&format!("{left}{right}"))?;
            merge_map.entry((l, r)).or_insert((rank as u32, merged));
        }

        Ok(TokenizerModel {
            vocab,
            tokens,
            merges: merge_map,
            num_merges: merges.len(),
            byte_to_id,
            char_to_byte,
            eos_id,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn num_merges(&self) -> usize {
        self.num_merges
    }

    pub fn eos_id(&self) -> u32 {
        self.eos_id
    }

    pub fn token_str(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.vocab.get(token).copied()
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        let mut ids = Vec::with_capacity(text.len() / 3 + 1);
        for piece in pretokenize(text) {
            self.encode_piece(piece.as_bytes(), &mut ids);
        }
        TokenSequence {
            ids,
            source_doc: None,
        }
    }

    fn encode_piece(&self, bytes: &[u8], out: &mut Vec<u32>) {
        let mut parts: Vec<u32> = bytes.iter().map(|&b| self.byte_to_id[b as usize]).collect();
        while parts.len() > 1 {
            let best = parts
                .windows(2)
                .filter_map(|w| self.merges.get(&(w[0], w[1])).map(|&(rank, _)| (rank, w[0], w[1])))
                .min();
            let Some((_, left, right)) = best else { break };
            let merged = self.merges[&(left, right)].1;
            let mut next = Vec::with_capacity(parts.len());
            let mut i = 0;
            while i < parts.len() {
                if i + 1 < parts.len() && parts[i] == left && parts[i + 1] == right {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(parts[i]);
                    i += 1;
                }
            }
            parts = next;
        }
        out.extend(parts);
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>, TokenizerError> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self.token_str(id).ok_or(TokenizerError::IdOutOfRange {
                id,
                vocab_size: self.vocab_size(),
            })?;
            for c in tok.chars() {
                match self.char_to_byte.get(&c) {
                    Some(&b) => bytes.push(b),
                    None => {
                        let mut buf = [0u8; 4];
                        bytes.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
                    }
                }
            }
        }
        Ok(bytes)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Decoded, TokenizerError> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(text) => Decoded { text, lossy: false },
            Err(e) => Decoded {
                text: String::from_utf8_lossy(e.as_bytes()).into_owned(),
                lossy: true,
            },
        })
    }

    /// Appends one EOS id. Not idempotent: calling twice appends twice.
    pub fn append_eos(&self, mut seq: TokenSequence) -> TokenSequence {
        seq.ids.push(self.eos_id);
        seq
    }
}

/// Splits text into GPT-2 pretokens.
pub fn pretokenize(text: &str) -> Vec<&str> {
    PRETOKENIZER
        .find_iter(text)
        .map(|m| m.expect("pretokenizer cannot fail on valid UTF-8").as_str())
        .collect()
}

/// Whitespace-delimited words per token (EOS excluded), rounded to four
/// decimal places.
pub fn words_per_token(
    corpus: &[CleanDocument],
    m: &TokenizerModel,
) -> Result<f64, TokenizerError> {
    let (words, tokens) = corpus.iter().fold((0usize, 0usize), |(w, t), d| {
        (w + d.text.split_whitespace().count(), t + m.encode(&d.text).ids.len())
    });
    if tokens == 0 {
        return Err(TokenizerError::NoTokens);
    }
    Ok((words as f64 / tokens as f64 * 1e4).round() / 1e4)
}
