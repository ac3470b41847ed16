//! Byte-level tokenization, corpus chunking, and the synthetic copy task.

use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Token;

pub const BOS: Token = 256;
pub const EOS: Token = 257;
pub const PAD: Token = 258;
pub const VOCAB: usize = 259;

pub fn encode(bytes: &[u8]) -> Vec<Token> {
    bytes.iter().map(|&b| Token::from(b)).collect()
}

/// Inverse of [`encode`]; special tokens are dropped.
pub fn decode(tokens: &[Token]) -> Vec<u8> {
    tokens.iter().filter_map(|&t| u8::try_from(t).ok()).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// A text file and its token stream `BOS, bytes.., EOS`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    bytes: Vec<u8>,
    tokens: Vec<Token>,
}

impl Corpus {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        let mut tokens = Vec::with_capacity(bytes.len() + 2);
        tokens.push(BOS);
        tokens.extend(encode(&bytes));
        tokens.push(EOS);
        Self { bytes, tokens }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Input(format!("cannot read corpus {}: {e}", path.display())))?;
        std::str::from_utf8(&bytes)
            .map_err(|e| Error::Input(format!("corpus {} is not UTF-8: {e}", path.display())))?;
        Ok(Self::from_bytes(bytes))
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    /// Hex SHA-256 of the raw bytes.
    pub fn digest(&self) -> String {
        sha256_hex(&self.bytes)
    }

    /// Consecutive non-overlapping windows of `seq_len` tokens; the last one
    /// may be shorter. Together they cover the stream exactly.
    pub fn chunks(&self, seq_len: usize) -> Vec<Vec<Token>> {
        assert!(seq_len > 0, "seq_len must be positive");
        self.tokens.chunks(seq_len).map(<[Token]>::to_vec).collect()
    }

    /// The full-length windows of [`Corpus::chunks`], for batching.
    pub fn windows(&self, seq_len: usize) -> Vec<Vec<Token>> {
        self.chunks(seq_len)
            .into_iter()
            .filter(|c| c.len() == seq_len)
            .collect()
    }
}

/// Lines `payload=payload\n` with lowercase payloads of 3 to 8 letters.
/// Everything after `=` is predictable from the line's first half.
pub fn copy_task_text(lines: usize, rng: &mut impl Rng) -> String {
    let mut out = String::new();
    for _ in 0..lines {
        let len = rng.gen_range(3..=8);
        let payload: String = (0..len).map(|_| char::from(rng.gen_range(b'a'..=b'z'))).collect();
        out.push_str(&payload);
        out.push('=');
        out.push_str(&payload);
        out.push('\n');
    }
    out
}

pub fn copy_task_corpus(lines: usize, rng: &mut impl Rng) -> Corpus {
    Corpus::from_bytes(copy_task_text(lines, rng).into_bytes())
}
