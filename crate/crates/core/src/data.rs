//! Tokenization and the binary token file.
//!
//! Token file layout (all little-endian):
//!
//! | bytes | field                     |
//! |-------|---------------------------|
//! | 4     | magic `OTOK`              |
//! | 4     | u32 version = 1           |
//! | 4     | u32 vocab_size            |
//! | 8     | u64 token count `n`       |
//! | 2·n   | u16 token ids             |
//!
//! The vocabulary is written next to it as `<file>.vocab.json`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TOKEN_MAGIC: &[u8; 4] = b"OTOK";
pub const TOKEN_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// Fraction of tokens held out for validation (taken from the end).
pub const VAL_FRACTION: f64 = 0.1;

/// Maps text to token ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Vocab {
    /// One token per byte; 256 ids.
    Bytes,
    /// The most frequent characters, plus an unknown-symbol id.
    Chars { symbols: Vec<char>, unk: u16 },
}

impl Vocab {
    /// Character vocabulary of at most `cap` ids (including the unknown id),
    /// ordered by descending frequency then code point.
    pub fn chars_from_text(text: &str, cap: usize) -> Result<Self> {
        if !(2..=u16::MAX as usize).contains(&cap) {
            return Err(Error::Config(format!("vocabulary cap {cap} out of range")));
        }
        let mut counts: HashMap<char, usize> = HashMap::new();
        for c in text.chars() {
            *counts.entry(c).or_default() += 1;
        }
        let mut ranked: Vec<(char, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let symbols: Vec<char> = ranked.into_iter().take(cap - 1).map(|(c, _)| c).collect();
        let unk = symbols.len() as u16;
        Ok(Vocab::Chars { symbols, unk })
    }

    pub fn size(&self) -> usize {
        match self {
            Vocab::Bytes => 256,
            Vocab::Chars { symbols, .. } => symbols.len() + 1,
        }
    }

    pub fn encode(&self, text: &str) -> Vec<u16> {
        match self {
            Vocab::Bytes => text.bytes().map(u16::from).collect(),
            Vocab::Chars { symbols, unk } => {
                let index: HashMap<char, u16> = symbols.iter().enumerate().map(|(i, &c)| (c, i as u16)).collect();
                text.chars().map(|c| index.get(&c).copied().unwrap_or(*unk)).collect()
            }
        }
    }

    pub fn decode(&self, ids: &[u16]) -> Vec<u8> {
        match self {
            Vocab::Bytes => ids.iter().map(|&i| i as u8).collect(),
            Vocab::Chars { symbols, .. } => ids
                .iter()
                .map(|&i| symbols.get(i as usize).copied().unwrap_or('\u{FFFD}'))
                .collect::<String>()
                .into_bytes(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    #[serde(flatten)]
    vocab: Vocab,
    val_fraction: f64,
}

pub fn vocab_path(token_file: &Path) -> PathBuf {
    let mut s = token_file.as_os_str().to_owned();
    s.push(".vocab.json");
    PathBuf::from(s)
}

pub fn encode_token_file(vocab_size: usize, tokens: &[u16]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 2 * tokens.len());
    buf.extend_from_slice(TOKEN_MAGIC);
    buf.extend_from_slice(&TOKEN_VERSION.to_le_bytes());
    buf.extend_from_slice(&(vocab_size as u32).to_le_bytes());
    buf.extend_from_slice(&(tokens.len() as u64).to_le_bytes());
    for t in tokens {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    buf
}

/// Parses a token file, returning `(vocab_size, tokens)`.
pub fn decode_token_file(bytes: &[u8]) -> Result<(usize, Vec<u16>)> {
    let bad = |offset: usize, msg: String| Error::Format {
        offset: offset as u64,
        msg,
    };
    if bytes.len() < HEADER_LEN {
        return Err(bad(bytes.len(), format!("header needs {HEADER_LEN} bytes")));
    }
    if &bytes[0..4] != TOKEN_MAGIC {
        return Err(bad(0, "bad magic, expected OTOK".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != TOKEN_VERSION {
        return Err(bad(4, format!("unsupported version {version}")));
    }
    let vocab_size = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if vocab_size == 0 || vocab_size > u16::MAX as usize + 1 {
        return Err(bad(8, format!("vocab size {vocab_size} out of range")));
    }
    let count = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let payload = &bytes[HEADER_LEN..];
    if payload.len() as u64 != count * 2 {
        return Err(bad(
            HEADER_LEN + payload.len().min(count as usize * 2),
            format!("header declares {count} tokens but payload holds {} bytes", payload.len()),
        ));
    }
    let mut tokens = Vec::with_capacity(count as usize);
    for (i, pair) in payload.chunks_exact(2).enumerate() {
        let t = u16::from_le_bytes([pair[0], pair[1]]);
        if t as usize >= vocab_size {
            return Err(bad(HEADER_LEN + 2 * i, format!("token {t} >= vocab size {vocab_size}")));
        }
        tokens.push(t);
    }
    Ok((vocab_size, tokens))
}

pub fn write_token_file(path: &Path, vocab: &Vocab, tokens: &[u16]) -> Result<()> {
    fs::write(path, encode_token_file(vocab.size(), tokens)).map_err(|e| Error::io(path, e))?;
    let meta = VocabFile {
        vocab: vocab.clone(),
        val_fraction: VAL_FRACTION,
    };
    let vp = vocab_path(path);
    fs::write(&vp, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&vp, e))
}

/// Summary printed by data preparation.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub tokens: usize,
    pub vocab_size: usize,
}

/// Tokenizes a UTF-8 text file into a token file plus vocabulary sidecar.
/// `char_cap` selects the frequency-capped character vocabulary.
pub fn prepare_data(input: &Path, out: &Path, char_cap: Option<usize>) -> Result<Prepared> {
    let text = fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
    let vocab = match char_cap {
        Some(cap) => Vocab::chars_from_text(&text, cap)?,
        None => Vocab::Bytes,
    };
    let tokens = vocab.encode(&text);
    write_token_file(out, &vocab, &tokens)?;
    Ok(Prepared {
        tokens: tokens.len(),
        vocab_size: vocab.size(),
    })
}

/// Tokens split into training and validation parts.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<u16>,
    pub val: Vec<u16>,
    pub vocab: Vocab,
    pub vocab_size: usize,
}

impl Dataset {
    /// Splits `tokens` at `⌊(1 − VAL_FRACTION)·n⌋`.
    pub fn from_tokens(tokens: Vec<u16>, vocab: Vocab) -> Self {
        let cut = ((1.0 - VAL_FRACTION) * tokens.len() as f64).floor() as usize;
        let mut train = tokens;
        let val = train.split_off(cut);
        let vocab_size = vocab.size();
        Self {
            train,
            val,
            vocab,
            vocab_size,
        }
    }

    pub fn total_tokens(&self) -> usize {
        self.train.len() + self.val.len()
    }
}

/// Reads a token file and its vocabulary sidecar.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (vocab_size, tokens) = decode_token_file(&bytes)?;
    let vp = vocab_path(path);
    let vocab = match fs::read(&vp) {
        Ok(raw) => serde_json::from_slice::<VocabFile>(&raw)?.vocab,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound && vocab_size == 256 => Vocab::Bytes,
        Err(e) => return Err(Error::io(&vp, e)),
    };
    if vocab.size() != vocab_size {
        return Err(Error::Format {
            offset: 8,
            msg: format!("vocab size {vocab_size} disagrees with sidecar ({})", vocab.size()),
        });
    }
    Ok(Dataset::from_tokens(tokens, vocab))
}
