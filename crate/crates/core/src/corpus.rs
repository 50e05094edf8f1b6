//! Character stream over a 27-symbol alphabet.
//!
//! Letters are case-folded to `0..26`; every other byte, including bytes of
//! multi-byte UTF-8 sequences, becomes the single non-letter symbol `26`.
//! A `\r\n` line ending counts as one byte, so the stream does not depend on
//! the file's line-ending convention.

use std::path::Path;
use std::sync::Arc;

use crate::network::ALPHABET;

pub const NON_LETTER: u8 = 26;

/// First 10 000 characters of a public-domain novel, for tests and demos.
pub const FALLBACK_TEXT: &str = include_str!("../data/fallback.txt");

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("corpus is empty")]
    Empty,
    #[error("reading corpus {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub fn symbol_of(byte: u8) -> u8 {
    match byte {
        b'a'..=b'z' => byte - b'a',
        b'A'..=b'Z' => byte - b'A',
        _ => NON_LETTER,
    }
}

/// Letter for `0..26`, a space for the non-letter symbol.
pub fn char_of(symbol: u8) -> char {
    if symbol < NON_LETTER {
        (b'a' + symbol) as char
    } else {
        ' '
    }
}

/// Immutable symbol sequence; cheap to clone and share between runs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolStream {
    symbols: Arc<[u8]>,
}

impl SymbolStream {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[u8] {
        &self.symbols
    }

    /// Symbol at position `t`, wrapping around the end of the text.
    pub fn at(&self, t: usize) -> usize {
        self.symbols[t % self.symbols.len()] as usize
    }

    /// Symbols at positions `start .. start + len`, modulo the length.
    pub fn window(&self, start: usize, len: usize) -> Vec<usize> {
        (start..start + len).map(|t| self.at(t)).collect()
    }

    pub fn histogram(&self) -> [usize; ALPHABET] {
        let mut counts = [0; ALPHABET];
        for &s in self.symbols.iter() {
            counts[s as usize] += 1;
        }
        counts
    }

    pub fn render(&self) -> String {
        self.symbols.iter().map(|&s| char_of(s)).collect()
    }
}

pub fn load_corpus(raw: &[u8]) -> Result<SymbolStream, CorpusError> {
    if raw.is_empty() {
        return Err(CorpusError::Empty);
    }
    let symbols = raw
        .iter()
        .enumerate()
        .filter(|&(i, &b)| !(b == b'\r' && raw.get(i + 1) == Some(&b'\n')))
        .map(|(_, &b)| symbol_of(b))
        .collect();
    Ok(SymbolStream { symbols })
}

pub fn load_corpus_file(path: &Path) -> Result<SymbolStream, CorpusError> {
    let raw = std::fs::read(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_corpus(&raw)
}

pub fn fallback_corpus() -> SymbolStream {
    load_corpus(FALLBACK_TEXT.as_bytes()).expect("bundled text is not empty")
}
