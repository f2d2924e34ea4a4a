use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Sequence, Token, Vocab};
use crate::error::{config, validation, Result};

/// Concatenates each document followed by `eos` into one stream and cuts it
/// into consecutive blocks of exactly `len` tokens. The trailing partial
/// block is dropped.
pub fn pack_corpus(documents: &[Vec<Token>], eos: Token, len: usize) -> Result<Vec<Sequence>> {
    if len < 2 {
        return Err(validation(format!("block length must be >= 2, got {len}")));
    }
    let stream: Vec<Token> = documents
        .iter()
        .flat_map(|d| d.iter().copied().chain(std::iter::once(eos)))
        .collect();
    Ok(stream.chunks_exact(len).map(|c| Sequence(c.to_vec())).collect())
}

/// Byte-level vocabulary: the most frequent bytes of a corpus, plus
/// `<unk>`, `<eos>` and optionally `[MASK]`, capped at `max_size` ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharVocab {
    bytes: Vec<u8>,
    with_mask: bool,
}

impl CharVocab {
    pub fn fit<'a>(lines: impl IntoIterator<Item = &'a str>, max_size: usize, with_mask: bool) -> Result<Self> {
        let reserved = 2 + usize::from(with_mask);
        if max_size <= reserved {
            return Err(config(format!("max vocabulary size {max_size} leaves no room for bytes")));
        }
        let mut counts: HashMap<u8, usize> = HashMap::new();
        for line in lines {
            for b in line.bytes() {
                *counts.entry(b).or_default() += 1;
            }
        }
        let mut ranked: Vec<(u8, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(max_size - reserved);
        let mut bytes: Vec<u8> = ranked.into_iter().map(|(b, _)| b).collect();
        bytes.sort_unstable();
        Ok(Self { bytes, with_mask })
    }

    pub fn unk(&self) -> Token {
        self.bytes.len() as Token
    }

    pub fn eos(&self) -> Token {
        self.bytes.len() as Token + 1
    }

    pub fn vocab(&self) -> Vocab {
        let n = self.bytes.len() + 2;
        if self.with_mask {
            Vocab::with_mask(n)
        } else {
            Vocab::plain(n)
        }
    }

    pub fn encode(&self, text: &str) -> Vec<Token> {
        text.bytes()
            .map(|b| match self.bytes.binary_search(&b) {
                Ok(i) => i as Token,
                Err(_) => self.unk(),
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[Token]) -> String {
        let mut raw = Vec::with_capacity(tokens.len());
        for &t in tokens {
            match self.bytes.get(t as usize) {
                Some(&b) => raw.push(b),
                None if t == self.unk() => raw.push(b'?'),
                None if t == self.eos() => raw.push(b'\n'),
                None => raw.push(b'_'),
            }
        }
        String::from_utf8_lossy(&raw).into_owned()
    }
}

/// Packed blocks of an encoded corpus, sampled uniformly for training.
#[derive(Debug, Clone)]
pub struct PackedCorpus {
    pub blocks: Vec<Sequence>,
    pub vocab: Vocab,
}

impl PackedCorpus {
    pub fn from_text(text: &str, chars: &CharVocab, len: usize) -> Result<Self> {
        let docs: Vec<Vec<Token>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| chars.encode(l))
            .collect();
        let blocks = pack_corpus(&docs, chars.eos(), len)?;
        if blocks.is_empty() {
            return Err(validation(format!("corpus is shorter than one block of {len} tokens")));
        }
        Ok(Self { blocks, vocab: chars.vocab() })
    }
}

impl Dataset for PackedCorpus {
    fn seq_len(&self) -> usize {
        self.blocks[0].len()
    }

    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Sequence {
        self.blocks[rng.random_range(0..self.blocks.len())].clone()
    }
}
