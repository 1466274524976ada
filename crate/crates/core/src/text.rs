//! Reference tokenizer and frozen toy text encoder.
//!
//! Token layout follows the CLIP convention: `SOT`, the prompt's word tokens,
//! `EOT`, then padding up to the context length `L`.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{PainterError, Result};

pub const PAD: u32 = 0;
pub const SOT: u32 = 1;
pub const EOT: u32 = 2;
const RESERVED: u32 = 3;

/// Fixed-length token sequence plus the count of non-pad tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedPrompt {
    ids: Vec<u32>,
    actual_len: usize,
}

impl TokenizedPrompt {
    pub fn new(ids: Vec<u32>, actual_len: usize) -> Result<Self> {
        let l = ids.len();
        if actual_len < 2 || actual_len > l {
            return Err(PainterError::domain(format!("actual_len {actual_len} outside [2, {l}]")));
        }
        if ids[0] != SOT || ids[actual_len - 1] != EOT {
            return Err(PainterError::domain("prompt must start with SOT and end with EOT"));
        }
        Ok(Self { ids, actual_len })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn actual_len(&self) -> usize {
        self.actual_len
    }

    pub fn context_len(&self) -> usize {
        self.ids.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub context_len: usize,
    pub vocab_size: u32,
}

impl Tokenizer {
    pub fn new(context_len: usize, vocab_size: u32) -> Self {
        assert!(context_len >= 2, "context must hold SOT and EOT");
        assert!(vocab_size > RESERVED);
        Self { context_len, vocab_size }
    }

    /// Lowercased alphanumeric runs.
    pub fn words(text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect()
    }

    pub fn word_id(&self, word: &str) -> u32 {
        // FNV-1a
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in word.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        RESERVED + (h % (self.vocab_size - RESERVED) as u64) as u32
    }

    /// Words beyond `L - 2` are truncated.
    pub fn encode(&self, text: &str) -> TokenizedPrompt {
        let words = Self::words(text);
        let take = words.len().min(self.context_len - 2);
        let mut ids = Vec::with_capacity(self.context_len);
        ids.push(SOT);
        ids.extend(words[..take].iter().map(|w| self.word_id(w)));
        ids.push(EOT);
        let actual_len = ids.len();
        ids.resize(self.context_len, PAD);
        TokenizedPrompt { ids, actual_len }
    }
}

/// Frozen embedding-table text encoder producing a `D`×`L` context matrix
/// (one column per token position).
#[derive(Debug, Clone)]
pub struct TextEncoder {
    tokenizer: Tokenizer,
    table: Array2<f64>,
    positions: Array2<f64>,
}

impl TextEncoder {
    pub fn new(tokenizer: Tokenizer, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |rows: usize| {
            Array2::from_shape_simple_fn((dim, rows), || {
                let v: f64 = StandardNormal.sample(&mut rng);
                v
            })
        };
        let table = draw(tokenizer.vocab_size as usize);
        let positions = draw(tokenizer.context_len).mapv(|v| 0.1 * v);
        Self {
            tokenizer,
            table,
            positions,
        }
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn dim(&self) -> usize {
        self.table.nrows()
    }

    pub fn encode_tokens(&self, prompt: &TokenizedPrompt) -> Array2<f64> {
        let l = prompt.context_len();
        let mut out = Array2::zeros((self.dim(), l));
        for (j, &id) in prompt.ids().iter().enumerate() {
            let mut col = out.column_mut(j);
            col.assign(&self.table.column(id as usize));
            col += &self.positions.column(j);
        }
        out
    }

    pub fn encode(&self, text: &str) -> (TokenizedPrompt, Array2<f64>) {
        let tokens = self.tokenizer.encode(text);
        let ctx = self.encode_tokens(&tokens);
        (tokens, ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encodes_with_specials_and_padding() {
        let tok = Tokenizer::new(8, 1000);
        let p = tok.encode("A parrot!");
        assert_eq!(p.actual_len(), 4);
        assert_eq!(p.ids()[0], SOT);
        assert_eq!(p.ids()[3], EOT);
        assert!(p.ids()[4..].iter().all(|&i| i == PAD));
        assert_eq!(p.ids()[1], tok.word_id("a"));

        let empty = tok.encode("");
        assert_eq!(empty.actual_len(), 2);

        let long = tok.encode("one two three four five six seven eight nine");
        assert_eq!(long.actual_len(), 8);
        assert_eq!(long.ids()[7], EOT);
    }

    #[test]
    fn rejects_malformed_prompts() {
        assert!(TokenizedPrompt::new(vec![SOT, EOT, PAD], 2).is_ok());
        assert!(TokenizedPrompt::new(vec![SOT, 5, PAD], 3).is_err());
        assert!(TokenizedPrompt::new(vec![SOT], 1).is_err());
    }

    #[test]
    fn encoder_is_deterministic() {
        let tok = Tokenizer::new(8, 64);
        let a = TextEncoder::new(tok, 16, 5).encode("red ball").1;
        let b = TextEncoder::new(tok, 16, 5).encode("red ball").1;
        assert_eq!(a, b);
        assert_eq!(a.dim(), (16, 8));
    }
}
