use super::EmbeddingBackend;
use crate::error::Result;

/// Deterministic bag-of-tokens embedder.
///
/// Each whitespace-delimited token (lowercased, surrounding punctuation
/// trimmed) adds 1 to a bucket chosen by a seeded FNV-1a hash. Texts sharing
/// more tokens get a higher cosine. No model required.
#[derive(Clone, Debug)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder { dim: 64, seed: 0 }
    }
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashEmbedder { dim, seed }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let mut any = false;
        for token in tokens(text) {
            v[(self.hash(&token) % self.dim as u64) as usize] += 1.0;
            any = true;
        }
        if !any {
            v[(self.hash("<empty>") % self.dim as u64) as usize] = 1.0;
        }
        v
    }

    fn hash(&self, token: &str) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET ^ self.seed.wrapping_mul(PRIME);
        for b in token.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(PRIME);
        }
        h
    }
}

pub(crate) fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
}

impl EmbeddingBackend for HashEmbedder {
    fn id(&self) -> String {
        format!("hash-{}-{}", self.dim, self.seed)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }
}
