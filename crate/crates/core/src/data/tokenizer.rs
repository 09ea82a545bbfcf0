use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Padding id.
pub const PAD: u32 = 0;
/// End of caption; the text encoder reads its summary here.
pub const EOS: u32 = 1;

/// Seeded hash of whitespace-separated words into `[2, vocab_size)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashTokenizer {
    pub seed: u64,
    pub vocab_size: usize,
}

impl HashTokenizer {
    pub fn new(seed: u64, vocab_size: usize) -> Result<Self> {
        if vocab_size < 3 {
            return Err(Error::Config(format!("vocabulary of {vocab_size} leaves no room for words")));
        }
        Ok(Self { seed, vocab_size })
    }

    pub fn word(&self, w: &str) -> u32 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(w.as_bytes());
        let d = h.finalize();
        let x = u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"));
        2 + (x % (self.vocab_size as u64 - 2)) as u32
    }

    /// Word ids followed by [`EOS`].
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.word(w)).chain(std::iter::once(EOS)).collect()
    }
}
