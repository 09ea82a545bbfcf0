//! Frame sampling, synthetic corpora, file formats and batching.

mod batch;
mod captions;
mod corpus;
mod features;
mod synthetic;
mod tokenizer;

pub use batch::{Batch, Batcher};
pub use captions::{load_pseudo_captions, pseudo_caption_prompt, write_pseudo_captions, PROMPT_TEMPLATE};
pub use corpus::{Corpus, VideoRecord};
pub use features::{load_feature_file, write_feature_file, FeatureTable, FEATURE_MAGIC, FEATURE_VERSION};
pub use synthetic::{generate_synthetic_corpus, latent_affinity, SyntheticParams};
pub use tokenizer::{HashTokenizer, EOS, PAD};

use crate::error::{Error, Result};

/// `F` indices `floor(k*T/F)` into a clip of `T` frames. Clips shorter
/// than `F` repeat frames, keeping temporal order.
pub fn sample_frames_uniform(total: usize, count: usize) -> Result<Vec<usize>> {
    if total == 0 {
        return Err(Error::EmptyInput("clip has no frames".into()));
    }
    if count == 0 {
        return Err(Error::Config("frame count must be >= 1".into()));
    }
    Ok((0..count).map(|k| k * total / count).collect())
}

#[cfg(test)]
mod tests;
